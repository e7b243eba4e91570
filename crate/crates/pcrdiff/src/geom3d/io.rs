//! Transform record text format: one `qw qx qy qz tx ty tz` line per record.

use super::{GeomError, Quaternion, RigidTransform, TransformVec7, Vec3};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransformIoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Writes one record per line. Floats use the shortest representation that
/// round-trips exactly.
pub fn save_transforms(path: &Path, transforms: &[RigidTransform]) -> Result<(), TransformIoError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for g in transforms {
        let TransformVec7(v) = g.to_vec7();
        writeln!(f, "{} {} {} {} {} {} {}", v[0], v[1], v[2], v[3], v[4], v[5], v[6])?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_transforms(path: &Path) -> Result<Vec<RigidTransform>, TransformIoError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in f.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> = trimmed.split_whitespace().map(str::parse).collect();
        let vals = vals.map_err(|e| TransformIoError::Parse {
            line: idx + 1,
            msg: format!("bad float: {e}"),
        })?;
        if vals.len() != 7 {
            return Err(TransformIoError::Parse {
                line: idx + 1,
                msg: format!("expected 7 fields, got {}", vals.len()),
            });
        }
        let q = Quaternion::new(vals[0], vals[1], vals[2], vals[3]);
        out.push(RigidTransform::new(q, Vec3::new(vals[4], vals[5], vals[6]))?);
    }
    Ok(out)
}
