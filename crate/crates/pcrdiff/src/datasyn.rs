//! Synthetic registration-pair generation over parametric shape families,
//! the four benchmark regimes, and cloud file I/O.

use crate::geom3d::{random_transform, GeomError, RigidTransform, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad count: {what}")]
    BadCount { what: String },
    #[error("bad fraction: keep = {keep}")]
    BadFraction { keep: f64 },
    #[error("bad range: {what}")]
    BadRange { what: String },
    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("manifest error: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    CubeSurface,
    Torus,
    GaussianBlob,
    Composite,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::CubeSurface,
        ShapeKind::Torus,
        ShapeKind::GaussianBlob,
        ShapeKind::Composite,
    ];

    /// Disjoint kind split for the unseen-categories regime.
    pub const TRAIN_SPLIT: [ShapeKind; 3] =
        [ShapeKind::Sphere, ShapeKind::Torus, ShapeKind::GaussianBlob];
    pub const TEST_SPLIT: [ShapeKind; 2] = [ShapeKind::CubeSurface, ShapeKind::Composite];
}

impl std::str::FromStr for ShapeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sphere" => Ok(ShapeKind::Sphere),
            "cube_surface" => Ok(ShapeKind::CubeSurface),
            "torus" => Ok(ShapeKind::Torus),
            "gaussian_blob" => Ok(ShapeKind::GaussianBlob),
            "composite" => Ok(ShapeKind::Composite),
            other => Err(format!("unknown shape kind {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Clean,
    UnseenCat,
    Noise,
    Partial,
}

impl std::str::FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clean" => Ok(Regime::Clean),
            "unseen-cat" | "unseen_cat" => Ok(Regime::UnseenCat),
            "noise" => Ok(Regime::Noise),
            "partial" => Ok(Regime::Partial),
            other => Err(format!("unknown regime {other}")),
        }
    }
}

/// Perturbation bookkeeping attached to each pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairMeta {
    pub regime: Regime,
    pub kind: ShapeKind,
    pub seed: u64,
    pub noise_sigma: Option<f64>,
    pub noise_clip: Option<f64>,
    pub crop_keep: Option<f64>,
}

/// One registration problem: source cloud, template cloud, ground truth.
#[derive(Debug, Clone)]
pub struct RegPair {
    pub p: Vec<Vec3>,
    pub q: Vec<Vec3>,
    pub g_gt: RigidTransform,
    pub meta: PairMeta,
}

/// Raw shape sample before normalization. Sphere points sit exactly on the
/// unit sphere.
pub fn sample_shape_raw(kind: ShapeKind, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec3>, DataError> {
    if n < 8 {
        return Err(DataError::BadCount { what: format!("{n} points, need at least 8") });
    }
    let mut pts = Vec::with_capacity(n);
    match kind {
        ShapeKind::Sphere => {
            for _ in 0..n {
                pts.push(random_unit(rng));
            }
        }
        ShapeKind::CubeSurface => {
            for _ in 0..n {
                let face = rng.gen_range(0..6usize);
                let a = rng.gen_range(-1.0..1.0);
                let b = rng.gen_range(-1.0..1.0);
                let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                pts.push(match face / 2 {
                    0 => Vec3::new(s, a, b),
                    1 => Vec3::new(a, s, b),
                    _ => Vec3::new(a, b, s),
                });
            }
        }
        ShapeKind::Torus => {
            let (major, minor) = (0.7, 0.3);
            for _ in 0..n {
                let u = rng.gen_range(0.0..std::f64::consts::TAU);
                let v = rng.gen_range(0.0..std::f64::consts::TAU);
                pts.push(Vec3::new(
                    (major + minor * v.cos()) * u.cos(),
                    (major + minor * v.cos()) * u.sin(),
                    minor * v.sin(),
                ));
            }
        }
        ShapeKind::GaussianBlob => {
            for _ in 0..n {
                pts.push(Vec3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ));
            }
        }
        ShapeKind::Composite => {
            let half = n / 2;
            for i in 0..n {
                if i < half {
                    let d = random_unit(rng);
                    pts.push(Vec3::new(0.6 * d.x - 0.4, 0.6 * d.y, 0.6 * d.z));
                } else {
                    let a = rng.gen_range(-0.5..0.5);
                    let b = rng.gen_range(-0.5..0.5);
                    let face = rng.gen_range(0..6usize);
                    let s = if face % 2 == 0 { 0.5 } else { -0.5 };
                    let p = match face / 2 {
                        0 => Vec3::new(s, a, b),
                        1 => Vec3::new(a, s, b),
                        _ => Vec3::new(a, b, s),
                    };
                    pts.push(Vec3::new(p.x + 0.5, p.y, p.z));
                }
            }
        }
    }
    Ok(pts)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-6 {
            return v.scale(1.0 / n);
        }
    }
}

/// Recenter on the centroid and scale so the farthest point sits at radius
/// exactly 1.
pub fn normalize_into_unit_sphere(cloud: &mut [Vec3]) {
    let n = cloud.len() as f64;
    let c = cloud
        .iter()
        .fold(Vec3::ZERO, |acc, p| acc.add(p))
        .scale(1.0 / n);
    let mut max = 0.0f64;
    for p in cloud.iter_mut() {
        *p = p.sub(&c);
        max = max.max(p.norm());
    }
    if max > 0.0 {
        for p in cloud.iter_mut() {
            *p = p.scale(1.0 / max);
        }
    }
}

/// `n` points of the given family, normalized into the unit sphere.
pub fn sample_shape(kind: ShapeKind, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec3>, DataError> {
    let mut pts = sample_shape_raw(kind, n, rng)?;
    normalize_into_unit_sphere(&mut pts);
    Ok(pts)
}

/// Source/template pair: `Q = G_gt · P` with a fresh random transform.
pub fn make_pair(
    base: &[Vec3],
    kind: ShapeKind,
    rot_max_deg: f64,
    trans_max: f64,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<RegPair, DataError> {
    let g_gt = random_transform(rng, rot_max_deg, trans_max)?;
    let q = g_gt.apply(base)?;
    Ok(RegPair {
        p: base.to_vec(),
        q,
        g_gt,
        meta: PairMeta {
            regime: Regime::Clean,
            kind,
            seed,
            noise_sigma: None,
            noise_clip: None,
            crop_keep: None,
        },
    })
}

/// Per-axis i.i.d. Gaussian jitter clipped to ±clip.
pub fn add_gaussian_noise(
    cloud: &[Vec3],
    sigma: f64,
    clip: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec3> {
    cloud
        .iter()
        .map(|p| {
            let mut jitter = |v: f64| {
                let e: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
                v + e.clamp(-clip, clip)
            };
            Vec3::new(jitter(p.x), jitter(p.y), jitter(p.z))
        })
        .collect()
}

/// Keeps the `⌈keep·n⌉` points with the largest projection onto a random
/// direction: a half-space slab crop.
pub fn partial_crop(cloud: &[Vec3], keep: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec3>, DataError> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(DataError::BadFraction { keep });
    }
    let dir = random_unit(rng);
    let k = (keep * cloud.len() as f64).ceil() as usize;
    let mut proj: Vec<(f64, usize)> =
        cloud.iter().enumerate().map(|(i, p)| (p.dot(&dir), i)).collect();
    proj.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = proj[..k].iter().map(|&(_, i)| i).collect();
    kept.sort_unstable();
    Ok(kept.into_iter().map(|i| cloud[i]).collect())
}

/// Defaults from the benchmark protocol.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;
pub const DEFAULT_NOISE_CLIP: f64 = 0.05;
pub const DEFAULT_CROP_KEEP: f64 = 0.7;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetParams {
    pub regime: Regime,
    pub pairs: usize,
    pub test_pairs: usize,
    pub points: usize,
    pub rot_max_deg: f64,
    pub trans_max: f64,
    pub seed: u64,
}

/// Generates one pair with a seed derived from `(base_seed, split, index)`.
fn generate_one(
    params: &DatasetParams,
    kinds: &[ShapeKind],
    split_tag: u64,
    index: u64,
) -> Result<RegPair, DataError> {
    let seed = params
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split_tag.wrapping_mul(0x2545_F491_4F6C_DD1D))
        .wrapping_add(index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = kinds[(index as usize) % kinds.len()];
    let base = sample_shape(kind, params.points, &mut rng)?;
    let mut pair = make_pair(&base, kind, params.rot_max_deg, params.trans_max, seed, &mut rng)?;
    pair.meta.regime = params.regime;
    match params.regime {
        Regime::Clean | Regime::UnseenCat => {}
        Regime::Noise => {
            pair.p = add_gaussian_noise(&pair.p, DEFAULT_NOISE_SIGMA, DEFAULT_NOISE_CLIP, &mut rng);
            pair.q = add_gaussian_noise(&pair.q, DEFAULT_NOISE_SIGMA, DEFAULT_NOISE_CLIP, &mut rng);
            pair.meta.noise_sigma = Some(DEFAULT_NOISE_SIGMA);
            pair.meta.noise_clip = Some(DEFAULT_NOISE_CLIP);
        }
        Regime::Partial => {
            pair.p = partial_crop(&pair.p, DEFAULT_CROP_KEEP, &mut rng)?;
            pair.q = partial_crop(&pair.q, DEFAULT_CROP_KEEP, &mut rng)?;
            pair.meta.crop_keep = Some(DEFAULT_CROP_KEEP);
        }
    }
    Ok(pair)
}

/// Train and held-out pair lists for a regime. The unseen-categories
/// regime draws the two splits from disjoint shape families.
pub fn generate_dataset(params: &DatasetParams) -> Result<(Vec<RegPair>, Vec<RegPair>), DataError> {
    let (train_kinds, test_kinds): (&[ShapeKind], &[ShapeKind]) = match params.regime {
        Regime::UnseenCat => (&ShapeKind::TRAIN_SPLIT, &ShapeKind::TEST_SPLIT),
        _ => (&ShapeKind::ALL, &ShapeKind::ALL),
    };
    let train = (0..params.pairs as u64)
        .map(|i| generate_one(params, train_kinds, 1, i))
        .collect::<Result<Vec<_>, _>>()?;
    let test = (0..params.test_pairs as u64)
        .map(|i| generate_one(params, test_kinds, 2, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((train, test))
}

/// One `x y z` triple per line; `#` lines are comments. Floats use the
/// shortest exact representation.
pub fn save_xyz(path: &Path, cloud: &[Vec3]) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in cloud {
        writeln!(f, "{} {} {}", p.x, p.y, p.z)?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_xyz(path: &Path) -> Result<Vec<Vec3>, DataError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in f.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let vals: Result<Vec<f64>, _> = t.split_whitespace().map(str::parse).collect();
        let vals = vals.map_err(|e| DataError::ParseError {
            line: idx + 1,
            msg: format!("bad float: {e}"),
        })?;
        if vals.len() != 3 {
            return Err(DataError::ParseError {
                line: idx + 1,
                msg: format!("expected 3 fields, got {}", vals.len()),
            });
        }
        out.push(Vec3::new(vals[0], vals[1], vals[2]));
    }
    if out.is_empty() {
        return Err(DataError::EmptyCloud);
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    index: usize,
    split: String,
    meta: PairMeta,
    src: String,
    tpl: String,
    gt: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    params: DatasetParams,
    entries: Vec<ManifestEntry>,
}

/// Writes `manifest.json` plus per-pair `.xyz` clouds and `.txt` transform
/// records into `dir`.
pub fn write_dataset(
    dir: &Path,
    params: &DatasetParams,
    train: &[RegPair],
    test: &[RegPair],
) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (split, pairs) in [("train", train), ("test", test)] {
        for (i, pair) in pairs.iter().enumerate() {
            let src = format!("{split}_{i:05}_src.xyz");
            let tpl = format!("{split}_{i:05}_tpl.xyz");
            let gt = format!("{split}_{i:05}_gt.txt");
            save_xyz(&dir.join(&src), &pair.p)?;
            save_xyz(&dir.join(&tpl), &pair.q)?;
            crate::geom3d::save_transforms(&dir.join(&gt), &[pair.g_gt])
                .map_err(|e| DataError::Manifest(e.to_string()))?;
            entries.push(ManifestEntry {
                index: i,
                split: split.to_string(),
                meta: pair.meta.clone(),
                src,
                tpl,
                gt,
            });
        }
    }
    let manifest = Manifest { params: params.clone(), entries };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DataError::Manifest(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(DatasetParams, Vec<RegPair>, Vec<RegPair>), DataError> {
    let json = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| DataError::Manifest(e.to_string()))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in manifest.entries {
        let p = load_xyz(&dir.join(&e.src))?;
        let q = load_xyz(&dir.join(&e.tpl))?;
        let gts = crate::geom3d::load_transforms(&dir.join(&e.gt))
            .map_err(|err| DataError::Manifest(err.to_string()))?;
        let g_gt = *gts.first().ok_or_else(|| DataError::Manifest("empty gt file".into()))?;
        let pair = RegPair { p, q, g_gt, meta: e.meta };
        match e.split.as_str() {
            "train" => train.push(pair),
            "test" => test.push(pair),
            other => return Err(DataError::Manifest(format!("unknown split {other}"))),
        }
    }
    Ok((manifest.params, train, test))
}
