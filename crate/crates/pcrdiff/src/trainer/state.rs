//! Full-precision training state for exact resume: parameter values, Adam
//! moments, step counters, and the plateau-schedule state.

use super::TrainError;
use crate::nnkit::{ParamStore, Tensor};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PCRS";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct TrainState {
    pub next_epoch: usize,
    pub global_step: usize,
    pub lr: f64,
    pub best_eval: f64,
    pub evals_since_best: usize,
}

impl TrainState {
    pub fn fresh(lr: f64) -> TrainState {
        TrainState {
            next_epoch: 0,
            global_step: 0,
            lr,
            best_eval: f64::INFINITY,
            evals_since_best: 0,
        }
    }
}

pub fn save_train_state(
    path: &Path,
    store: &ParamStore,
    state: &TrainState,
) -> Result<(), TrainError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(state.next_epoch as u64).to_le_bytes())?;
    f.write_all(&(state.global_step as u64).to_le_bytes())?;
    f.write_all(&state.lr.to_le_bytes())?;
    f.write_all(&state.best_eval.to_le_bytes())?;
    f.write_all(&(state.evals_since_best as u64).to_le_bytes())?;
    f.write_all(&store.step_count().to_le_bytes())?;
    let tensors = store.state_tensors();
    f.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, value, m, v) in &tensors {
        let nb = name.as_bytes();
        f.write_all(&(nb.len() as u16).to_le_bytes())?;
        f.write_all(nb)?;
        f.write_all(&[value.shape().len() as u8])?;
        for &d in value.shape() {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for arr in [value, m, v] {
            for x in arr.data() {
                f.write_all(&x.to_le_bytes())?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_train_state(path: &Path, store: &mut ParamStore) -> Result<TrainState, TrainError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TrainError::State("bad magic in train state".into()));
    }
    let version = read_u32(&mut f)?;
    if version != VERSION {
        return Err(TrainError::State(format!("train state version {version} unsupported")));
    }
    let next_epoch = read_u64(&mut f)? as usize;
    let global_step = read_u64(&mut f)? as usize;
    let lr = read_f64(&mut f)?;
    let best_eval = read_f64(&mut f)?;
    let evals_since_best = read_u64(&mut f)? as usize;
    let adam_step = read_u64(&mut f)?;
    let count = read_u32(&mut f)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let mut lb = [0u8; 2];
        f.read_exact(&mut lb)?;
        let mut nb = vec![0u8; u16::from_le_bytes(lb) as usize];
        f.read_exact(&mut nb)?;
        let name = String::from_utf8(nb).map_err(|e| TrainError::State(e.to_string()))?;
        let mut ndim = [0u8; 1];
        f.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut f)? as usize);
        }
        let n: usize = shape.iter().product();
        let read_tensor = |f: &mut std::io::BufReader<std::fs::File>| -> Result<Tensor, TrainError> {
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(read_f64(f)?);
            }
            Ok(Tensor::from_vec(&shape, data))
        };
        let value = read_tensor(&mut f)?;
        let m = read_tensor(&mut f)?;
        let v = read_tensor(&mut f)?;
        tensors.push((name, value, m, v));
    }
    store
        .restore_state(adam_step, tensors)
        .map_err(|e| TrainError::State(e.to_string()))?;
    Ok(TrainState { next_epoch, global_step, lr, best_eval, evals_since_best })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TrainError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, TrainError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, TrainError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
