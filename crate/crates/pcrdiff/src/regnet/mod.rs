//! The denoiser f(G_t, t | P, Q): point-cloud encoders, transformation
//! encoder, feature fusion, and the two decoder variants.

mod cb;
mod cf;
mod sinkhorn;

pub use cb::{pointwise_descriptors, CBModelConfig, CbCond, CbModel};
pub use cf::{CFModelConfig, CfCond, CfModel};
pub use sinkhorn::{sinkhorn, sinkhorn_graph};

use crate::geom3d::Vec3;
use crate::nnkit::{Graph, NnError, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("too few points: {n} < kNN size {knn}")]
    TooFewPoints { n: usize, knn: usize },
    #[error("timestep {t} out of range [0, {t_max}]")]
    StepOutOfRange { t: usize, t_max: usize },
    #[error("clouds in a batch must share a point count (got {a} and {b})")]
    RaggedBatch { a: usize, b: usize },
}

/// Diffusion state representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Repr {
    /// Unit quaternion + translation, 7 reals.
    Quat7,
    /// Intrinsic Z-Y-X Euler angles + translation, 6 reals.
    Euler6,
}

impl Repr {
    pub fn dim(&self) -> usize {
        match self {
            Repr::Quat7 => 7,
            Repr::Euler6 => 6,
        }
    }
}

/// How the encoded noisy-transform feature joins the cloud features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `(F_t + F_P) ⊕ F_Q` — the adopted default.
    FtPlusPConcatQ,
    /// `F_P ⊕ (F_t + F_Q)`.
    FtPlusQConcatP,
    /// `F_t ⊕ F_P ⊕ F_Q`.
    ConcatAll,
}

impl FusionMode {
    /// Width of the fused feature given a per-feature width.
    pub fn fused_width(&self, w: usize) -> usize {
        match self {
            FusionMode::ConcatAll => 3 * w,
            _ => 2 * w,
        }
    }
}

/// Invocation counters backing the single-pass training contract: the
/// encoder must run exactly once per cloud and the decoder exactly once
/// per prediction.
#[derive(Debug, Default)]
pub struct CallCounters {
    clouds_encoded: AtomicUsize,
    decodes: AtomicUsize,
}

impl CallCounters {
    pub fn record_encodes(&self, n: usize) {
        self.clouds_encoded.fetch_add(n, Ordering::Relaxed);
    }

    pub fn record_decodes(&self, n: usize) {
        self.decodes.fetch_add(n, Ordering::Relaxed);
    }

    pub fn clouds_encoded(&self) -> usize {
        self.clouds_encoded.load(Ordering::Relaxed)
    }

    pub fn decodes(&self) -> usize {
        self.decodes.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.clouds_encoded.store(0, Ordering::Relaxed);
        self.decodes.store(0, Ordering::Relaxed);
    }
}

/// Conditioning features cached once per pair; the sampling loop re-invokes
/// only the decoder.
pub trait Denoiser {
    type Cond;

    fn repr(&self) -> Repr;

    /// Encodes both clouds once.
    fn prepare(
        &self,
        store: &ParamStore,
        p: &[Vec3],
        q: &[Vec3],
    ) -> Result<Self::Cond, ModelError>;

    /// Predicts the clean transform vector from the noisy one.
    fn denoise(
        &self,
        store: &ParamStore,
        cond: &Self::Cond,
        g_t: &[f64],
        t: usize,
    ) -> Result<Vec<f64>, ModelError>;
}

/// Sinusoidal embedding of an integer timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let half = dim / 2;
    for i in 0..half {
        let freq = (-(i as f64) * (10_000f64).ln() / half.max(1) as f64).exp();
        out[2 * i] = (t as f64 * freq).sin();
        out[2 * i + 1] = (t as f64 * freq).cos();
    }
    out
}

/// Shared MLP applied to every row: dense layers with relu between them and
/// a linear final layer. Parameter names are `{prefix}.l{i}.{w,b}`.
pub(crate) fn mlp_rows(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    mut x: Var,
    n_layers: usize,
) -> Result<Var, NnError> {
    for i in 0..n_layers {
        let w = g.param(store, &format!("{prefix}.l{i}.w"))?;
        let b = g.param(store, &format!("{prefix}.l{i}.b"))?;
        x = if i + 1 < n_layers { g.dense_relu(x, w, b)? } else { g.dense(x, w, b)? };
    }
    Ok(x)
}

pub(crate) fn register_mlp<R: rand::Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    widths: &[usize],
) -> Result<(), NnError> {
    for (i, w) in widths.windows(2).enumerate() {
        store.register_dense(rng, &format!("{prefix}.l{i}"), w[0], w[1])?;
    }
    Ok(())
}

/// Cloud as an `[N, 3]` constant tensor.
pub(crate) fn cloud_tensor(cloud: &[Vec3]) -> Tensor {
    let data: Vec<f64> = cloud.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    Tensor::from_vec(&[cloud.len(), 3], data)
}

/// Rotation matrix `[3,3]` and translation `[3]` subgraph of a raw
/// prediction vector. The quaternion part is normalized on-tape; the Euler
/// path goes through sin/cos. Both stay differentiable.
pub fn transform_graph(g: &mut Graph, pred: Var, repr: Repr) -> Result<(Var, Var), NnError> {
    match repr {
        Repr::Quat7 => {
            let q = g.narrow(pred, 0, 4)?;
            let t = g.narrow(pred, 4, 7)?;
            let qsq = g.mul(q, q)?;
            let n2 = g.sum(qsq);
            let n2 = g.clamp_min(n2, 1e-16);
            let n = g.sqrt(n2);
            let qn = g.div(q, n)?;
            let w = g.elem(qn, 0)?;
            let x = g.elem(qn, 1)?;
            let y = g.elem(qn, 2)?;
            let z = g.elem(qn, 3)?;
            let two = 2.0;
            // R(q) for unit q, entries as 1-D scalar nodes.
            let xx = g.mul(x, x)?;
            let yy = g.mul(y, y)?;
            let zz = g.mul(z, z)?;
            let xy = g.mul(x, y)?;
            let xz = g.mul(x, z)?;
            let yz = g.mul(y, z)?;
            let wx = g.mul(w, x)?;
            let wy = g.mul(w, y)?;
            let wz = g.mul(w, z)?;
            let r00 = {
                let s = g.add(yy, zz)?;
                let s = g.scale(s, -two);
                g.add_const(s, 1.0)
            };
            let r11 = {
                let s = g.add(xx, zz)?;
                let s = g.scale(s, -two);
                g.add_const(s, 1.0)
            };
            let r22 = {
                let s = g.add(xx, yy)?;
                let s = g.scale(s, -two);
                g.add_const(s, 1.0)
            };
            let r01 = {
                let s = g.sub(xy, wz)?;
                g.scale(s, two)
            };
            let r02 = {
                let s = g.add(xz, wy)?;
                g.scale(s, two)
            };
            let r10 = {
                let s = g.add(xy, wz)?;
                g.scale(s, two)
            };
            let r12 = {
                let s = g.sub(yz, wx)?;
                g.scale(s, two)
            };
            let r20 = {
                let s = g.sub(xz, wy)?;
                g.scale(s, two)
            };
            let r21 = {
                let s = g.add(yz, wx)?;
                g.scale(s, two)
            };
            let flat = g.stack(&[r00, r01, r02, r10, r11, r12, r20, r21, r22])?;
            let r = g.reshape(flat, &[3, 3])?;
            Ok((r, t))
        }
        Repr::Euler6 => {
            let yaw = g.elem(pred, 0)?;
            let pitch = g.elem(pred, 1)?;
            let roll = g.elem(pred, 2)?;
            let t = g.narrow(pred, 3, 6)?;
            let (cy, sy) = (g.cos(yaw), g.sin(yaw));
            let (cp, sp) = (g.cos(pitch), g.sin(pitch));
            let (cr, sr) = (g.cos(roll), g.sin(roll));
            // R = Rz(yaw) Ry(pitch) Rx(roll).
            let r00 = g.mul(cy, cp)?;
            let r10 = g.mul(sy, cp)?;
            let sp_neg = g.scale(sp, -1.0);
            let r20 = sp_neg;
            let cysp = g.mul(cy, sp)?;
            let sysp = g.mul(sy, sp)?;
            let r01 = {
                let a = g.mul(cysp, sr)?;
                let b = g.mul(sy, cr)?;
                g.sub(a, b)?
            };
            let r02 = {
                let a = g.mul(cysp, cr)?;
                let b = g.mul(sy, sr)?;
                g.add(a, b)?
            };
            let r11 = {
                let a = g.mul(sysp, sr)?;
                let b = g.mul(cy, cr)?;
                g.add(a, b)?
            };
            let r12 = {
                let a = g.mul(sysp, cr)?;
                let b = g.mul(cy, sr)?;
                g.sub(a, b)?
            };
            let r21 = g.mul(cp, sr)?;
            let r22 = g.mul(cp, cr)?;
            let flat = g.stack(&[r00, r01, r02, r10, r11, r12, r20, r21, r22])?;
            let r = g.reshape(flat, &[3, 3])?;
            Ok((r, t))
        }
    }
}

/// Canonical target vector of a ground-truth transform under a
/// representation.
pub fn target_vec(g_gt: &crate::geom3d::RigidTransform, repr: Repr) -> Result<Vec<f64>, ModelError> {
    match repr {
        Repr::Quat7 => Ok(g_gt.to_vec7().0.to_vec()),
        Repr::Euler6 => {
            let v6 = crate::geom3d::euler_to_vec6(g_gt)
                .map_err(|e| ModelError::Config(format!("euler target: {e}")))?;
            Ok(v6.0.to_vec())
        }
    }
}

/// Raw prediction vector to a rigid transform (normalizing as needed).
pub fn vec_to_transform(v: &[f64], repr: Repr) -> Result<crate::geom3d::RigidTransform, ModelError> {
    match repr {
        Repr::Quat7 => {
            let arr: [f64; 7] = v.try_into().map_err(|_| ModelError::Config("pred dim".into()))?;
            crate::geom3d::TransformVec7(arr)
                .to_transform()
                .map_err(|e| ModelError::Config(format!("prediction not convertible: {e}")))
        }
        Repr::Euler6 => {
            let arr: [f64; 6] = v.try_into().map_err(|_| ModelError::Config("pred dim".into()))?;
            crate::geom3d::vec6_to_transform(&crate::geom3d::TransformVec6(arr))
                .map_err(|e| ModelError::Config(format!("prediction not convertible: {e}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3d::random_transform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embedding_distinguishes_timesteps() {
        let a = timestep_embedding(0, 128);
        let b = timestep_embedding(1000, 128);
        let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap > 0.0);
        assert_eq!(a.len(), 128);
        assert_eq!(timestep_embedding(5, 128), timestep_embedding(5, 128));
    }

    #[test]
    fn transform_graph_matches_geom3d_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let gt = random_transform(&mut rng, 120.0, 2.0).unwrap();
            let v7 = gt.to_vec7();
            let mut g = Graph::new();
            let pred = g.constant(Tensor::from_vec(&[7], v7.0.to_vec()));
            let (r, t) = transform_graph(&mut g, pred, Repr::Quat7).unwrap();
            let rm = gt.rotation_matrix();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((g.value(r).data()[3 * i + j] - rm[(i, j)]).abs() < 1e-12);
                }
            }
            assert!((g.value(t).data()[0] - gt.translation.x).abs() < 1e-15);
        }
    }

    #[test]
    fn transform_graph_euler_matches_geom3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let gt = random_transform(&mut rng, 80.0, 2.0).unwrap();
            let v6 = crate::geom3d::euler_to_vec6(&gt).unwrap();
            let mut g = Graph::new();
            let pred = g.constant(Tensor::from_vec(&[6], v6.0.to_vec()));
            let (r, _) = transform_graph(&mut g, pred, Repr::Euler6).unwrap();
            let rm = gt.rotation_matrix();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((g.value(r).data()[3 * i + j] - rm[(i, j)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn transform_graph_normalizes_scaled_quat() {
        let mut g = Graph::new();
        let pred = g.constant(Tensor::from_vec(&[7], vec![2.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0]));
        let (r, _) = transform_graph(&mut g, pred, Repr::Quat7).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g.value(r).data()[3 * i + j] - want).abs() < 1e-12);
            }
        }
    }
}
