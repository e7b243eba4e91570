//! Correspondence-based variant: rigid-motion-invariant point descriptors,
//! a shared point-wise MLP, annealed Sinkhorn matching, and a weighted SVD
//! head.

use super::sinkhorn::{geometric_temps, sinkhorn_graph};
use super::{
    cloud_tensor, register_mlp, timestep_embedding, CallCounters, Denoiser, ModelError, Repr,
};
use crate::geom3d::Vec3;
use crate::nnkit::{Graph, ParamStore, Tensor, Var};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CBModelConfig {
    /// Point-wise feature MLP widths.
    pub point_widths: Vec<usize>,
    /// Neighborhood size for the local descriptors (includes the point).
    pub knn: usize,
    /// Sinkhorn normalization rounds; the annealing ladder has this length.
    pub sinkhorn_iters: usize,
    /// Annealing temperatures, geometric from start down to end.
    pub temp_start: f64,
    pub temp_end: f64,
    pub tenc_hidden: usize,
    pub time_embed_dim: usize,
    pub diffusion_conditioning: bool,
}

impl Default for CBModelConfig {
    fn default() -> Self {
        CBModelConfig {
            point_widths: vec![64, 64, 128, 256],
            knn: 16,
            sinkhorn_iters: 5,
            temp_start: 1.0,
            temp_end: 0.1,
            tenc_hidden: 128,
            time_embed_dim: 128,
            diffusion_conditioning: true,
        }
    }
}

impl CBModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.point_widths.is_empty() || self.point_widths.iter().any(|&w| w == 0) {
            return Err(ModelError::Config("bad point-wise widths".into()));
        }
        if self.knn < 4 {
            return Err(ModelError::Config("kNN size must be at least 4".into()));
        }
        if self.sinkhorn_iters < 1 {
            return Err(ModelError::Config("sinkhorn iterations must be >= 1".into()));
        }
        if !(self.temp_start >= self.temp_end && self.temp_end > 0.0) {
            return Err(ModelError::Config("temperatures must be positive decreasing".into()));
        }
        if self.time_embed_dim != self.tenc_hidden {
            return Err(ModelError::Config(
                "timestep embedding width must equal transform-encoder hidden width".into(),
            ));
        }
        Ok(())
    }

    fn feat_width(&self) -> usize {
        *self.point_widths.last().expect("non-empty")
    }

    /// Descriptor layout: sorted kNN distances, covariance eigenvalues,
    /// mean |offset·normal|, mean distance, max distance.
    pub fn descriptor_dim(&self) -> usize {
        self.knn + 6
    }
}

/// Rigid-motion-invariant per-point descriptors.
///
/// The neighborhood includes the point itself, so `n >= knn` suffices.
/// All entries are built from relative geometry only (distances,
/// covariance eigenvalues, unsigned projections onto the local PCA
/// normal), so a rigid motion of the cloud leaves them unchanged.
pub fn pointwise_descriptors(cloud: &[Vec3], knn: usize) -> Result<Tensor, ModelError> {
    let n = cloud.len();
    if n < knn {
        return Err(ModelError::TooFewPoints { n, knn });
    }
    let dim = knn + 6;
    let mut out = vec![0.0; n * dim];
    for (i, p) in cloud.iter().enumerate() {
        let mut dists: Vec<(f64, usize)> = cloud
            .iter()
            .enumerate()
            .map(|(j, q)| (q.sub(p).norm(), j))
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let neigh = &dists[..knn];

        let mut centroid = Vector3::zeros();
        for &(_, j) in neigh {
            centroid += cloud[j].to_na();
        }
        centroid /= knn as f64;
        let mut cov = Matrix3::zeros();
        for &(_, j) in neigh {
            let d = cloud[j].to_na() - centroid;
            cov += d * d.transpose();
        }
        cov /= knn as f64;
        let eig = cov.symmetric_eigen();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let lambdas = [
            eig.eigenvalues[order[0]],
            eig.eigenvalues[order[1]],
            eig.eigenvalues[order[2]],
        ];
        // Normal = eigenvector of the smallest eigenvalue.
        let normal = eig.eigenvectors.column(order[2]).into_owned();

        let row = &mut out[i * dim..(i + 1) * dim];
        for (k, &(d, _)) in neigh.iter().enumerate() {
            row[k] = d;
        }
        row[knn] = lambdas[0];
        row[knn + 1] = lambdas[1];
        row[knn + 2] = lambdas[2];
        let mut mean_proj = 0.0;
        let mut mean_d = 0.0;
        let mut max_d = 0.0f64;
        for &(d, j) in neigh {
            let off = cloud[j].to_na() - p.to_na();
            mean_proj += off.dot(&normal).abs();
            mean_d += d;
            max_d = max_d.max(d);
        }
        row[knn + 3] = mean_proj / knn as f64;
        row[knn + 4] = mean_d / knn as f64;
        row[knn + 5] = max_d;
    }
    Ok(Tensor::from_vec(&[n, dim], out))
}

pub struct CbModel {
    cfg: CBModelConfig,
    t_max: usize,
    pub counters: CallCounters,
}

/// Cached per-pair conditioning for sampling: point-wise features of both
/// clouds plus the raw clouds for the matching head.
pub struct CbCond {
    pub f_p: Tensor,
    pub f_q: Tensor,
    pub p: Vec<Vec3>,
    pub q: Vec<Vec3>,
}

impl CbModel {
    pub fn new(cfg: CBModelConfig, t_max: usize) -> Result<CbModel, ModelError> {
        cfg.validate()?;
        Ok(CbModel { cfg, t_max, counters: CallCounters::default() })
    }

    pub fn config(&self) -> &CBModelConfig {
        &self.cfg
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn register_params<R: rand::Rng>(
        &self,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<(), ModelError> {
        let mut pw = vec![self.cfg.descriptor_dim()];
        pw.extend_from_slice(&self.cfg.point_widths);
        register_mlp(store, rng, "pw", &pw)?;
        if self.cfg.diffusion_conditioning {
            let tenc = vec![7, self.cfg.tenc_hidden, self.cfg.feat_width()];
            register_mlp(store, rng, "tenc", &tenc)?;
        }
        Ok(())
    }

    /// Point-wise features `[N, feat]` of one cloud.
    fn encode_points(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cloud: &[Vec3],
    ) -> Result<Var, ModelError> {
        let desc = pointwise_descriptors(cloud, self.cfg.knn)?;
        let x = g.constant(desc);
        let out = super::mlp_rows(g, store, "pw", x, self.cfg.point_widths.len())?;
        self.counters.record_encodes(1);
        Ok(out)
    }

    /// Plain-tensor point-wise features.
    pub fn cb_pointwise_features(
        &self,
        store: &ParamStore,
        cloud: &[Vec3],
    ) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let f = self.encode_points(&mut g, store, cloud)?;
        Ok(g.value(f).clone())
    }

    fn encode_transform_feat(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        g_t: &[f64],
        t: usize,
    ) -> Result<Var, ModelError> {
        if t > self.t_max {
            return Err(ModelError::StepOutOfRange { t, t_max: self.t_max });
        }
        let x = g.constant(Tensor::from_vec(&[1, 7], g_t.to_vec()));
        let w = g.param(store, "tenc.l0.w")?;
        let b = g.param(store, "tenc.l0.b")?;
        let h = g.dense(x, w, b)?;
        let emb = g.constant(Tensor::from_vec(
            &[1, self.cfg.time_embed_dim],
            timestep_embedding(t, self.cfg.time_embed_dim),
        ));
        let h = g.add(h, emb)?;
        let h = g.relu(h);
        let w = g.param(store, "tenc.l1.w")?;
        let b = g.param(store, "tenc.l1.b")?;
        let out = g.dense(h, w, b)?;
        let f = self.cfg.feat_width();
        Ok(g.reshape(out, &[f])?)
    }

    /// Matching head on already-encoded features: fuse the transform
    /// feature into the template points, similarity, annealed Sinkhorn,
    /// soft targets and weights, then weighted SVD alignment. Returns the
    /// prediction node `[7]`.
    fn match_and_align(
        &self,
        g: &mut Graph,
        f_p: Var,
        f_q: Var,
        f_t: Option<Var>,
        p: &[Vec3],
        q: &[Vec3],
    ) -> Result<Var, ModelError> {
        let f_q = match f_t {
            Some(ft) => g.add_row(f_q, ft)?,
            None => f_q,
        };
        let qt = g.transpose(f_q)?;
        let sim = g.matmul(f_p, qt)?;
        let sim = g.scale(sim, 1.0 / (self.cfg.feat_width() as f64).sqrt());
        let temps =
            geometric_temps(self.cfg.temp_start, self.cfg.temp_end, self.cfg.sinkhorn_iters);
        let assign = sinkhorn_graph(g, sim, &temps)?;
        let q_const = g.constant(cloud_tensor(q));
        let targets = g.matmul(assign, q_const)?;
        let weights = g.row_sum(assign)?;
        let aligned = g.kabsch_align(p, targets, weights)?;
        self.counters.record_decodes(1);

        // Quaternion from the rotation block, positive-trace branch; the
        // clamp guards the sqrt for rotations far outside the training
        // range. The branch yields w >= 0, i.e. canonical form.
        let e0 = g.elem(aligned, 0)?;
        let e4 = g.elem(aligned, 4)?;
        let e8 = g.elem(aligned, 8)?;
        let tr = g.add(e0, e4)?;
        let tr = g.add(tr, e8)?;
        let tr1 = g.add_const(tr, 1.0);
        let tr1 = g.clamp_min(tr1, 1e-12);
        let root = g.sqrt(tr1);
        let s = g.scale(root, 2.0);
        let qw = g.scale(root, 0.5);
        let pick = |g: &mut Graph, hi: usize, lo: usize| -> Result<Var, ModelError> {
            let a = g.elem(aligned, hi)?;
            let b = g.elem(aligned, lo)?;
            let d = g.sub(a, b)?;
            Ok(g.div(d, s)?)
        };
        let qx = pick(g, 7, 5)?;
        let qy = pick(g, 2, 6)?;
        let qz = pick(g, 3, 1)?;
        let t = g.narrow(aligned, 9, 12)?;
        Ok(g.stack(&[qw, qx, qy, qz, t])?)
    }

    /// Single-pass prediction for one pair.
    pub fn forward_pair_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        p: &[Vec3],
        q: &[Vec3],
        g_t: &[f64],
        t: usize,
    ) -> Result<Var, ModelError> {
        let f_p = self.encode_points(g, store, p)?;
        let f_q = self.encode_points(g, store, q)?;
        let f_t = if self.cfg.diffusion_conditioning {
            Some(self.encode_transform_feat(g, store, g_t, t)?)
        } else {
            None
        };
        self.match_and_align(g, f_p, f_q, f_t, p, q)
    }

    pub fn forward_pair(
        &self,
        store: &ParamStore,
        p: &[Vec3],
        q: &[Vec3],
        g_t: &[f64],
        t: usize,
    ) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let out = self.forward_pair_graph(&mut g, store, p, q, g_t, t)?;
        Ok(g.value(out).data().to_vec())
    }
}

impl Denoiser for CbModel {
    type Cond = CbCond;

    fn repr(&self) -> Repr {
        Repr::Quat7
    }

    fn prepare(&self, store: &ParamStore, p: &[Vec3], q: &[Vec3]) -> Result<CbCond, ModelError> {
        let f_p = self.cb_pointwise_features(store, p)?;
        let f_q = self.cb_pointwise_features(store, q)?;
        Ok(CbCond { f_p, f_q, p: p.to_vec(), q: q.to_vec() })
    }

    fn denoise(
        &self,
        store: &ParamStore,
        cond: &CbCond,
        g_t: &[f64],
        t: usize,
    ) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let f_p = g.constant(cond.f_p.clone());
        let f_q = g.constant(cond.f_q.clone());
        let f_t = if self.cfg.diffusion_conditioning {
            Some(self.encode_transform_feat(&mut g, store, g_t, t)?)
        } else {
            None
        };
        let out = self.match_and_align(&mut g, f_p, f_q, f_t, &cond.p, &cond.q)?;
        Ok(g.value(out).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3d::random_transform;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            })
            .collect()
    }

    fn toy_model(rng: &mut ChaCha8Rng) -> (CbModel, ParamStore) {
        let cfg = CBModelConfig {
            point_widths: vec![16, 32],
            knn: 6,
            tenc_hidden: 8,
            time_embed_dim: 8,
            ..CBModelConfig::default()
        };
        let model = CbModel::new(cfg, 50).unwrap();
        let mut store = ParamStore::new();
        model.register_params(&mut store, rng).unwrap();
        (model, store)
    }

    #[test]
    fn descriptors_are_rigid_motion_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let cloud = blob(&mut rng, 24);
        let desc = pointwise_descriptors(&cloud, 8).unwrap();
        for _ in 0..5 {
            let g = random_transform(&mut rng, 170.0, 3.0).unwrap();
            let moved = g.apply(&cloud).unwrap();
            let desc2 = pointwise_descriptors(&moved, 8).unwrap();
            let gap = desc
                .data()
                .iter()
                .zip(desc2.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(gap < 1e-6, "descriptor drift {gap}");
        }
    }

    #[test]
    fn descriptors_permute_with_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let cloud = blob(&mut rng, 12);
        let desc = pointwise_descriptors(&cloud, 5).unwrap();
        let mut rev = cloud.clone();
        rev.reverse();
        let desc_rev = pointwise_descriptors(&rev, 5).unwrap();
        let dim = desc.cols();
        for i in 0..cloud.len() {
            let a = &desc.data()[i * dim..(i + 1) * dim];
            let b = &desc_rev.data()[(cloud.len() - 1 - i) * dim..(cloud.len() - i) * dim];
            assert_eq!(a, b);
        }
    }

    #[test]
    fn descriptors_reject_small_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let cloud = blob(&mut rng, 4);
        assert!(matches!(
            pointwise_descriptors(&cloud, 8),
            Err(ModelError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn feature_shape_matches_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let (model, store) = toy_model(&mut rng);
        let cloud = blob(&mut rng, 10);
        let f = model.cb_pointwise_features(&store, &cloud).unwrap();
        assert_eq!(f.shape(), &[10, 32]);
    }

    #[test]
    fn forward_pair_outputs_unit_canonical_quat() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let (model, store) = toy_model(&mut rng);
        let p = blob(&mut rng, 12);
        let gt = random_transform(&mut rng, 30.0, 0.5).unwrap();
        let q = gt.apply(&p).unwrap();
        let out = model.forward_pair(&store, &p, &q, &[0.0; 7], 3).unwrap();
        assert_eq!(out.len(), 7);
        let qn: f64 = out[..4].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((qn - 1.0).abs() < 1e-6, "quat norm {qn}");
        assert!(out[0] >= 0.0);
    }

    #[test]
    fn equal_weights_reduce_to_unweighted_kabsch() {
        // With uniform weights the weighted alignment must coincide with
        // the plain one.
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let src = blob(&mut rng, 9);
        let gt = random_transform(&mut rng, 45.0, 1.0).unwrap();
        let dst = gt.apply(&src).unwrap();
        let mut g = Graph::new();
        let dv = g.constant(cloud_tensor(&dst));
        let w = g.constant(Tensor::from_vec(&[9], vec![0.37; 9]));
        let out = g.kabsch_align(&src, dv, w).unwrap();
        let plain = crate::geom3d::kabsch(&src, &dst, None).unwrap();
        let rm = plain.rotation_matrix();
        for i in 0..3 {
            for j in 0..3 {
                assert!((g.value(out).data()[3 * i + j] - rm[(i, j)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identity_pair_with_sharp_match_recovers_identity() {
        // Q = P with constructed identity-dominant features: one-hot point
        // features make the similarity diagonal dominate, Sinkhorn
        // sharpens it to the identity permutation, and the alignment must
        // come out near identity.
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let (model, _) = toy_model(&mut rng);
        let n = 16;
        let p = blob(&mut rng, n);
        let width = model.cfg.feat_width();
        let mut feats = Tensor::zeros(&[n, width]);
        for i in 0..n {
            feats.data_mut()[i * width + i] = 8.0;
        }
        let mut g = Graph::new();
        let f_p = g.constant(feats.clone());
        let f_q = g.constant(feats);
        let out = model.match_and_align(&mut g, f_p, f_q, None, &p, &p).unwrap();
        let v: [f64; 7] = g.value(out).data().try_into().unwrap();
        let g_pred = crate::geom3d::TransformVec7(v).to_transform().unwrap();
        let geo = crate::geom3d::rotation_geodesic_rad(
            &g_pred.rotation,
            &crate::geom3d::Quaternion::IDENTITY,
        );
        assert!(geo < 1e-2, "geodesic {geo}");
        assert!(g_pred.translation.norm() < 1e-2);
    }

    #[test]
    fn end_to_end_gradient_check_on_small_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let cfg = CBModelConfig {
            point_widths: vec![8, 12],
            knn: 5,
            sinkhorn_iters: 3,
            tenc_hidden: 6,
            time_embed_dim: 6,
            ..CBModelConfig::default()
        };
        let model = CbModel::new(cfg, 20).unwrap();
        let mut store = ParamStore::new();
        model.register_params(&mut store, &mut rng).unwrap();
        let p = blob(&mut rng, 16);
        let gt = random_transform(&mut rng, 25.0, 0.5).unwrap();
        let q = gt.apply(&p).unwrap();
        let target = gt.to_vec7().0.to_vec();
        let g_t = vec![0.2, 0.1, -0.3, 0.9, 0.0, 0.4, -0.2];

        let builder = move |store: &ParamStore| -> Result<_, ModelError> {
            let mut g = Graph::new();
            let pred = model.forward_pair_graph(&mut g, store, &p, &q, &g_t, 7)?;
            let tv = g.constant(Tensor::from_vec(&[7], target.clone()));
            let d = g.sub(pred, tv)?;
            let sq = g.mul(d, d)?;
            let s = g.sum(sq);
            let loss = g.scale(s, 0.5);
            Ok((g, loss))
        };
        let err =
            crate::nnkit::grad_check(&builder, &mut store, 1e-5, 160, 99).unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }
}
