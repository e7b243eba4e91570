//! Correspondence-free variant: shared PointNet-style global encoder,
//! transformation encoder, feature fusion, and a regression decoder.

use super::{
    register_mlp, timestep_embedding, CallCounters, Denoiser, FusionMode, ModelError, Repr,
};
use crate::geom3d::Vec3;
use crate::nnkit::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CFModelConfig {
    /// Shared per-point MLP widths of the global encoder.
    pub encoder_widths: Vec<usize>,
    /// Transform-encoder hidden width; the timestep embedding is added here.
    pub tenc_hidden: usize,
    /// Transform-encoder output width; must match the final encoder width.
    pub tenc_out: usize,
    /// Sinusoidal timestep embedding width; must match `tenc_hidden`.
    pub time_embed_dim: usize,
    /// Decoder hidden widths (input and output widths are derived).
    pub decoder_widths: Vec<usize>,
    pub fusion: FusionMode,
    pub repr: Repr,
    /// When false the transformation encoder is bypassed and zeros are fed
    /// for the transform feature (the diffusion-free ablation).
    pub diffusion_conditioning: bool,
}

impl Default for CFModelConfig {
    fn default() -> Self {
        CFModelConfig {
            encoder_widths: vec![64, 64, 64, 128, 1024],
            tenc_hidden: 128,
            tenc_out: 1024,
            time_embed_dim: 128,
            decoder_widths: vec![1024, 512, 256],
            fusion: FusionMode::FtPlusPConcatQ,
            repr: Repr::Quat7,
            diffusion_conditioning: true,
        }
    }
}

impl CFModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.encoder_widths.is_empty() || self.decoder_widths.is_empty() {
            return Err(ModelError::Config("empty layer width list".into()));
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|&w| w == 0) {
            return Err(ModelError::Config("zero layer width".into()));
        }
        let enc_out = *self.encoder_widths.last().expect("non-empty");
        if self.tenc_out != enc_out {
            return Err(ModelError::Config(format!(
                "transform-encoder output {} must equal final encoder width {enc_out}",
                self.tenc_out
            )));
        }
        if self.time_embed_dim != self.tenc_hidden {
            return Err(ModelError::Config(format!(
                "timestep embedding width {} must equal transform-encoder hidden width {}",
                self.time_embed_dim, self.tenc_hidden
            )));
        }
        Ok(())
    }

    fn fused_width(&self) -> usize {
        self.fusion.fused_width(*self.encoder_widths.last().expect("non-empty"))
    }
}

pub struct CfModel {
    cfg: CFModelConfig,
    t_max: usize,
    pub counters: CallCounters,
}

/// Cached per-pair conditioning: global features of both clouds.
pub struct CfCond {
    pub f_p: Tensor,
    pub f_q: Tensor,
}

impl CfModel {
    pub fn new(cfg: CFModelConfig, t_max: usize) -> Result<CfModel, ModelError> {
        cfg.validate()?;
        Ok(CfModel { cfg, t_max, counters: CallCounters::default() })
    }

    pub fn config(&self) -> &CFModelConfig {
        &self.cfg
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn repr(&self) -> Repr {
        self.cfg.repr
    }

    pub fn register_params<R: rand::Rng>(
        &self,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<(), ModelError> {
        let mut enc = vec![3];
        enc.extend_from_slice(&self.cfg.encoder_widths);
        register_mlp(store, rng, "enc", &enc)?;
        if self.cfg.diffusion_conditioning {
            let tenc = vec![self.cfg.repr.dim(), self.cfg.tenc_hidden, self.cfg.tenc_out];
            register_mlp(store, rng, "tenc", &tenc)?;
        }
        let mut dec = vec![self.cfg.fused_width()];
        dec.extend_from_slice(&self.cfg.decoder_widths);
        dec.push(self.cfg.repr.dim());
        register_mlp(store, rng, "dec", &dec)?;
        Ok(())
    }

    /// Shared per-point MLP with relu after every layer, then segmented
    /// max-pool; `clouds` must share a point count. Output `[B, enc_out]`.
    fn encode_clouds(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        clouds: &[&[Vec3]],
    ) -> Result<Var, ModelError> {
        let n = clouds.first().map(|c| c.len()).unwrap_or(0);
        if n == 0 {
            return Err(ModelError::Nn(crate::nnkit::NnError::EmptyCloud));
        }
        for c in clouds {
            if c.len() != n {
                return Err(ModelError::RaggedBatch { a: n, b: c.len() });
            }
        }
        let data: Vec<f64> = clouds
            .iter()
            .flat_map(|c| c.iter())
            .flat_map(|p| [p.x, p.y, p.z])
            .collect();
        let mut x = g.constant(Tensor::from_vec(&[clouds.len() * n, 3], data));
        for i in 0..self.cfg.encoder_widths.len() {
            let w = g.param(store, &format!("enc.l{i}.w"))?;
            let b = g.param(store, &format!("enc.l{i}.b"))?;
            x = g.dense_relu(x, w, b)?;
        }
        let pooled = g.seg_max_pool(x, n)?;
        self.counters.record_encodes(clouds.len());
        Ok(pooled)
    }

    /// Global feature of one cloud as a plain tensor.
    pub fn encode_pointcloud_global(
        &self,
        store: &ParamStore,
        cloud: &[Vec3],
    ) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let pooled = self.encode_clouds(&mut g, store, &[cloud])?;
        let out = g.row(pooled, 0)?;
        Ok(g.value(out).clone())
    }

    /// Transform encoder over a batch: `[B, repr_dim]` states and their
    /// timesteps to `[B, tenc_out]` features. The sinusoidal embedding is
    /// added at the hidden layer.
    fn encode_transforms(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        g_ts: &[Vec<f64>],
        ts: &[usize],
    ) -> Result<Var, ModelError> {
        let b = g_ts.len();
        let dim = self.cfg.repr.dim();
        for t in ts {
            if *t > self.t_max {
                return Err(ModelError::StepOutOfRange { t: *t, t_max: self.t_max });
            }
        }
        let data: Vec<f64> = g_ts.iter().flat_map(|v| v.iter().copied()).collect();
        let x = g.constant(Tensor::from_vec(&[b, dim], data));
        let w = g.param(store, "tenc.l0.w")?;
        let bias = g.param(store, "tenc.l0.b")?;
        let h = g.dense(x, w, bias)?;
        let emb_data: Vec<f64> = ts
            .iter()
            .flat_map(|&t| timestep_embedding(t, self.cfg.time_embed_dim))
            .collect();
        let emb = g.constant(Tensor::from_vec(&[b, self.cfg.time_embed_dim], emb_data));
        let h = g.add(h, emb)?;
        let h = g.relu(h);
        let w = g.param(store, "tenc.l1.w")?;
        let bias = g.param(store, "tenc.l1.b")?;
        Ok(g.dense(h, w, bias)?)
    }

    /// Transform feature of one state as a plain tensor.
    pub fn encode_transform(
        &self,
        store: &ParamStore,
        g_t: &[f64],
        t: usize,
    ) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let f = self.encode_transforms(&mut g, store, &[g_t.to_vec()], &[t])?;
        let out = g.row(f, 0)?;
        Ok(g.value(out).clone())
    }

    /// Feature fusion per the configured mode.
    pub fn fuse(
        &self,
        g: &mut Graph,
        f_t: Var,
        f_p: Var,
        f_q: Var,
    ) -> Result<Var, ModelError> {
        let fused = match self.cfg.fusion {
            FusionMode::FtPlusPConcatQ => {
                let s = g.add(f_t, f_p)?;
                g.concat_cols(s, f_q)?
            }
            FusionMode::FtPlusQConcatP => {
                let s = g.add(f_t, f_q)?;
                g.concat_cols(f_p, s)?
            }
            FusionMode::ConcatAll => {
                let pq = g.concat_cols(f_p, f_q)?;
                g.concat_cols(f_t, pq)?
            }
        };
        Ok(fused)
    }

    fn decode(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> Result<Var, ModelError> {
        let n_layers = self.cfg.decoder_widths.len() + 1;
        let out = super::mlp_rows(g, store, "dec", fused, n_layers)?;
        self.counters.record_decodes(g.value(fused).rows());
        Ok(out)
    }

    /// Batched single-pass prediction: returns the `[B, repr_dim]` node.
    /// Each cloud is encoded exactly once and the decoder runs once.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sources: &[&[Vec3]],
        templates: &[&[Vec3]],
        g_ts: &[Vec<f64>],
        ts: &[usize],
    ) -> Result<Var, ModelError> {
        let b = sources.len();
        assert!(b == templates.len() && b == g_ts.len() && b == ts.len());
        let mut all: Vec<&[Vec3]> = Vec::with_capacity(2 * b);
        all.extend_from_slice(sources);
        all.extend_from_slice(templates);
        let pooled = self.encode_clouds(g, store, &all)?;
        let f_p = g.slice_rows(pooled, 0, b)?;
        let f_q = g.slice_rows(pooled, b, 2 * b)?;
        let f_t = if self.cfg.diffusion_conditioning {
            self.encode_transforms(g, store, g_ts, ts)?
        } else {
            g.constant(Tensor::zeros(&[b, self.cfg.tenc_out]))
        };
        let fused = self.fuse(g, f_t, f_p, f_q)?;
        self.decode(g, store, fused)
    }

    /// Single-pair prediction as a plain vector.
    pub fn forward_pair(
        &self,
        store: &ParamStore,
        p: &[Vec3],
        q: &[Vec3],
        g_t: &[f64],
        t: usize,
    ) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let out = self.forward_batch(&mut g, store, &[p], &[q], &[g_t.to_vec()], &[t])?;
        let row = g.row(out, 0)?;
        Ok(g.value(row).data().to_vec())
    }
}

impl Denoiser for CfModel {
    type Cond = CfCond;

    fn repr(&self) -> Repr {
        self.cfg.repr
    }

    fn prepare(&self, store: &ParamStore, p: &[Vec3], q: &[Vec3]) -> Result<CfCond, ModelError> {
        let mut g = Graph::new();
        let pooled = self.encode_clouds(&mut g, store, &[p, q])?;
        let fp = g.row(pooled, 0)?;
        let fq = g.row(pooled, 1)?;
        Ok(CfCond { f_p: g.value(fp).clone(), f_q: g.value(fq).clone() })
    }

    fn denoise(
        &self,
        store: &ParamStore,
        cond: &CfCond,
        g_t: &[f64],
        t: usize,
    ) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let w = self.cfg.tenc_out;
        let f_p = g.constant(cond.f_p.reshaped(&[1, w]));
        let f_q = g.constant(cond.f_q.reshaped(&[1, w]));
        let f_t = if self.cfg.diffusion_conditioning {
            self.encode_transforms(&mut g, store, &[g_t.to_vec()], &[t])?
        } else {
            g.constant(Tensor::zeros(&[1, w]))
        };
        let fused = self.fuse(&mut g, f_t, f_p, f_q)?;
        let out = self.decode(&mut g, store, fused)?;
        let row = g.row(out, 0)?;
        Ok(g.value(row).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_model(rng: &mut ChaCha8Rng) -> (CfModel, ParamStore) {
        let cfg = CFModelConfig {
            encoder_widths: vec![8, 16],
            tenc_hidden: 4,
            tenc_out: 16,
            time_embed_dim: 4,
            decoder_widths: vec![8],
            ..CFModelConfig::default()
        };
        let model = CfModel::new(cfg, 100).unwrap();
        let mut store = ParamStore::new();
        model.register_params(&mut store, rng).unwrap();
        (model, store)
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            })
            .collect()
    }

    #[test]
    fn global_encoding_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (model, store) = toy_model(&mut rng);
        let cloud = random_cloud(&mut rng, 12);
        let f = model.encode_pointcloud_global(&store, &cloud).unwrap();
        let mut permuted = cloud.clone();
        permuted.shuffle(&mut rng);
        let f2 = model.encode_pointcloud_global(&store, &permuted).unwrap();
        assert_eq!(f.data(), f2.data());
    }

    #[test]
    fn duplicating_points_leaves_encoding_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (model, store) = toy_model(&mut rng);
        let cloud = random_cloud(&mut rng, 9);
        let f = model.encode_pointcloud_global(&store, &cloud).unwrap();
        let doubled: Vec<Vec3> = cloud.iter().chain(cloud.iter()).copied().collect();
        let f2 = model.encode_pointcloud_global(&store, &doubled).unwrap();
        assert_eq!(f.data(), f2.data());
    }

    #[test]
    fn distinct_clouds_get_distinct_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (model, store) = toy_model(&mut rng);
        let mut distinct = 0;
        for _ in 0..100 {
            let a = model
                .encode_pointcloud_global(&store, &random_cloud(&mut rng, 10))
                .unwrap();
            let b = model
                .encode_pointcloud_global(&store, &random_cloud(&mut rng, 10))
                .unwrap();
            let gap = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            if gap > 0.0 {
                distinct += 1;
            }
        }
        assert_eq!(distinct, 100);
    }

    #[test]
    fn transform_encoding_deterministic_and_time_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (model, store) = toy_model(&mut rng);
        let g_t = vec![0.3, -0.1, 0.2, 0.9, 0.5, 0.0, -0.4];
        let a = model.encode_transform(&store, &g_t, 0).unwrap();
        let a2 = model.encode_transform(&store, &g_t, 0).unwrap();
        assert_eq!(a.data(), a2.data());
        assert_eq!(a.shape(), &[16]);
        let b = model.encode_transform(&store, &g_t, 100).unwrap();
        let gap = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap > 0.0);
        assert!(matches!(
            model.encode_transform(&store, &g_t, 101),
            Err(ModelError::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn fusion_widths_and_zero_ft() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let (model, _) = toy_model(&mut rng);
        let mut g = Graph::new();
        let f_t = g.constant(Tensor::zeros(&[1, 16]));
        let f_p = g.constant(Tensor::uniform(&mut rng, &[1, 16], -1.0, 1.0));
        let f_q = g.constant(Tensor::uniform(&mut rng, &[1, 16], -1.0, 1.0));
        let fused = model.fuse(&mut g, f_t, f_p, f_q).unwrap();
        assert_eq!(g.value(fused).shape(), &[1, 32]);
        // Zero F_t under the default mode reduces to concat(F_P, F_Q).
        let want: Vec<f64> = g
            .value(f_p)
            .data()
            .iter()
            .chain(g.value(f_q).data())
            .copied()
            .collect();
        assert_eq!(g.value(fused).data(), &want[..]);
    }

    #[test]
    fn forward_is_deterministic_with_expected_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let (model, store) = toy_model(&mut rng);
        let p = random_cloud(&mut rng, 10);
        let q = random_cloud(&mut rng, 10);
        let g_t = vec![0.1; 7];
        let a = model.forward_pair(&store, &p, &q, &g_t, 5).unwrap();
        let b = model.forward_pair(&store, &p, &q, &g_t, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
    }

    #[test]
    fn euler_variant_outputs_six() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let cfg = CFModelConfig {
            encoder_widths: vec![8, 16],
            tenc_hidden: 4,
            tenc_out: 16,
            time_embed_dim: 4,
            decoder_widths: vec![8],
            repr: Repr::Euler6,
            ..CFModelConfig::default()
        };
        let model = CfModel::new(cfg, 10).unwrap();
        let mut store = ParamStore::new();
        model.register_params(&mut store, &mut rng).unwrap();
        let p = random_cloud(&mut rng, 8);
        let q = random_cloud(&mut rng, 8);
        let out = model.forward_pair(&store, &p, &q, &[0.0; 6], 3).unwrap();
        assert_eq!(out.len(), 6);
    }

    #[test]
    fn no_diffusion_variant_ignores_g_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let cfg = CFModelConfig {
            encoder_widths: vec![8, 16],
            tenc_hidden: 4,
            tenc_out: 16,
            time_embed_dim: 4,
            decoder_widths: vec![8],
            diffusion_conditioning: false,
            ..CFModelConfig::default()
        };
        let model = CfModel::new(cfg, 10).unwrap();
        let mut store = ParamStore::new();
        model.register_params(&mut store, &mut rng).unwrap();
        assert!(store.names().all(|n| !n.starts_with("tenc")));
        let p = random_cloud(&mut rng, 8);
        let q = random_cloud(&mut rng, 8);
        let a = model.forward_pair(&store, &p, &q, &[9.0; 7], 1).unwrap();
        let b = model.forward_pair(&store, &p, &q, &[-3.0; 7], 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn counters_track_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let (model, store) = toy_model(&mut rng);
        let p = random_cloud(&mut rng, 10);
        let q = random_cloud(&mut rng, 10);
        model.counters.reset();
        let mut g = Graph::new();
        model
            .forward_batch(
                &mut g,
                &store,
                &[&p, &p],
                &[&q, &q],
                &[vec![0.0; 7], vec![0.1; 7]],
                &[3, 4],
            )
            .unwrap();
        assert_eq!(model.counters.clouds_encoded(), 4);
        assert_eq!(model.counters.decodes(), 2);
    }

    #[test]
    fn config_invariants_enforced() {
        let bad = CFModelConfig { tenc_out: 999, ..CFModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = CFModelConfig { time_embed_dim: 64, ..CFModelConfig::default() };
        assert!(bad.validate().is_err());
    }
}
