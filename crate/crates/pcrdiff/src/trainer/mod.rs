//! Single-pass training: corrupt the ground-truth transform, run the
//! denoiser once, combine the three losses, backprop, Adam step. Includes
//! the epoch loop, loss log, plateau decay, checkpointing, and exact
//! resume.

mod losses;
mod state;

pub use losses::{
    loss_chamfer, loss_chamfer_forced, loss_diff, loss_transform, pair_loss_graph, PairLossVars,
};
pub use state::{load_train_state, save_train_state, TrainState};

use crate::datasyn::RegPair;
use crate::diffusion::{forward_sample_slice, sample_standard_normal, DiffusionError, NoiseSchedule};
use crate::geom3d::GeomError;
use crate::nnkit::{
    accumulate_param_grads, save_checkpoint, AdamConfig, CheckpointError, Graph, NnError,
    ParamStore,
};
use crate::regnet::{target_vec, CbModel, CfModel, Denoiser, ModelError, Repr};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(
        "non-finite loss at step {step}: diff={diff} cf1={cf1} cf2={cf2} (lr={lr}, t={t})"
    )]
    NonFiniteLoss { step: usize, diff: f64, cf1: f64, cf2: f64, lr: f64, t: usize },
    #[error("train state error: {0}")]
    State(String),
}

/// Either decoder variant behind one training/evaluation surface.
pub enum RegModel {
    Cf(CfModel),
    Cb(CbModel),
}

pub enum RegCond {
    Cf(crate::regnet::CfCond),
    Cb(crate::regnet::CbCond),
}

impl RegModel {
    pub fn repr(&self) -> Repr {
        match self {
            RegModel::Cf(m) => m.repr(),
            RegModel::Cb(m) => Denoiser::repr(m),
        }
    }

    pub fn register_params<R: Rng>(
        &self,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<(), ModelError> {
        match self {
            RegModel::Cf(m) => m.register_params(store, rng),
            RegModel::Cb(m) => m.register_params(store, rng),
        }
    }

    pub fn counters(&self) -> &crate::regnet::CallCounters {
        match self {
            RegModel::Cf(m) => &m.counters,
            RegModel::Cb(m) => &m.counters,
        }
    }
}

impl Denoiser for RegModel {
    type Cond = RegCond;

    fn repr(&self) -> Repr {
        self.repr()
    }

    fn prepare(
        &self,
        store: &ParamStore,
        p: &[crate::geom3d::Vec3],
        q: &[crate::geom3d::Vec3],
    ) -> Result<RegCond, ModelError> {
        Ok(match self {
            RegModel::Cf(m) => RegCond::Cf(m.prepare(store, p, q)?),
            RegModel::Cb(m) => RegCond::Cb(m.prepare(store, p, q)?),
        })
    }

    fn denoise(
        &self,
        store: &ParamStore,
        cond: &RegCond,
        g_t: &[f64],
        t: usize,
    ) -> Result<Vec<f64>, ModelError> {
        match (self, cond) {
            (RegModel::Cf(m), RegCond::Cf(c)) => m.denoise(store, c, g_t, t),
            (RegModel::Cb(m), RegCond::Cb(c)) => m.denoise(store, c, g_t, t),
            _ => Err(ModelError::Config("conditioning/model variant mismatch".into())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Plateau schedule: multiply the rate by `lr_decay_factor` after
    /// `lr_patience` evaluations without improvement, never below `lr_min`.
    pub lr_decay_factor: f64,
    pub lr_patience: usize,
    pub lr_min: f64,
    pub lambda_diff: f64,
    pub lambda_cf1: f64,
    pub lambda_cf2: f64,
    pub t_max: usize,
    pub seed: u64,
    /// Optional hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Write a checkpoint every this many epochs (0 = best/final only).
    pub checkpoint_every_epochs: usize,
    /// Run the plateau/best-checkpoint evaluation every this many epochs.
    pub val_every_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            adam: AdamConfig::default(),
            lr_decay_factor: 0.5,
            lr_patience: 10,
            lr_min: 1e-6,
            lambda_diff: 1.0,
            lambda_cf1: 1.0,
            lambda_cf2: 1.0,
            t_max: 1000,
            seed: 0,
            max_steps: None,
            checkpoint_every_epochs: 0,
            val_every_epochs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub total: f64,
    pub diff: f64,
    pub cf1: f64,
    pub cf2: f64,
}

/// One optimizer step over a batch: per-pair timestep and noise draw,
/// closed-form corruption, a single prediction pass per pair, loss graph,
/// backprop, Adam.
pub fn train_step(
    model: &RegModel,
    store: &mut ParamStore,
    batch: &[&RegPair],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    lr: f64,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let repr = model.repr();
    let dim = repr.dim();
    let b = batch.len();

    let mut targets = Vec::with_capacity(b);
    let mut g_ts = Vec::with_capacity(b);
    let mut ts = Vec::with_capacity(b);
    for pair in batch {
        let target = target_vec(&pair.g_gt, repr)?;
        let t = rng.gen_range(1..=sched.t_max());
        let eps = sample_standard_normal(rng, dim);
        let g_t = forward_sample_slice(sched, &target, t, &eps)?;
        targets.push(target);
        g_ts.push(g_t);
        ts.push(t);
    }

    let mut g = Graph::new();
    let weights = (cfg.lambda_diff, cfg.lambda_cf1, cfg.lambda_cf2);
    let mut totals = Vec::with_capacity(b);
    let (mut sum_diff, mut sum_cf1, mut sum_cf2) = (0.0, 0.0, 0.0);
    match model {
        RegModel::Cf(m) => {
            let sources: Vec<&[crate::geom3d::Vec3]> =
                batch.iter().map(|p| p.p.as_slice()).collect();
            let templates: Vec<&[crate::geom3d::Vec3]> =
                batch.iter().map(|p| p.q.as_slice()).collect();
            let preds = m.forward_batch(&mut g, store, &sources, &templates, &g_ts, &ts)?;
            for (i, pair) in batch.iter().enumerate() {
                let pred = g.row(preds, i)?;
                let vars = pair_loss_graph(&mut g, pred, pair, &targets[i], repr, weights)?;
                sum_diff += g.value(vars.diff).item();
                sum_cf1 += g.value(vars.cf1).item();
                sum_cf2 += g.value(vars.cf2).item();
                totals.push(vars.total);
            }
        }
        RegModel::Cb(m) => {
            for (i, pair) in batch.iter().enumerate() {
                let pred =
                    m.forward_pair_graph(&mut g, store, &pair.p, &pair.q, &g_ts[i], ts[i])?;
                let vars = pair_loss_graph(&mut g, pred, pair, &targets[i], repr, weights)?;
                sum_diff += g.value(vars.diff).item();
                sum_cf1 += g.value(vars.cf1).item();
                sum_cf2 += g.value(vars.cf2).item();
                totals.push(vars.total);
            }
        }
    }
    let stacked = g.stack(&totals)?;
    let total_sum = g.sum(stacked);
    let batch_loss = g.scale(total_sum, 1.0 / b as f64);

    let losses = StepLosses {
        total: g.value(batch_loss).item(),
        diff: sum_diff / b as f64,
        cf1: sum_cf1 / b as f64,
        cf2: sum_cf2 / b as f64,
    };
    if !losses.total.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step,
            diff: losses.diff,
            cf1: losses.cf1,
            cf2: losses.cf2,
            lr,
            t: ts[0],
        });
    }

    let grads = g.backward(batch_loss);
    store.zero_grads();
    accumulate_param_grads(&g, &grads, store)?;
    store.adam_step(&AdamConfig { lr, ..cfg.adam })?;
    Ok(losses)
}

/// Deterministic validation loss: fixed noise seed so successive
/// evaluations are comparable.
pub fn validation_loss(
    model: &RegModel,
    store: &ParamStore,
    val: &[RegPair],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let repr = model.repr();
    let dim = repr.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5641_4c53_4545_4421);
    let weights = (cfg.lambda_diff, cfg.lambda_cf1, cfg.lambda_cf2);
    let mut sum = 0.0;
    for pair in val {
        let target = target_vec(&pair.g_gt, repr)?;
        let t = rng.gen_range(1..=sched.t_max());
        let eps = sample_standard_normal(&mut rng, dim);
        let g_t = forward_sample_slice(sched, &target, t, &eps)?;
        let mut g = Graph::new();
        let pred = match model {
            RegModel::Cf(m) => {
                let preds =
                    m.forward_batch(&mut g, store, &[&pair.p], &[&pair.q], &[g_t], &[t])?;
                g.row(preds, 0)?
            }
            RegModel::Cb(m) => m.forward_pair_graph(&mut g, store, &pair.p, &pair.q, &g_t, t)?,
        };
        let vars = pair_loss_graph(&mut g, pred, pair, &target, repr, weights)?;
        sum += g.value(vars.total).item();
    }
    Ok(sum / val.len().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: usize,
    pub final_train_loss: f64,
    pub best_val_loss: f64,
    /// CSV rows `step,epoch,loss_total,loss_diff,loss_cf1,loss_cf2,lr`.
    pub loss_log: String,
}

/// Epoch loop with seeded shuffling, per-epoch derived rng streams (so a
/// resumed run replays the identical trajectory), plateau decay on the
/// validation loss, best/final checkpoints, and a CSV loss log.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    model: &RegModel,
    store: &mut ParamStore,
    train: &[RegPair],
    val: Option<&[RegPair]>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume_from: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut log = String::from("step,epoch,loss_total,loss_diff,loss_cf1,loss_cf2,lr\n");
    let mut state = TrainState::fresh(cfg.adam.lr);
    if let Some(path) = resume_from {
        state = load_train_state(path, store)?;
    }
    let mut steps_done = state.global_step;
    let mut last_loss = f64::NAN;

    let start_epoch = state.next_epoch;
    for epoch in start_epoch..cfg.epochs {
        if cfg.max_steps.is_some_and(|m| steps_done >= m) {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps_done >= m) {
                break;
            }
            let batch: Vec<&RegPair> = chunk.iter().map(|&i| &train[i]).collect();
            let losses =
                train_step(model, store, &batch, sched, cfg, state.lr, steps_done, &mut rng)?;
            steps_done += 1;
            last_loss = losses.total;
            log.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                steps_done, epoch, losses.total, losses.diff, losses.cf1, losses.cf2, state.lr
            ));
        }

        // Periodic evaluation drives the plateau schedule and the
        // best-checkpoint choice.
        if (epoch + 1) % cfg.val_every_epochs.max(1) == 0 {
            let eval_loss = match val {
                Some(v) if !v.is_empty() => validation_loss(model, store, v, sched, cfg)?,
                _ => last_loss,
            };
            if eval_loss < state.best_eval {
                state.best_eval = eval_loss;
                state.evals_since_best = 0;
                if let Some(dir) = out_dir {
                    save_checkpoint(&dir.join("model_best.ckpt"), &store.named_values())?;
                }
            } else {
                state.evals_since_best += 1;
                if state.evals_since_best >= cfg.lr_patience {
                    state.lr = (state.lr * cfg.lr_decay_factor).max(cfg.lr_min);
                    state.evals_since_best = 0;
                }
            }
        }

        state.next_epoch = epoch + 1;
        state.global_step = steps_done;
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every_epochs > 0 && (epoch + 1) % cfg.checkpoint_every_epochs == 0 {
                save_checkpoint(
                    &dir.join(format!("model_epoch{:04}.ckpt", epoch + 1)),
                    &store.named_values(),
                )?;
            }
        }
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("model_final.ckpt"), &store.named_values())?;
        if !dir.join("model_best.ckpt").exists() {
            save_checkpoint(&dir.join("model_best.ckpt"), &store.named_values())?;
        }
        std::fs::write(dir.join("loss_log.csv"), &log)?;
        save_train_state(&dir.join("train_state.bin"), store, &state)?;
    }
    Ok(TrainReport {
        steps: steps_done,
        final_train_loss: last_loss,
        best_val_loss: state.best_eval,
        loss_log: log,
    })
}

/// Model variant plus hyperparameters stored as a sidecar next to each
/// checkpoint so inference can rebuild the network.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSidecar {
    pub variant: String,
    pub t_max: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cf: Option<crate::regnet::CFModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cb: Option<crate::regnet::CBModelConfig>,
}

impl ModelSidecar {
    pub fn for_model(model: &RegModel) -> ModelSidecar {
        match model {
            RegModel::Cf(m) => ModelSidecar {
                variant: "cf".into(),
                t_max: m.t_max(),
                cf: Some(m.config().clone()),
                cb: None,
            },
            RegModel::Cb(m) => ModelSidecar {
                variant: "cb".into(),
                t_max: m.t_max(),
                cf: None,
                cb: Some(m.config().clone()),
            },
        }
    }

    pub fn build(&self) -> Result<RegModel, ModelError> {
        match self.variant.as_str() {
            "cf" => {
                let cfg = self
                    .cf
                    .clone()
                    .ok_or_else(|| ModelError::Config("missing cf config".into()))?;
                Ok(RegModel::Cf(CfModel::new(cfg, self.t_max)?))
            }
            "cb" => {
                let cfg = self
                    .cb
                    .clone()
                    .ok_or_else(|| ModelError::Config("missing cb config".into()))?;
                Ok(RegModel::Cb(CbModel::new(cfg, self.t_max)?))
            }
            other => Err(ModelError::Config(format!("unknown variant {other}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let text = toml::to_string_pretty(self).map_err(|e| TrainError::State(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelSidecar, TrainError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| TrainError::State(e.to_string()))
    }
}

#[cfg(test)]
mod tests;
