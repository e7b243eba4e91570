//! Variance schedule, closed-form forward corruption of transform vectors,
//! posterior mean, the DDPM reverse step, and the multi-step sampling loop.

use crate::geom3d::TransformVec7;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("bad step count: {what}")]
    BadStepCount { what: String },
    #[error("timestep {t} out of range [{lo}, {hi}]")]
    StepOutOfRange { t: usize, lo: usize, hi: usize },
    #[error("bad step order: t_now {t_now} must exceed t_next {t_next}")]
    BadStepOrder { t_now: usize, t_next: usize },
}

/// Cosine variance schedule over `T` steps.
///
/// Stored per timestep `t ∈ [1, T]`: `betas[t-1]`, `alphas[t-1]`,
/// `posterior_vars[t-1]`; `alpha_bars[t]` additionally carries the `t = 0`
/// boundary value `alpha_bars[0] = 1`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: `ᾱ_t = f(t)/f(0)` with
    /// `f(t) = cos²(((t/T + s)/(1 + s)) · π/2)`, `s = 0.008`, and
    /// `β_t = 1 − ᾱ_t/ᾱ_{t−1}` clipped to at most 0.999. The cumulative
    /// products are rebuilt from the clipped betas so the schedule
    /// invariants hold exactly.
    pub fn cosine(t_max: usize) -> Result<Self, DiffusionError> {
        if t_max < 1 {
            return Err(DiffusionError::BadStepCount { what: "T must be >= 1".into() });
        }
        let s = 0.008;
        let f = |t: f64| {
            let x = ((t / t_max as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut betas = Vec::with_capacity(t_max);
        let mut prev = 1.0;
        for t in 1..=t_max {
            let bar = f(t as f64) / f0;
            let beta = (1.0 - bar / prev).min(0.999);
            betas.push(beta);
            prev = bar;
        }
        Self::from_betas(betas)
    }

    fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        let t_max = betas.len();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_max + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_vars: Vec<f64> = (1..=t_max)
            .map(|t| (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t - 1])
            .collect();
        Ok(NoiseSchedule { t_max, betas, alphas, alpha_bars, posterior_vars })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t < 1 || t > self.t_max {
            return Err(DiffusionError::StepOutOfRange { t, lo: 1, hi: self.t_max });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, defined for `t ∈ [0, T]` with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Posterior variance `β̃_t = (1 − ᾱ_{t−1})/(1 − ᾱ_t) · β_t`.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }
}

/// One corrupted training example: `g_t` produced from `g_0` with noise
/// `eps` at timestep `t`.
#[derive(Debug, Clone)]
pub struct DiffusionSample {
    pub t: usize,
    pub g_t: TransformVec7,
    pub eps: TransformVec7,
}

pub(crate) fn forward_sample_slice(
    sched: &NoiseSchedule,
    g0: &[f64],
    t: usize,
    eps: &[f64],
) -> Result<Vec<f64>, DiffusionError> {
    sched.check_t(t)?;
    let a = sched.alpha_bar(t).sqrt();
    let b = (1.0 - sched.alpha_bar(t)).sqrt();
    Ok(g0.iter().zip(eps).map(|(g, e)| a * g + b * e).collect())
}

/// Closed-form forward corruption: `√ᾱ_t · g0 + √(1 − ᾱ_t) · eps`.
pub fn forward_sample(
    sched: &NoiseSchedule,
    g0: &TransformVec7,
    t: usize,
    eps: &TransformVec7,
) -> Result<TransformVec7, DiffusionError> {
    let v = forward_sample_slice(sched, &g0.0, t, &eps.0)?;
    Ok(TransformVec7(v.try_into().expect("length preserved")))
}

pub(crate) fn posterior_mean_slice(
    sched: &NoiseSchedule,
    g_t: &[f64],
    g0_hat: &[f64],
    t: usize,
) -> Result<Vec<f64>, DiffusionError> {
    sched.check_t(t)?;
    let denom = 1.0 - sched.alpha_bar(t);
    let coef0 = sched.alpha_bar(t - 1).sqrt() * sched.beta(t) / denom;
    let coef1 = sched.alpha(t).sqrt() * (1.0 - sched.alpha_bar(t - 1)) / denom;
    Ok(g0_hat.iter().zip(g_t).map(|(g0, gt)| coef0 * g0 + coef1 * gt).collect())
}

/// Mean of the forward-process posterior `q(G_{t−1} | G_t, G_0)` with the
/// prediction substituted for `G_0`.
pub fn posterior_mean(
    sched: &NoiseSchedule,
    g_t: &TransformVec7,
    g0_hat: &TransformVec7,
    t: usize,
) -> Result<TransformVec7, DiffusionError> {
    let v = posterior_mean_slice(sched, &g_t.0, &g0_hat.0, t)?;
    Ok(TransformVec7(v.try_into().expect("length preserved")))
}

pub(crate) fn ddpm_step_slice(
    sched: &NoiseSchedule,
    g_t: &[f64],
    g0_hat: &[f64],
    t_now: usize,
    t_next: usize,
    z: &[f64],
) -> Result<Vec<f64>, DiffusionError> {
    if t_next >= t_now {
        return Err(DiffusionError::BadStepOrder { t_now, t_next });
    }
    let mut out = posterior_mean_slice(sched, g_t, g0_hat, t_now)?;
    let sigma = sched.posterior_var(t_now).sqrt();
    for (o, zi) in out.iter_mut().zip(z) {
        *o += sigma * zi;
    }
    Ok(out)
}

/// One reverse step: posterior mean at `t_now` plus `√β̃_{t_now} · z`.
///
/// Callers pass `z = 0` for the deterministic final step (`t_next = 0`).
pub fn ddpm_step(
    sched: &NoiseSchedule,
    g_t: &TransformVec7,
    g0_hat: &TransformVec7,
    t_now: usize,
    t_next: usize,
    z: &TransformVec7,
) -> Result<TransformVec7, DiffusionError> {
    let v = ddpm_step_slice(sched, &g_t.0, &g0_hat.0, t_now, t_next, &z.0)?;
    Ok(TransformVec7(v.try_into().expect("length preserved")))
}

/// Evenly spaced descending sampling schedule from `T` down to 0, as
/// `(t_now, t_next)` pairs of length `steps`.
pub fn timestep_pairs(t_max: usize, steps: usize) -> Result<Vec<(usize, usize)>, DiffusionError> {
    if steps < 1 || steps > t_max {
        return Err(DiffusionError::BadStepCount {
            what: format!("steps {steps} must be in [1, {t_max}]"),
        });
    }
    let times: Vec<usize> = (0..=steps)
        .map(|i| ((t_max as f64) * ((steps - i) as f64) / steps as f64).round() as usize)
        .collect();
    Ok(times.windows(2).map(|w| (w[0], w[1])).collect())
}

pub(crate) fn sample_standard_normal<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub(crate) fn sample_loop_slice<R, F>(
    mut denoiser: F,
    sched: &NoiseSchedule,
    steps: usize,
    dim: usize,
    rng: &mut R,
) -> Result<Vec<f64>, DiffusionError>
where
    R: Rng,
    F: FnMut(&[f64], usize) -> Vec<f64>,
{
    let pairs = timestep_pairs(sched.t_max(), steps)?;
    let mut g_t = sample_standard_normal(rng, dim);
    let mut g0_hat = vec![0.0; dim];
    for (t_now, t_next) in pairs {
        g0_hat = denoiser(&g_t, t_now);
        let z = if t_next > 0 { sample_standard_normal(rng, dim) } else { vec![0.0; dim] };
        g_t = ddpm_step_slice(sched, &g_t, &g0_hat, t_now, t_next, &z)?;
    }
    Ok(g0_hat)
}

/// Full sampling loop: draw `G_T ~ N(0, I)`, iterate [`ddpm_step`] over
/// [`timestep_pairs`], and return the final clean-state prediction (not the
/// final chain state).
pub fn sample_loop<R, F>(
    mut denoiser: F,
    sched: &NoiseSchedule,
    steps: usize,
    rng: &mut R,
) -> Result<TransformVec7, DiffusionError>
where
    R: Rng,
    F: FnMut(&TransformVec7, usize) -> TransformVec7,
{
    let wrapped = |g: &[f64], t: usize| {
        let g7 = TransformVec7(g.try_into().expect("7-dim state"));
        denoiser(&g7, t).0.to_vec()
    };
    let v = sample_loop_slice(wrapped, sched, steps, 7, rng)?;
    Ok(TransformVec7(v.try_into().expect("length preserved")))
}
