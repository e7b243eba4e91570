//! Named parameter tensors with gradients, Adam moments, and the optimizer
//! step.

use super::tensor::Tensor;
use super::NnError;
use rand::Rng;
use std::collections::BTreeMap;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct ParamEntry {
    value: Tensor,
    grad: Option<Tensor>,
    m: Tensor,
    v: Tensor,
}

/// Named parameter store. Iteration order is name-sorted, which keeps
/// checkpoints and optimizer traversals deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<(), NnError> {
        if self.entries.contains_key(name) {
            return Err(NnError::DuplicateParam { name: name.to_string() });
        }
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        self.entries.insert(name.to_string(), ParamEntry { value, grad: None, m, v });
        Ok(())
    }

    /// Registers a dense weight with uniform ±√(6/(fan_in+fan_out)) init.
    pub fn register_dense<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<(), NnError> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Tensor::uniform(rng, &[fan_in, fan_out], -bound, bound);
        self.register(&format!("{name}.w"), w)?;
        self.register(&format!("{name}.b"), Tensor::zeros(&[fan_out]))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| NnError::UnknownParam { name: name.to_string() })
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), NnError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam { name: name.to_string() })?;
        if e.value.shape() != value.shape() {
            return Err(NnError::ShapeMismatch {
                what: format!("set {name}: {:?} vs {:?}", e.value.shape(), value.shape()),
            });
        }
        e.value = value;
        Ok(())
    }

    pub fn perturb(&mut self, name: &str, idx: usize, delta: f64) -> Result<(), NnError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam { name: name.to_string() })?;
        e.value.data_mut()[idx] += delta;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Resets every gradient to zeros, arming the accumulation pass.
    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = Some(Tensor::zeros(e.value.shape()));
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<(), NnError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam { name: name.to_string() })?;
        match &mut e.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
                Ok(())
            }
            None => {
                e.grad = Some(grad.clone());
                Ok(())
            }
        }
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).and_then(|e| e.grad.as_ref())
    }

    /// Scales every gradient, e.g. for batch averaging.
    pub fn scale_grads(&mut self, c: f64) {
        for e in self.entries.values_mut() {
            if let Some(g) = &mut e.grad {
                for v in g.data_mut() {
                    *v *= c;
                }
            }
        }
    }

    /// Standard Adam update with bias correction. Every parameter must have
    /// a populated gradient.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), NnError> {
        for (name, e) in &self.entries {
            if e.grad.is_none() {
                return Err(NnError::MissingGradient { name: name.clone() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for e in self.entries.values_mut() {
            let g = e.grad.take().expect("checked above");
            for i in 0..g.len() {
                let gi = g.data()[i];
                let m = &mut e.m.data_mut()[i];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                let v = &mut e.v.data_mut()[i];
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                e.value.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Name-sorted `(name, tensor)` view of the parameter values.
    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.entries.iter().map(|(n, e)| (n.clone(), e.value.clone())).collect()
    }

    /// Replaces parameter values from `(name, tensor)` pairs; names and
    /// shapes must match the registered set exactly.
    pub fn load_values(&mut self, values: &[(String, Tensor)]) -> Result<(), NnError> {
        if values.len() != self.entries.len() {
            return Err(NnError::ShapeMismatch {
                what: format!("{} tensors for {} params", values.len(), self.entries.len()),
            });
        }
        for (name, t) in values {
            self.set(name, t.clone())?;
        }
        Ok(())
    }

    /// Full optimizer state for exact training resume.
    pub(crate) fn state_tensors(&self) -> Vec<(String, Tensor, Tensor, Tensor)> {
        self.entries
            .iter()
            .map(|(n, e)| (n.clone(), e.value.clone(), e.m.clone(), e.v.clone()))
            .collect()
    }

    pub(crate) fn restore_state(
        &mut self,
        step: u64,
        state: Vec<(String, Tensor, Tensor, Tensor)>,
    ) -> Result<(), NnError> {
        for (name, value, m, v) in state {
            let e = self
                .entries
                .get_mut(&name)
                .ok_or_else(|| NnError::UnknownParam { name: name.clone() })?;
            e.value = value;
            e.m = m;
            e.v = v;
            e.grad = None;
        }
        self.step = step;
        Ok(())
    }
}
