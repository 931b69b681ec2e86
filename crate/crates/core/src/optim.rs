//! AdamW with global-norm clipping, the warmup-cosine schedule, and parameter EMA.

use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::params::Module;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr_base: f64,
    pub lr_min: f64,
    pub warmup: u64,
    pub total: u64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup < self.total || self.total == 0 && self.warmup == 0) {
            return Err(Error::Config(format!("warmup {} must be below total steps {}", self.warmup, self.total)));
        }
        if !(0.0 <= self.lr_min && self.lr_min <= self.lr_base) {
            return Err(Error::Config(format!("need 0 <= lr_min {} <= lr_base {}", self.lr_min, self.lr_base)));
        }
        Ok(())
    }

    /// Learning rate used by the optimizer update numbered `step` (1-based;
    /// `step == 0` is the pre-training origin).
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.lr_base * step as f64 / self.warmup as f64;
        }
        let span = (self.total - self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        self.lr_min + (self.lr_base - self.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Maximum global gradient norm.
    pub clip: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
    pub skipped: bool,
}

pub fn global_norm<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads.values().flat_map(|g| g.data()).map(|&v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = T::of(v.as_f64() * s));
        }
    }
    norm
}

/// Adam moments per parameter name. Moments are kept in f64 regardless of
/// the parameter precision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    /// One update at learning rate `lr`. Only parameters present in `grads`
    /// move. Non-finite gradients leave everything untouched.
    pub fn step<T: Scalar, G: Scalar, M: Module<T>>(&mut self, module: &mut M, mut grads: BTreeMap<String, Tensor<G>>, lr: f64, cfg: &AdamWConfig) -> StepInfo {
        let norm = global_norm(&grads);
        if !norm.is_finite() {
            return StepInfo { grad_norm: norm, clipped: false, skipped: true };
        }
        let clipped = norm > cfg.clip;
        clip_global_norm(&mut grads, cfg.clip);
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * cfg.weight_decay;
        module.visit_mut(&mut |p| {
            let Some(g) = grads.get(&p.name) else { return };
            let n = g.numel();
            let m = self.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let upd = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                *w = T::of(w.as_f64() * decay - lr * upd);
            }
        });
        StepInfo { grad_norm: norm, clipped, skipped: false }
    }

    pub fn save(&self, ck: &mut Checkpoint) {
        ck.put_u64s("adam.t", &[self.t]);
        for (k, m) in &self.m {
            ck.put_tensor(&format!("adam.m.{k}"), &Tensor::new(vec![m.len()], m.clone()).expect("1-d"));
        }
        for (k, v) in &self.v {
            ck.put_tensor(&format!("adam.v.{k}"), &Tensor::new(vec![v.len()], v.clone()).expect("1-d"));
        }
    }

    pub fn load(ck: &Checkpoint) -> Result<Self> {
        let flat = |prefix| -> Result<BTreeMap<String, Vec<f64>>> { Ok(ck.tensors_with_prefix::<f64>(prefix)?.into_iter().map(|(k, t)| (k, t.into_data())).collect()) };
        Ok(Self { t: ck.u64("adam.t")?, m: flat("adam.m.")?, v: flat("adam.v.")? })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaConfig {
    pub beta: f64,
    pub start_step: u64,
    pub every: u64,
    pub power: f64,
}

impl EmaConfig {
    pub fn active(&self, step: u64) -> bool {
        step >= self.start_step && step % self.every == 0
    }

    /// Decay applied by the update that follows `updates` earlier ones.
    pub fn effective_beta(&self, updates: u64) -> f64 {
        self.beta.min(1.0 - (1.0 / (updates as f64 + 1.0)).powf(self.power))
    }
}

/// Shadow copy of the parameters, kept at f64.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ema {
    pub updates: u64,
    pub shadow: BTreeMap<String, Tensor<f64>>,
}

impl Ema {
    /// Folds the current parameters in if `step` is an EMA step. Returns
    /// whether an update happened.
    pub fn maybe_update<T: Scalar, M: Module<T>>(&mut self, module: &M, step: u64, cfg: &EmaConfig) -> bool {
        if !cfg.active(step) {
            return false;
        }
        let beta = cfg.effective_beta(self.updates);
        module.visit(&mut |p| {
            let s = self.shadow.entry(p.name.clone()).or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            for (s, &w) in s.data_mut().iter_mut().zip(p.value.data()) {
                *s = beta * *s + (1.0 - beta) * w.as_f64();
            }
        });
        self.updates += 1;
        true
    }

    pub fn is_empty(&self) -> bool {
        self.updates == 0
    }

    /// The shadow at parameter precision.
    pub fn values<T: Scalar>(&self) -> BTreeMap<String, Tensor<T>> {
        self.shadow.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
    }

    pub fn save(&self, ck: &mut Checkpoint) {
        ck.put_u64s("ema.updates", &[self.updates]);
        for (k, v) in &self.shadow {
            ck.put_tensor(&format!("ema.shadow.{k}"), v);
        }
    }

    pub fn load(ck: &Checkpoint) -> Result<Self> {
        Ok(Self { updates: ck.u64("ema.updates")?, shadow: ck.tensors_with_prefix("ema.shadow.")? })
    }
}

#[cfg(test)]
mod tests;
