//! Flat `key=value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys, duplicate keys
//! and unparsable values are errors. Defaults pair the reference optimizer
//! settings with a desk-scale data and model shape.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::SynthTask;
use crate::error::{Error, Result};
use crate::mamba::LayerConfig;
use crate::masking::MaskConfig;
use crate::model::{ModelConfig, Task};
use crate::optim::{AdamWConfig, EmaConfig, Schedule};
use crate::tokens::{EgtConfig, PatchConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub warmup: u64,
    pub steps: u64,
    pub batch: usize,
    pub weight_decay: f64,
    pub clip: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // data
    pub frames: usize,
    pub side: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub task: SynthTask,
    pub noise: f64,
    pub amp_max: f64,
    // model
    pub p_t: usize,
    pub p_s: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub m_blocks: usize,
    pub lg: usize,
    pub hg: usize,
    pub wg: usize,
    pub inner_param_set: bool,
    pub expand: usize,
    pub conv_kernel: usize,
    pub n_state: usize,
    pub head_hidden: Vec<usize>,
    // masking
    pub gamma_t: usize,
    pub gamma_s: usize,
    pub p_mask: f64,
    // optimization
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_accum: usize,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    pub ckpt_every: u64,
    pub ema: bool,
    pub ema_beta: f64,
    pub ema_start: u64,
    pub ema_every: u64,
    pub ema_power: f64,
    /// Validation interval in steps; 0 means once per pass over the training split.
    pub eval_every: u64,
    pub patience: u64,
    pub standardize_labels: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 16,
            side: 32,
            n_train: 200,
            n_val: 50,
            task: SynthTask::EfRegress,
            noise: 0.05,
            amp_max: 0.6,
            p_t: 1,
            p_s: 8,
            d_model: 32,
            n_blocks: 2,
            m_blocks: 1,
            lg: 2,
            hg: 2,
            wg: 2,
            inner_param_set: false,
            expand: 2,
            conv_kernel: 4,
            n_state: 16,
            head_hidden: vec![64, 64, 64],
            gamma_t: 2,
            gamma_s: 1,
            p_mask: 0.8,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-15,
            grad_accum: 1,
            pretrain: PhaseConfig { lr: 1e-3, lr_min: 1e-5, warmup: 20, steps: 200, batch: 4, weight_decay: 0.1, clip: 0.1 },
            finetune: PhaseConfig { lr: 1e-4, lr_min: 1e-6, warmup: 50, steps: 300, batch: 4, weight_decay: 0.1, clip: 1.0 },
            ckpt_every: 100,
            ema: true,
            ema_beta: 0.9999,
            ema_start: 100,
            ema_every: 5,
            ema_power: 0.75,
            eval_every: 0,
            patience: 10,
            standardize_labels: true,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

macro_rules! keys {
    ($($name:literal),* $(,)?) => { &[$($name),*] };
}

/// Every accepted key, in file order.
pub const KEYS: &[&str] = keys![
    "seed", "frames", "side", "n_train", "n_val", "task", "noise", "amp_max", "p_t", "p_s", "d_model", "n_blocks", "m_blocks", "lg", "hg", "wg",
    "inner_param_set", "expand", "conv_kernel", "n_state", "head_hidden", "gamma_t", "gamma_s", "p_mask", "beta1", "beta2", "adam_eps",
    "grad_accum", "pt_lr", "pt_lr_min", "pt_warmup", "pt_steps", "pt_batch", "pt_wd", "pt_clip", "ft_lr", "ft_lr_min", "ft_warmup", "ft_steps",
    "ft_batch", "ft_wd", "ft_clip", "ckpt_every", "ema", "ema_beta", "ema_start", "ema_every", "ema_power", "eval_every", "patience",
    "standardize_labels",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "side" => self.side = parse(key, v)?,
            "n_train" => self.n_train = parse(key, v)?,
            "n_val" => self.n_val = parse(key, v)?,
            "task" => self.task = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "amp_max" => self.amp_max = parse(key, v)?,
            "p_t" => self.p_t = parse(key, v)?,
            "p_s" => self.p_s = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "n_blocks" => self.n_blocks = parse(key, v)?,
            "m_blocks" => self.m_blocks = parse(key, v)?,
            "lg" => self.lg = parse(key, v)?,
            "hg" => self.hg = parse(key, v)?,
            "wg" => self.wg = parse(key, v)?,
            "inner_param_set" => self.inner_param_set = parse_bool(key, v)?,
            "expand" => self.expand = parse(key, v)?,
            "conv_kernel" => self.conv_kernel = parse(key, v)?,
            "n_state" => self.n_state = parse(key, v)?,
            "head_hidden" => self.head_hidden = parse_list(key, v)?,
            "gamma_t" => self.gamma_t = parse(key, v)?,
            "gamma_s" => self.gamma_s = parse(key, v)?,
            "p_mask" => self.p_mask = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "grad_accum" => self.grad_accum = parse(key, v)?,
            "pt_lr" => self.pretrain.lr = parse(key, v)?,
            "pt_lr_min" => self.pretrain.lr_min = parse(key, v)?,
            "pt_warmup" => self.pretrain.warmup = parse(key, v)?,
            "pt_steps" => self.pretrain.steps = parse(key, v)?,
            "pt_batch" => self.pretrain.batch = parse(key, v)?,
            "pt_wd" => self.pretrain.weight_decay = parse(key, v)?,
            "pt_clip" => self.pretrain.clip = parse(key, v)?,
            "ft_lr" => self.finetune.lr = parse(key, v)?,
            "ft_lr_min" => self.finetune.lr_min = parse(key, v)?,
            "ft_warmup" => self.finetune.warmup = parse(key, v)?,
            "ft_steps" => self.finetune.steps = parse(key, v)?,
            "ft_batch" => self.finetune.batch = parse(key, v)?,
            "ft_wd" => self.finetune.weight_decay = parse(key, v)?,
            "ft_clip" => self.finetune.clip = parse(key, v)?,
            "ckpt_every" => self.ckpt_every = parse(key, v)?,
            "ema" => self.ema = parse_bool(key, v)?,
            "ema_beta" => self.ema_beta = parse(key, v)?,
            "ema_start" => self.ema_start = parse(key, v)?,
            "ema_every" => self.ema_every = parse(key, v)?,
            "ema_power" => self.ema_power = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "standardize_labels" => self.standardize_labels = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.as_ref().split_once('=').ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key));
        }
        s
    }

    fn get(&self, key: &str) -> String {
        let (pt, ft) = (&self.pretrain, &self.finetune);
        match key {
            "seed" => self.seed.to_string(),
            "frames" => self.frames.to_string(),
            "side" => self.side.to_string(),
            "n_train" => self.n_train.to_string(),
            "n_val" => self.n_val.to_string(),
            "task" => self.task.name().to_string(),
            "noise" => self.noise.to_string(),
            "amp_max" => self.amp_max.to_string(),
            "p_t" => self.p_t.to_string(),
            "p_s" => self.p_s.to_string(),
            "d_model" => self.d_model.to_string(),
            "n_blocks" => self.n_blocks.to_string(),
            "m_blocks" => self.m_blocks.to_string(),
            "lg" => self.lg.to_string(),
            "hg" => self.hg.to_string(),
            "wg" => self.wg.to_string(),
            "inner_param_set" => self.inner_param_set.to_string(),
            "expand" => self.expand.to_string(),
            "conv_kernel" => self.conv_kernel.to_string(),
            "n_state" => self.n_state.to_string(),
            "head_hidden" => join(&self.head_hidden),
            "gamma_t" => self.gamma_t.to_string(),
            "gamma_s" => self.gamma_s.to_string(),
            "p_mask" => self.p_mask.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "grad_accum" => self.grad_accum.to_string(),
            "pt_lr" => pt.lr.to_string(),
            "pt_lr_min" => pt.lr_min.to_string(),
            "pt_warmup" => pt.warmup.to_string(),
            "pt_steps" => pt.steps.to_string(),
            "pt_batch" => pt.batch.to_string(),
            "pt_wd" => pt.weight_decay.to_string(),
            "pt_clip" => pt.clip.to_string(),
            "ft_lr" => ft.lr.to_string(),
            "ft_lr_min" => ft.lr_min.to_string(),
            "ft_warmup" => ft.warmup.to_string(),
            "ft_steps" => ft.steps.to_string(),
            "ft_batch" => ft.batch.to_string(),
            "ft_wd" => ft.weight_decay.to_string(),
            "ft_clip" => ft.clip.to_string(),
            "ckpt_every" => self.ckpt_every.to_string(),
            "ema" => self.ema.to_string(),
            "ema_beta" => self.ema_beta.to_string(),
            "ema_start" => self.ema_start.to_string(),
            "ema_every" => self.ema_every.to_string(),
            "ema_power" => self.ema_power.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "patience" => self.patience.to_string(),
            "standardize_labels" => self.standardize_labels.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            patch: PatchConfig { channels: 1, frames: self.frames, height: self.side, width: self.side, p_t: self.p_t, p_s: self.p_s, d_model: self.d_model },
            egt: EgtConfig { lg: self.lg, hg: self.hg, wg: self.wg, inner_param_set: self.inner_param_set },
            layer: LayerConfig { d_model: self.d_model, expand: self.expand, conv_kernel: self.conv_kernel, n_state: self.n_state },
            n_blocks: self.n_blocks,
            m_blocks: self.m_blocks,
            head_hidden: self.head_hidden.clone(),
            mask: self.mask_config(),
            task: self.model_task(),
        }
    }

    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig { gamma_t: self.gamma_t, gamma_s: self.gamma_s, p_mask: self.p_mask }
    }

    pub fn model_task(&self) -> Task {
        match self.task {
            SynthTask::EfRegress => Task::Regress,
            SynthTask::MotionClassify => Task::Classify,
        }
    }

    pub fn adamw(&self, phase: &PhaseConfig) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps, weight_decay: phase.weight_decay, clip: phase.clip }
    }

    pub fn schedule(&self, phase: &PhaseConfig) -> Schedule {
        Schedule { lr_base: phase.lr, lr_min: phase.lr_min, warmup: phase.warmup, total: phase.steps }
    }

    pub fn ema_config(&self) -> Option<EmaConfig> {
        self.ema.then_some(EmaConfig { beta: self.ema_beta, start_step: self.ema_start, every: self.ema_every, power: self.ema_power })
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        for (name, p) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            self.schedule(p).validate().map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{name}: {m}")),
                e => e,
            })?;
            if p.batch == 0 || p.clip <= 0.0 || p.weight_decay < 0.0 {
                return Err(Error::Config(format!("{name}: batch, clip and weight decay must be positive")));
            }
        }
        if self.grad_accum == 0 || self.ema_every == 0 || self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("grad_accum, ema_every, n_train and n_val must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.beta1) || !(0.0..=1.0).contains(&self.beta2) || !(0.0..1.0).contains(&self.ema_beta) {
            return Err(Error::Config("betas must lie in [0, 1]".into()));
        }
        if !(0.0..=0.6).contains(&self.amp_max) || self.noise < 0.0 {
            return Err(Error::Config("amp_max must lie in [0, 0.6] and noise must be non-negative".into()));
        }
        Ok(())
    }
}
