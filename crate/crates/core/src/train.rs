//! Pre-training and fine-tuning loops, evaluation, and run checkpoints.
//!
//! Every random choice is drawn from a stream addressed by `(seed, step,
//! sample)`, and per-sample gradients are summed in batch order, so a run is
//! a pure function of its configuration regardless of thread count. Resuming
//! from a state checkpoint therefore continues bit-identically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{PhaseConfig, RunConfig};
use crate::data::{Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::masking::stc_mask;
use crate::metrics::{self, Classification, MetricsLog, Regression};
use crate::model::{class_weights, task_loss, Model, Task};
use crate::optim::{AdamW, Ema};
use crate::params::Module;
use crate::rng::{ids, stream};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const PRETRAIN_CSV: &str = "pretrain_metrics.csv";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const FINETUNE_CSV: &str = "finetune_metrics.csv";
pub const FINETUNE_CKPT: &str = "finetune.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";

/// Consecutive non-finite steps tolerated before a run is abandoned.
const MAX_SKIPS: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    fn id(self) -> u64 {
        match self {
            Phase::Pretrain => 0,
            Phase::Finetune => 1,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from the phase's state checkpoint in the output directory.
    pub resume: bool,
    /// Fine-tune only: parameters to start from (usually a pre-training checkpoint).
    pub init: Option<PathBuf>,
    /// Save state and return after this many total steps.
    pub halt_after: Option<u64>,
    pub verbose: bool,
}

pub fn synth_spec(cfg: &RunConfig, val: bool) -> SynthSpec {
    SynthSpec {
        n: if val { cfg.n_val } else { cfg.n_train },
        frames: cfg.frames,
        side: cfg.side,
        task: cfg.task,
        seed: cfg.seed,
        noise: cfg.noise,
        amp_max: cfg.amp_max,
        first_index: if val { cfg.n_train } else { 0 },
    }
}

/// Deterministic train and validation splits for `cfg`.
pub fn synth_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    Ok((synth_spec(cfg, false).generate()?, synth_spec(cfg, true).generate()?))
}

pub fn check_dataset(cfg: &RunConfig, d: &Dataset) -> Result<()> {
    if (d.frames, d.side) != (cfg.frames, cfg.side) {
        return Err(Error::Data(format!("dataset is {}x{}x{}, config wants {}x{}x{}", d.frames, d.side, d.side, cfg.frames, cfg.side, cfg.side)));
    }
    if d.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    Ok(())
}

/// Affine map between raw labels and the regression target the head learns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelStats {
    pub mean: f64,
    pub std: f64,
}

impl LabelStats {
    pub const IDENTITY: Self = Self { mean: 0.0, std: 1.0 };

    pub fn fit(cfg: &RunConfig, labels: &[f64]) -> Self {
        if cfg.model_task() != Task::Regress || !cfg.standardize_labels || labels.is_empty() {
            return Self::IDENTITY;
        }
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let std = (labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n).sqrt();
        Self { mean, std: if std > 0.0 { std } else { 1.0 } }
    }

    fn target(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    fn label(&self, out: f64) -> f64 {
        self.mean + self.std * out
    }

    fn save(&self, ck: &mut Checkpoint) {
        ck.put_tensor("data.label_stats", &Tensor::<f64>::new(vec![2], vec![self.mean, self.std]).expect("2 values"));
    }

    pub fn load(ck: &Checkpoint) -> Result<Self> {
        let t = ck.tensor::<f64>("data.label_stats")?;
        Ok(Self { mean: t.data()[0], std: t.data()[1] })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalMetrics {
    Regression(Regression),
    Classification(Classification),
}

impl EvalMetrics {
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        match self {
            EvalMetrics::Regression(r) => r.rows().to_vec(),
            EvalMetrics::Classification(c) => c.rows().to_vec(),
        }
    }

    /// Early-stopping metric: MAE for regression, AUC for classification.
    pub fn primary(&self) -> (&'static str, f64) {
        match self {
            EvalMetrics::Regression(r) => ("mae", r.mae),
            EvalMetrics::Classification(c) => ("auc", c.auc),
        }
    }

    fn improves_on(&self, best: f64) -> bool {
        let v = self.primary().1;
        match self {
            EvalMetrics::Regression(_) => v < best,
            EvalMetrics::Classification(_) => v > best || (best.is_nan() && !v.is_nan()),
        }
    }
}

/// Raw head outputs for every sample.
pub fn predictions<T: Scalar>(model: &Model<T>, d: &Dataset) -> Result<Vec<f64>> {
    (0..d.len()).into_par_iter().map(|i| model.predict(&d.video::<T>(i))).collect()
}

pub fn evaluate<T: Scalar>(model: &Model<T>, d: &Dataset, stats: LabelStats) -> Result<EvalMetrics> {
    let raw = predictions(model, d)?;
    let labels = d.labels_f64();
    Ok(match model.config.task {
        Task::Regress => EvalMetrics::Regression(metrics::regression(&raw.iter().map(|&o| stats.label(o)).collect::<Vec<_>>(), &labels)?),
        Task::Classify => {
            let probs: Vec<f64> = raw.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
            EvalMetrics::Classification(metrics::classification(&probs, &labels)?)
        }
    })
}

/// Builds the model for `cfg` and loads `param.*` records from `path`.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<(Model<f32>, Checkpoint)> {
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let ck = Checkpoint::load(path, Some(cfg.model_config().architecture_hash()))?;
    model.load_values(&ck.tensors_with_prefix("param.")?)?;
    Ok((model, ck))
}

fn put_params<T: Scalar>(ck: &mut Checkpoint, values: &BTreeMap<String, Tensor<T>>) {
    for (k, v) in values {
        ck.put_tensor(&format!("param.{k}"), v);
    }
}

fn batch_indices(cfg: &RunConfig, phase: Phase, step: u64, n: usize, count: usize) -> Result<Vec<usize>> {
    if count > n {
        return Err(Error::Config(format!("batch of {count} exceeds the {n} training samples")));
    }
    let mut rng = stream(cfg.seed, ids::step_sample(ids::BATCH, step, phase.id()));
    Ok(index::sample(&mut rng, n, count).into_vec())
}

/// Mean loss and mean gradient over `items`; each item builds its own graph.
/// Gradients are summed in item order so the result does not depend on
/// scheduling.
fn mean_gradients<F>(items: &[usize], per_item: F) -> Result<(f64, BTreeMap<String, Tensor<f64>>)>
where
    F: Fn(&mut Tape<f32>, usize, usize) -> Result<Var> + Sync,
{
    let parts: Vec<Result<(f64, BTreeMap<String, Tensor<f32>>)>> = items
        .par_iter()
        .enumerate()
        .map(|(slot, &i)| {
            let mut tape = Tape::new();
            let loss = per_item(&mut tape, slot, i)?;
            let value = tape.value(loss).item().as_f64();
            tape.backward(loss)?;
            Ok((value, tape.param_grads()))
        })
        .collect();
    let scale = 1.0 / items.len() as f64;
    let mut loss = 0.0;
    let mut sum: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    for part in parts {
        let (l, grads) = part?;
        loss += l * scale;
        for (k, g) in grads {
            let acc = sum.entry(k).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v as f64 * scale;
            }
        }
    }
    Ok((loss, sum))
}

/// Everything a run needs to continue exactly where it stopped.
struct RunState {
    model: Model<f32>,
    opt: AdamW,
    ema: Ema,
    step: u64,
    log: MetricsLog,
    best: Option<(u64, f64)>,
    bad_evals: u64,
    skips: u64,
    stopped: bool,
}

impl RunState {
    fn fresh(model: Model<f32>) -> Self {
        Self { model, opt: AdamW::default(), ema: Ema::default(), step: 0, log: MetricsLog::default(), best: None, bad_evals: 0, skips: 0, stopped: false }
    }

    fn save(&self, cfg: &RunConfig, phase: Phase, stats: LabelStats, out: &Path, csv: &str, ckpt: &str) -> Result<()> {
        let mut ck = Checkpoint::new(cfg.model_config().architecture_hash());
        put_params(&mut ck, &self.model.named_values());
        self.opt.save(&mut ck);
        self.ema.save(&mut ck);
        stats.save(&mut ck);
        ck.put_u64s("train.phase", &[phase.id()]);
        ck.put_u64s("train.seed", &[cfg.seed]);
        ck.put_u64s("train.step", &[self.step]);
        ck.put_u64s("train.counters", &[self.bad_evals, self.skips, u64::from(self.stopped)]);
        if let Some((s, v)) = self.best {
            ck.put_u64s("train.best_step", &[s]);
            ck.put_tensor("train.best_metric", &Tensor::<f64>::scalar(v));
        }
        self.log.save(&out.join(csv))?;
        ck.save(&out.join(ckpt))
    }

    fn load(cfg: &RunConfig, phase: Phase, out: &Path, csv: &str, ckpt: &str) -> Result<(Self, LabelStats)> {
        let (model, ck) = load_model(cfg, &out.join(ckpt))?;
        if ck.u64("train.phase")? != phase.id() || ck.u64("train.seed")? != cfg.seed {
            return Err(Error::Checkpoint("state checkpoint belongs to a different phase or seed".into()));
        }
        let step = ck.u64("train.step")?;
        let text = std::fs::read_to_string(out.join(csv)).map_err(|e| Error::Data(format!("{csv}: {e}")))?;
        let mut log = MetricsLog::parse(&text)?;
        log.truncate_after(step);
        let best = match ck.records.contains_key("train.best_step") {
            true => Some((ck.u64("train.best_step")?, ck.tensor::<f64>("train.best_metric")?.item())),
            false => None,
        };
        let [bad_evals, skips, stopped]: [u64; 3] = ck.u64s("train.counters")?.try_into().map_err(|_| Error::Checkpoint("bad counters".into()))?;
        let state = Self { model, opt: AdamW::load(&ck)?, ema: Ema::load(&ck)?, step, log, best, bad_evals, skips, stopped: stopped != 0 };
        Ok((state, LabelStats::load(&ck)?))
    }

    fn apply(&mut self, cfg: &RunConfig, phase_cfg: &PhaseConfig, split: &str, loss: f64, grads: BTreeMap<String, Tensor<f64>>) -> Result<()> {
        let lr = cfg.schedule(phase_cfg).lr(self.step);
        let info = self.opt.step(&mut self.model, grads, lr, &cfg.adamw(phase_cfg));
        self.log.push(self.step, split, "loss", loss);
        self.log.push(self.step, split, "lr", lr);
        self.log.push(self.step, split, "grad_norm", info.grad_norm);
        if info.skipped || !loss.is_finite() {
            self.log.push(self.step, split, "skipped", 1.0);
            self.skips += 1;
            if self.skips >= MAX_SKIPS {
                return Err(Error::NonFinite(format!("{MAX_SKIPS} consecutive steps with non-finite gradients")));
            }
        } else {
            self.skips = 0;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    /// Mean reconstruction loss of every step so far, in order.
    pub losses: Vec<f64>,
    pub steps: u64,
    pub halted: bool,
    pub checkpoint: PathBuf,
}

pub fn run_pretrain(cfg: &RunConfig, train: &Dataset, out: &Path, opts: &RunOptions) -> Result<PretrainReport> {
    cfg.validate()?;
    check_dataset(cfg, train)?;
    std::fs::create_dir_all(out)?;
    let phase_cfg = &cfg.pretrain;
    let mut st = if opts.resume {
        RunState::load(cfg, Phase::Pretrain, out, PRETRAIN_CSV, PRETRAIN_CKPT)?.0
    } else {
        RunState::fresh(Model::new(cfg.model_config(), cfg.seed)?)
    };
    let save = |st: &RunState| st.save(cfg, Phase::Pretrain, LabelStats::IDENTITY, out, PRETRAIN_CSV, PRETRAIN_CKPT);
    let count = phase_cfg.batch * cfg.grad_accum;
    let grid = st.model.config.patch.grid();
    let mask_cfg = st.model.config.mask;
    let mut halted = false;
    while st.step < phase_cfg.steps {
        if opts.halt_after.is_some_and(|h| st.step >= h) {
            halted = true;
            break;
        }
        st.step += 1;
        let step = st.step;
        let idx = batch_indices(cfg, Phase::Pretrain, step, train.len(), count)?;
        let model = &st.model;
        let (loss, grads) = mean_gradients(&idx, |tape, slot, i| {
            let mask = stc_mask(grid, mask_cfg, &mut stream(cfg.seed, ids::step_sample(ids::MASK, step, slot as u64)))?;
            Ok(model.pretrain_forward(tape, &train.video(i), &mask)?.loss)
        })?;
        st.apply(cfg, phase_cfg, "train", loss, grads)?;
        if opts.verbose && (step % 10 == 0 || step == 1) {
            eprintln!("pretrain step {step}/{}: loss {loss:.5}", phase_cfg.steps);
        }
        if cfg.ckpt_every > 0 && step % cfg.ckpt_every == 0 {
            save(&st)?;
        }
    }
    save(&st)?;
    Ok(PretrainReport {
        losses: st.log.values("train", "loss").into_iter().map(|(_, v)| v).collect(),
        steps: st.step,
        halted,
        checkpoint: out.join(PRETRAIN_CKPT),
    })
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub steps: u64,
    pub best_step: Option<u64>,
    /// Validation metrics of the retained best checkpoint.
    pub best: Option<EvalMetrics>,
    pub stopped_early: bool,
    pub halted: bool,
    pub label_stats: LabelStats,
}

pub fn run_finetune(cfg: &RunConfig, train: &Dataset, val: &Dataset, out: &Path, opts: &RunOptions) -> Result<FinetuneReport> {
    cfg.validate()?;
    check_dataset(cfg, train)?;
    check_dataset(cfg, val)?;
    std::fs::create_dir_all(out)?;
    let task = cfg.model_task();
    let labels = train.labels_f64();
    let weights = match task {
        Task::Regress => [1.0, 1.0],
        Task::Classify => class_weights(&labels).map_err(|e| Error::Data(e.to_string()))?,
    };
    let (mut st, stats) = if opts.resume {
        RunState::load(cfg, Phase::Finetune, out, FINETUNE_CSV, FINETUNE_CKPT)?
    } else {
        let model = match &opts.init {
            Some(p) => load_model(cfg, p)?.0,
            None => Model::new(cfg.model_config(), cfg.seed)?,
        };
        (RunState::fresh(model), LabelStats::fit(cfg, &labels))
    };
    let save = |st: &RunState| st.save(cfg, Phase::Finetune, stats, out, FINETUNE_CSV, FINETUNE_CKPT);
    let phase_cfg = &cfg.finetune;
    let count = phase_cfg.batch * cfg.grad_accum;
    let eval_every = if cfg.eval_every > 0 { cfg.eval_every } else { train.len().div_ceil(count) as u64 };
    let ema_cfg = cfg.ema_config();

    let validate = |st: &mut RunState| -> Result<()> {
        let mut eval_model = st.model.clone();
        if !st.ema.is_empty() {
            eval_model.load_values(&st.ema.values())?;
        }
        let m = evaluate(&eval_model, val, stats)?;
        for (name, v) in m.rows() {
            st.log.push(st.step, "val", name, v);
        }
        if st.best.is_none_or(|(_, b)| m.improves_on(b)) {
            st.best = Some((st.step, m.primary().1));
            st.bad_evals = 0;
            let mut ck = Checkpoint::new(cfg.model_config().architecture_hash());
            put_params(&mut ck, &eval_model.named_values());
            stats.save(&mut ck);
            ck.put_u64s("train.step", &[st.step]);
            ck.save(&out.join(BEST_CKPT))?;
        } else {
            st.bad_evals += 1;
            st.stopped = cfg.patience > 0 && st.bad_evals >= cfg.patience;
        }
        if opts.verbose {
            let (name, v) = m.primary();
            eprintln!("finetune step {}: val {name} {v:.4}", st.step);
        }
        Ok(())
    };

    if phase_cfg.steps == 0 && st.best.is_none() {
        validate(&mut st)?;
    }
    let mut halted = false;
    while st.step < phase_cfg.steps && !st.stopped {
        if opts.halt_after.is_some_and(|h| st.step >= h) {
            halted = true;
            break;
        }
        st.step += 1;
        let step = st.step;
        let idx = batch_indices(cfg, Phase::Finetune, step, train.len(), count)?;
        let model = &st.model;
        let (loss, grads) = mean_gradients(&idx, |tape, _, i| {
            let y = model.downstream_forward(tape, &train.video(i))?;
            task_loss(tape, y, &[stats.target(train.label(i))], task, weights)
        })?;
        st.apply(cfg, phase_cfg, "train", loss, grads)?;
        if let Some(e) = &ema_cfg {
            st.ema.maybe_update(&st.model, step, e);
        }
        if step % eval_every == 0 || step == phase_cfg.steps {
            validate(&mut st)?;
        }
        if cfg.ckpt_every > 0 && step % cfg.ckpt_every == 0 {
            save(&st)?;
        }
    }
    save(&st)?;
    let best = match st.best {
        Some(_) => Some(evaluate(&load_model(cfg, &out.join(BEST_CKPT))?.0, val, stats)?),
        None => None,
    };
    Ok(FinetuneReport { steps: st.step, best_step: st.best.map(|b| b.0), best, stopped_early: st.stopped, halted, label_stats: stats })
}
