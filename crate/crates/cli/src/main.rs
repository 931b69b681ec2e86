use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mamba3d::bench::{bench_mask, to_csv};
use mamba3d::checkpoint::Checkpoint;
use mamba3d::config::RunConfig;
use mamba3d::data::Dataset;
use mamba3d::masking::stc_mask;
use mamba3d::metrics::MetricsLog;
use mamba3d::model::{export_delta_maps, export_reconstruction, Model};
use mamba3d::rng::{ids, stream};
use mamba3d::train::{self, check_dataset, evaluate, load_model, synth_splits, LabelStats, RunOptions};
use mamba3d::Error;

const TRAIN_FILE: &str = "train.m3d";
const VAL_FILE: &str = "val.m3d";

#[derive(Parser)]
#[command(name = "mamba3d", version, about = "Mamba-3D video pre-training, fine-tuning and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Model or training checkpoint to read.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// key=value, applied after the config file. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic train and validation splits.
    GenData,
    /// Masked video modeling.
    Pretrain(TrainArgs),
    /// Downstream training; --checkpoint picks the starting parameters.
    Finetune(TrainArgs),
    /// Metrics of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Masked reconstruction of one sample as PGM frames.
    Reconstruct(SampleArgs),
    /// Per-block step-size maps of one sample as PGM frames.
    DumpDelta(SampleArgs),
    /// Masked versus full encoder timing as CSV.
    BenchMask {
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding train.m3d and val.m3d; generated from the config if absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from the state checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, default_value_t = 0)]
    sample: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) => 3,
        Error::NonFinite(_) => 4,
        _ => 1,
    }
}

fn load_config(c: &Common) -> mamba3d::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&c.overrides)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn datasets(cfg: &RunConfig, dir: Option<&Path>) -> mamba3d::Result<(Dataset, Dataset)> {
    let (train, val) = match dir {
        Some(d) => (Dataset::load(&d.join(TRAIN_FILE))?, Dataset::load(&d.join(VAL_FILE))?),
        None => synth_splits(cfg)?,
    };
    check_dataset(cfg, &train)?;
    check_dataset(cfg, &val)?;
    Ok((train, val))
}

fn pick(cfg: &RunConfig, dir: Option<&Path>, split: &str) -> mamba3d::Result<Dataset> {
    let (train, val) = datasets(cfg, dir)?;
    match split {
        "train" => Ok(train),
        "val" => Ok(val),
        _ => Err(Error::Config(format!("split must be train or val, got {split:?}"))),
    }
}

fn require(path: &Option<PathBuf>) -> mamba3d::Result<&Path> {
    path.as_deref().ok_or_else(|| Error::Config("--checkpoint is required".into()))
}

fn sample(d: &Dataset, i: usize) -> mamba3d::Result<usize> {
    if i >= d.len() {
        return Err(Error::Data(format!("sample {i} out of range for {} samples", d.len())));
    }
    Ok(i)
}

fn run(cli: Cli) -> mamba3d::Result<()> {
    let c = &cli.common;
    let cfg = load_config(c)?;
    std::fs::create_dir_all(&c.out)?;
    match cli.command {
        Command::GenData => {
            let (train, val) = synth_splits(&cfg)?;
            train.save(&c.out.join(TRAIN_FILE))?;
            val.save(&c.out.join(VAL_FILE))?;
            std::fs::write(c.out.join("config.conf"), cfg.to_text())?;
            println!("wrote {} train and {} val samples to {}", train.len(), val.len(), c.out.display());
        }
        Command::Pretrain(a) => {
            let (train, _) = datasets(&cfg, a.data.as_deref())?;
            let opts = RunOptions { resume: a.resume, verbose: !a.quiet, ..Default::default() };
            let rep = train::run_pretrain(&cfg, &train, &c.out, &opts)?;
            println!("pretrained {} steps, final loss {:.5}, checkpoint {}", rep.steps, rep.losses.last().copied().unwrap_or(f64::NAN), rep.checkpoint.display());
        }
        Command::Finetune(a) => {
            let (train, val) = datasets(&cfg, a.data.as_deref())?;
            let opts = RunOptions { resume: a.resume, init: c.checkpoint.clone(), verbose: !a.quiet, ..Default::default() };
            let rep = train::run_finetune(&cfg, &train, &val, &c.out, &opts)?;
            println!("fine-tuned {} steps{}", rep.steps, if rep.stopped_early { " (early stop)" } else { "" });
            if let (Some(step), Some(best)) = (rep.best_step, rep.best) {
                println!("best checkpoint from step {step}:");
                for (k, v) in best.rows() {
                    println!("  {k} {v:.4}");
                }
            }
        }
        Command::Eval { data, split } => {
            let d = pick(&cfg, data.as_deref(), &split)?;
            let (model, ck) = load_model(&cfg, require(&c.checkpoint)?)?;
            let stats = LabelStats::load(&ck).unwrap_or(LabelStats::IDENTITY);
            let m = evaluate(&model, &d, stats)?;
            let step = ck.u64("train.step").unwrap_or(0);
            let mut log = MetricsLog::default();
            for (k, v) in m.rows() {
                log.push(step, &split, k, v);
                println!("{k} {v:.4}");
            }
            log.save(&c.out.join("eval_metrics.csv"))?;
        }
        Command::Reconstruct(a) => {
            let d = pick(&cfg, a.data.as_deref(), &a.split)?;
            let (model, _) = load_model(&cfg, require(&c.checkpoint)?)?;
            let i = sample(&d, a.sample)?;
            let mask = stc_mask(cfg.model_config().patch.grid(), cfg.mask_config(), &mut stream(cfg.seed, ids::step_sample(ids::MASK, 0, i as u64)))?;
            let files = export_reconstruction(&model, &d.video(i), &mask, &c.out.join("recon"))?;
            println!("wrote {} frames to {}", files.len(), c.out.join("recon").display());
        }
        Command::DumpDelta(a) => {
            let d = pick(&cfg, a.data.as_deref(), &a.split)?;
            let model: Model<f32> = match &c.checkpoint {
                Some(p) => load_model(&cfg, p)?.0,
                None => Model::new(cfg.model_config(), cfg.seed)?,
            };
            let i = sample(&d, a.sample)?;
            let files = export_delta_maps(&model, &d.video(i), &c.out.join("delta"))?;
            println!("wrote {} maps to {}", files.len(), c.out.join("delta").display());
        }
        Command::BenchMask { reps } => {
            if let Some(p) = &c.checkpoint {
                Checkpoint::load(p, Some(cfg.model_config().architecture_hash()))?;
            }
            let row = bench_mask::<f32>(&cfg.model_config(), reps, cfg.seed)?;
            let csv = to_csv(&[row]);
            std::fs::write(c.out.join("bench_mask.csv"), &csv)?;
            print!("{csv}");
            eprintln!("masked/full encode time ratio {:.3}", row.ratio());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
