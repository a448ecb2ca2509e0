//! `rfcast`: synthesize data, train, sample, evaluate and plot.

mod report;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array3;
use rfcast_core::checkpoint::Checkpoint;
use rfcast_core::config::RunConfig;
use rfcast_core::data::container::save_tensor;
use rfcast_core::data::dataset::{write_synthetic, Dataset};
use rfcast_core::data::synth::SynthConfig;
use rfcast_core::data::{denormalize, NativeRange, SequenceWindow};
use rfcast_core::metrics::ThresholdSet;
use rfcast_core::model::Model;
use rfcast_core::train::{evaluate, persistence, sample, verify, EvalReport, Trainer};

#[derive(Parser)]
#[command(name = "rfcast", version, about = "Rectified-flow radar nowcasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic advection events as a dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        events: usize,
        /// Frames per event.
        #[arg(long, default_value_t = 15)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        blobs: usize,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        vx: f64,
        #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
        vy: f64,
        #[arg(long, default_value_t = 0.05)]
        diffusion: f64,
        #[arg(long, default_value_t = 0.99)]
        decay: f64,
    },
    /// Print a complete config file with every key at its default.
    Config {
        #[arg(long, value_enum, default_value = "toy")]
        preset: Preset,
    },
    /// Train from a config file; writes checkpoints and the loss history to `--out`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample forecasts with the EMA weights and write them in native units.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Output directory (default: `samples` next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reject the checkpoint unless it was trained with this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Verify sampled forecasts and the persistence baseline on a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `sevir`, `meteonet`, `shanghai`, `cikm`, `synthetic` or `custom:a,b,...` (default: from the config).
        #[arg(long)]
        thresholds: Option<String>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Metrics file (default: `metrics.json` next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Turn a metrics file (and optionally a training history) into CSV tables and SVG plots.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, seed, events, frames, size, blobs, vx, vy, diffusion, decay } => {
            let cfg = SynthConfig { seed, n_blobs: blobs, velocity: (vx, vy), diffusion, decay, t: frames, h: size, w: size, ..SynthConfig::default() };
            let ds = write_synthetic(&out, &cfg, events)?;
            log::info!("wrote {} events of {frames}x{size}x{size} to {}", ds.sequences.len(), out.display());
        }
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Toy => RunConfig::toy(),
                Preset::Full => RunConfig::full(),
            };
            print!("{}", cfg.to_toml_string()?);
        }
        Command::Train { config, data, out, resume } => train(&config, &data, &out, resume.as_deref())?,
        Command::Sample { ckpt, data, steps, seed, split, out, config } => {
            let (ck, model) = open_checkpoint(&ckpt, config.as_deref())?;
            let (windows, range, _) = load_split(&ck.config, &data, split)?;
            let conds: Vec<&Array3<f32>> = windows.iter().map(|w| &w.condition).collect();
            let preds = sample(&model, &ck.ema, &conds, steps, seed, ck.config.train.batch)?;
            let out = out.unwrap_or_else(|| sibling(&ckpt, "samples"));
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (w, p) in windows.iter().zip(&preds) {
                let native = to_native(p, range);
                save_tensor(out.join(format!("pred_e{:04}_s{:04}.rft", w.event, w.start)), &native.into_dyn())?;
            }
            log::info!("wrote {} forecasts ({} steps, seed {seed}) to {}", preds.len(), steps, out.display());
        }
        Command::Eval { ckpt, data, thresholds, split, steps, seed, out, config } => {
            let (ck, model) = open_checkpoint(&ckpt, config.as_deref())?;
            let (windows, range, cadence) = load_split(&ck.config, &data, split)?;
            if windows.is_empty() {
                bail!("the {} split is empty", split.name());
            }
            let set = match thresholds {
                Some(name) => ThresholdSet::preset(&name)?,
                None => ck.config.thresholds()?,
            };
            set.validate_range(range)?;
            let summary = evaluate(&model, &ck.ema, &windows, range, &set, steps, seed, ck.config.train.batch)?;
            let pers: Vec<Array3<f32>> = windows.iter().map(persistence).collect();
            let targets: Vec<Array3<f32>> = windows.iter().map(|w| w.target.clone()).collect();
            let baseline = verify(&pers, &targets, range, &set)?;
            let report = EvalReport {
                fingerprint: ck.fingerprint.clone(),
                step: ck.step,
                split: split.name().into(),
                windows: windows.len(),
                sampler_steps: steps,
                seed,
                cadence_minutes: cadence,
                model: summary,
                persistence: baseline,
            };
            let out = out.unwrap_or_else(|| sibling(&ckpt, "metrics.json"));
            fs::write(&out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
            println!("CSI-M {:.4}  HSS {:.4}  MSE {:.6}  (persistence CSI-M {:.4})", report.model.csi_m, report.model.hss, report.model.mse, report.persistence.csi_m);
            for m in &report.model.per_threshold {
                println!("  threshold {:>8.3}: CSI {:.4}  HSS {:.4}", m.threshold, m.csi, m.hss);
            }
            log::info!("metrics written to {}", out.display());
        }
        Command::Report { metrics, out, history } => report::write(&metrics, history.as_deref(), &out)?,
    }
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map(|p| p.join(name)).unwrap_or_else(|| PathBuf::from(name))
}

fn to_native(x: &Array3<f32>, range: NativeRange) -> Array3<f32> {
    let mut out = x.clone();
    for (mut o, f) in out.outer_iter_mut().zip(x.outer_iter()) {
        o.assign(&denormalize(f, range));
    }
    out
}

fn load_split(cfg: &RunConfig, data: &Path, split: Split) -> Result<(Vec<SequenceWindow>, NativeRange, f64)> {
    let ds = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?.resized(cfg.data.size)?;
    let parts = ds.split(cfg.model.j, cfg.model.k, cfg.data.stride, cfg.data.split)?;
    let windows = match split {
        Split::Train => parts.train,
        Split::Val => parts.val,
        Split::Test => parts.test,
    };
    Ok((windows, ds.meta.native_range, ds.meta.cadence_minutes))
}

fn open_checkpoint(path: &Path, config: Option<&Path>) -> Result<(Checkpoint, Model)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if let Some(cfg_path) = config {
        ck.check_config(&RunConfig::load(cfg_path)?)?;
    }
    let (model, fresh) = rfcast_core::model::build::<f32>(&ck.config.model, 0)?;
    ck.check_layout(&fresh)?;
    Ok((ck, model))
}

fn train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ds = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?.resized(cfg.data.size)?;
    cfg.thresholds()?.validate_range(ds.meta.native_range)?;
    let parts = ds.split(cfg.model.j, cfg.model.k, cfg.data.stride, cfg.data.split)?;
    log::info!("windows: {} train, {} val, {} test", parts.train.len(), parts.val.len(), parts.test.len());
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.check_config(&cfg)?;
            Trainer::resume(ck)?
        }
        None => Trainer::new(cfg.clone())?,
    };
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    log::info!("{} trainable parameters, fingerprint {}", trainer.params.num_trainable(), cfg.fingerprint());
    let (last, best) = (out.join("last.ckpt"), out.join("best.ckpt"));
    let total = cfg.train.total_steps(parts.train.len());
    let result = trainer.fit(
        &parts.train,
        &parts.val,
        ds.meta.native_range,
        |r| {
            if r.step % 10 == 0 || r.step + 1 == total {
                log::info!("step {:>6} epoch {:>4} loss {:.5} lr {:.3e} grad {:.3}", r.step, r.epoch, r.loss, r.lr, r.grad_norm);
            }
        },
        |t, v| {
            log::info!("epoch {} val CSI-M {:.4} (best {:.4})", v.epoch, v.csi_m, v.best_csi_m);
            let ck = t.checkpoint();
            ck.save(&last)?;
            if v.improved {
                ck.save(&best)?;
            }
            Ok(())
        },
    );
    let ck = trainer.checkpoint();
    ck.save(&last)?;
    if parts.val.is_empty() {
        ck.save(&best)?;
    }
    let history = serde_json::json!({ "steps": trainer.history, "validation": trainer.validation });
    fs::write(out.join("history.json"), serde_json::to_string_pretty(&history)?)?;
    if let Err(e) = result {
        let diag = serde_json::json!({ "error": e.to_string(), "step": trainer.step, "last_steps": trainer.history.iter().rev().take(20).collect::<Vec<_>>() });
        fs::write(out.join("diverged.json"), serde_json::to_string_pretty(&diag)?)?;
        return Err(e.into());
    }
    log::info!("finished at step {}; checkpoints in {}", trainer.step, out.display());
    Ok(())
}
