use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use spanloc::data::{read_jsonl, write_jsonl};
use spanloc::gradcheck::{gradcheck, GradCheckOptions};
use spanloc::infer::{predict_all, seed_sweep};
use spanloc::metrics::evaluate;
use spanloc::plot::{plot_convergence, DEFAULT_METRIC};
use spanloc::train::{generate_splits, initial_checkpoint, train, RunPaths};
use spanloc::{Checkpoint, Overrides, Prediction, RunConfig, Sample};

#[derive(Parser)]
#[command(name = "spanloc", version, about = "Temporal span localization with boundary denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train/val splits described by the config.
    Generate(RunArgs),
    /// Train a model; writes log.jsonl, last.ckpt, best.ckpt and config.toml.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Directory holding train.jsonl and val.jsonl (generated from the config if absent).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint; the snapshot config is used and flags override it.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict windows with a trained checkpoint.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset JSONL (defaults to the checkpoint's validation split).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a prediction file against a dataset file; prints flat JSON.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Config supplying the metric thresholds.
        #[arg(long)]
        config: Option<String>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients in 64-bit.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Convergence curves from one or more training logs (CSV + SVG).
    Plot {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        /// Output path stem; `.csv` and `.svg` are appended.
        #[arg(long, default_value = "convergence")]
        out: PathBuf,
        #[arg(long, default_value = DEFAULT_METRIC)]
        metric: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Config file, or a preset name (desk, tiny, default).
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    denoise: Option<Switch>,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    noise_db: Option<Vec<f64>>,
    #[arg(long)]
    num_queries: Option<usize>,
    #[arg(long)]
    num_denoise: Option<usize>,
    #[arg(long)]
    diffusion_steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    random_spans: bool,
    #[arg(long)]
    seed_sweep: Option<usize>,
    #[arg(long, value_enum)]
    self_attn: Option<Switch>,
    #[arg(long, value_enum)]
    dynamic_conv: Option<Switch>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            denoise: self.denoise.map(Into::into),
            noise_db: self.noise_db.as_ref().map(|v| [v[0], v[1]]),
            num_queries: self.num_queries,
            num_denoise: self.num_denoise,
            diffusion_steps: self.diffusion_steps,
            epochs: self.epochs,
            random_spans: self.random_spans.then_some(true),
            seed_sweep: self.seed_sweep,
            self_attn: self.self_attn.map(Into::into),
            dynamic_conv: self.dynamic_conv.map(Into::into),
            out: self.out.clone(),
        }
    }

    /// Base config (file or preset, else `default_preset`) with flags applied.
    fn resolve(&self, default_preset: &str) -> Result<RunConfig> {
        let mut cfg = load_config(self.config.as_deref().unwrap_or(default_preset))?;
        self.overrides().apply(&mut cfg)?;
        Ok(cfg)
    }
}

fn load_config(source: &str) -> Result<RunConfig> {
    let path = Path::new(source);
    if path.exists() {
        Ok(RunConfig::load(path)?)
    } else if source.ends_with(".toml") {
        bail!("config file {source} not found")
    } else {
        Ok(RunConfig::preset(source)?)
    }
}

fn load_splits(cfg: &RunConfig, data: Option<&Path>) -> Result<(Vec<Sample>, Vec<Sample>)> {
    match data {
        Some(dir) => Ok((read_jsonl(&dir.join("train.jsonl"))?, read_jsonl(&dir.join("val.jsonl"))?)),
        None => Ok(generate_splits(cfg)?),
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate(args) => {
            let cfg = args.resolve("desk")?;
            let (tr, va) = generate_splits(&cfg)?;
            std::fs::create_dir_all(&cfg.out)?;
            write_jsonl(&tr, &cfg.out.join("train.jsonl"))?;
            write_jsonl(&va, &cfg.out.join("val.jsonl"))?;
            std::fs::write(cfg.out.join("config.toml"), cfg.to_toml())?;
            log::info!("wrote {} train and {} val samples to {}", tr.len(), va.len(), cfg.out.display());
        }
        Command::Train { run, data, resume } => {
            let start = match &resume {
                Some(path) => {
                    if run.config.is_some() {
                        bail!("--resume uses the checkpoint's config; drop --config");
                    }
                    let mut ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
                    let before = ck.config.model_config();
                    run.overrides().apply(&mut ck.config)?;
                    if ck.config.model_config() != before {
                        bail!("flags change the model architecture of the checkpoint");
                    }
                    ck
                }
                None => initial_checkpoint(&run.resolve("desk")?)?,
            };
            let (tr, va) = load_splits(&start.config, data.as_deref())?;
            let out = start.config.out.clone();
            let outcome = train(start, &tr, &va, Some(&out))?;
            if let Some(b) = outcome.best {
                log::info!("best val map_avg {:.4} at epoch {}", b.map_avg, b.epoch);
            }
            println!("{}", RunPaths::new(&out).last().display());
        }
        Command::Infer { run, checkpoint, data } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let mut cfg = match &run.config {
                Some(c) => load_config(c)?,
                None => ck.config.clone(),
            };
            run.overrides().apply(&mut cfg)?;
            let samples: Vec<Sample> = match &data {
                Some(p) => read_jsonl(p)?,
                None => generate_splits(&cfg)?.1,
            };
            std::fs::create_dir_all(&cfg.out)?;
            if cfg.infer.seed_sweep > 0 {
                let (runs, summary) = seed_sweep(&ck.model, &samples, cfg.infer.seed_sweep)?;
                for (seed, preds) in runs.iter().enumerate() {
                    write_jsonl(preds, &cfg.out.join(format!("predictions_seed{seed}.jsonl")))?;
                }
                std::fs::write(cfg.out.join("dispersion.json"), serde_json::to_string_pretty(&summary)?)?;
                println!("mean_top1_center_variance {}", summary.mean_top1_center_variance);
            } else {
                let random = cfg.infer.random_spans.then_some(cfg.seed);
                let preds: Vec<Prediction> = predict_all(&ck.model, &samples, random)?;
                let path = cfg.out.join("predictions.jsonl");
                write_jsonl(&preds, &path)?;
                println!("{}", path.display());
            }
        }
        Command::Eval {
            predictions,
            data,
            config,
            out,
        } => {
            let eval_cfg = match config {
                Some(c) => load_config(&c)?.eval,
                None => Default::default(),
            };
            let preds: Vec<Prediction> = read_jsonl(&predictions)?;
            let samples: Vec<Sample> = read_jsonl(&data)?;
            let report = evaluate(&preds, &samples, &eval_cfg)?.to_json();
            if let Some(p) = out {
                std::fs::write(p, serde_json::to_string(&report)?)?;
            }
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Gradcheck { run, tolerance } => {
            let cfg = run.resolve("tiny")?;
            let opts = GradCheckOptions {
                tolerance,
                seed: cfg.seed,
                ..GradCheckOptions::default()
            };
            let report = gradcheck(&cfg, &opts)?;
            print_json(&report)?;
            if !report.passed() {
                eprintln!("gradient check failed for: {}", report.failing().join(", "));
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Plot { logs, out, metric } => {
            let (csv, svg) = plot_convergence(&logs, &metric, &out)?;
            println!("{}\n{}", csv.display(), svg.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
