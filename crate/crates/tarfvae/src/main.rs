use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tarfvae::bench::BenchSpec;
use tarfvae::checkpoint::Checkpoint;
use tarfvae::commands::{
    cmd_bench, cmd_evaluate, cmd_gen_synthetic, cmd_predict, cmd_train, load_config, Overrides,
};
use tarfvae::config::{PrecisionSetting, RunConfig};
use tarfvae::selftest::{run_all, SelftestOptions};
use tarfvae_core::model::ModelConfig;
use tarfvae_core::train::Ablation;

#[derive(Parser)]
#[command(name = "tarfvae", version, about = "Flow-refined conditional VAE forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    #[value(name = "no_flow")]
    NoFlow,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoFlow => Ablation::NoFlow,
        }
    }
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, log and config snapshot.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Sample forecasts for the last lookback rows of a CSV file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV file.
        #[arg(long, default_value = "samples.csv")]
        out: PathBuf,
    },
    /// Time generation over horizons and sample counts.
    Bench {
        /// Model to time; without it a seeded random model is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Takes the architecture from this config when no checkpoint is given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "96,192,336,720")]
        horizons: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,200")]
        samples: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Channel count for the default architecture.
        #[arg(long, default_value_t = 7)]
        channels: usize,
        /// Also write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suites; exits nonzero on any failure.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_logdet: bool,
    },
    /// Write the config's synthetic series as CSV.
    GenSynthetic {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn overrides(common: &Common) -> Overrides {
    Overrides {
        out: common.out.clone(),
        seed: common.seed,
        ..Overrides::default()
    }
}

fn checkpoint_precision(ck: &Checkpoint) -> PrecisionSetting {
    ck.meta
        .config
        .as_deref()
        .and_then(|t| RunConfig::parse(t).ok())
        .map(|c| c.precision)
        .unwrap_or_default()
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            common,
            ablation,
            quiet,
        } => {
            let ov = Overrides {
                ablation: ablation.map(Into::into),
                ..overrides(&common)
            };
            let cfg = load_config(&common.config, &ov)?;
            let s = cmd_train(&cfg, quiet)?;
            println!(
                "trained {} epochs ({} steps); best epoch {:?}, validation {:.6}; checkpoint {}",
                s.epochs,
                s.steps,
                s.best_epoch,
                s.best_val_score,
                s.checkpoint.display()
            );
            if let Some(why) = s.aborted {
                bail!("training aborted: {why}; last good checkpoint written");
            }
        }
        Command::Evaluate {
            common,
            checkpoint,
            samples,
        } => {
            let ov = Overrides {
                samples,
                ..overrides(&common)
            };
            let cfg = load_config(&common.config, &ov)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let out = cmd_evaluate(&ck, &cfg)?;
            println!(
                "mse {:.6}  mae {:.6}  crps {:.6}  -> {}",
                out.mse,
                out.mae,
                out.crps,
                out.report.display()
            );
        }
        Command::Predict {
            checkpoint,
            input,
            samples,
            seed,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let rows = cmd_predict(&ck, &input, samples, seed, checkpoint_precision(&ck), &out)?;
            println!("wrote {rows} rows to {}", out.display());
        }
        Command::Bench {
            checkpoint,
            config,
            horizons,
            samples,
            repetitions,
            warmup,
            seed,
            channels,
            out,
        } => {
            let ck = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let (base, precision) = match (&ck, &config) {
                (Some(ck), _) => (ck.meta.model.clone(), checkpoint_precision(ck)),
                (None, Some(p)) => {
                    let cfg = RunConfig::load(p)?;
                    let c = match &cfg.data.synthetic {
                        Some(s) => s.channels,
                        None => channels,
                    };
                    (cfg.model.resolve(c, cfg.data.lookback, cfg.data.horizon), cfg.precision)
                }
                (None, None) => (ModelConfig::new(channels, 96, 96), PrecisionSetting::F32),
            };
            let spec = BenchSpec {
                horizons,
                samples,
                repetitions,
                warmup,
                seed,
            };
            let table = cmd_bench(&base, ck.as_ref(), &spec, precision)?;
            print!("{}", table.to_text());
            if let Some(p) = out {
                std::fs::write(&p, serde_json::to_string_pretty(&table)?)
                    .with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Selftest {
            seed,
            corrupt_logdet,
        } => {
            let results = run_all(&SelftestOptions {
                seed,
                corrupt_logdet,
            });
            let mut ok = true;
            for r in &results {
                println!(
                    "{:<14} {}  ({:.2}s)  {}",
                    r.name,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.seconds,
                    r.detail
                );
                ok &= r.passed;
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::GenSynthetic { config, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let n = cmd_gen_synthetic(&cfg, &out)?;
            println!("wrote {n} steps to {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
