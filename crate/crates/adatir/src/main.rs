use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use adatir::advantage::Method;
use adatir::config::ExperimentConfig;
use adatir::harness::{self, HarnessError, GRAD_CHECK_TOLERANCE};

#[derive(Parser)]
#[command(name = "adatir", version, about = "Difficulty-aware tool-budget RL simulator")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Vanilla,
    /// Naive reward shaping.
    Rs,
    Cas,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Vanilla => Method::Vanilla,
            MethodArg::Rs => Method::NaiveShaping,
            MethodArg::Cas => Method::Cas,
        }
    }
}

#[derive(Subcommand)]
enum Commands {
    /// Train one method and write step log, checkpoint and eval report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Option<MethodArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run vanilla / naive shaping / CAS on identical seeds and compare.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Restrict the comparison to one method.
        #[arg(long)]
        method: Option<MethodArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints the report as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Evaluate under a single tool-budget cap.
        #[arg(long, conflicts_with = "sweep")]
        budget: Option<u32>,
        /// Evaluate every budget cap in {0..n_max} and write the CSV.
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify the analytic gradient against finite differences.
    CheckGrad {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Test hook: corrupt the analytic gradient so the check must fail.
        #[arg(long, hide = true, default_value_t = 0.0)]
        corrupt_gradient: f64,
    },
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Commands::Run {
            config,
            method,
            seed,
            steps,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(m) = method {
                cfg.train.method = m.into();
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            match harness::cmd_run(&cfg, &out_dir) {
                Ok(artifacts) => {
                    eprintln!(
                        "run complete: {} / {}",
                        artifacts.step_log.display(),
                        artifacts.checkpoint.display()
                    );
                    Ok(())
                }
                Err(e @ HarnessError::Aborted { .. }) => bail!("{e}"),
                Err(e) => Err(e.into()),
            }
        }
        Commands::Ablate { config, method, out } => {
            let cfg = load_config(&config)?;
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            let rows = harness::cmd_ablate(&cfg, &out_dir, method.map(Into::into))?;
            for (m, report) in &rows {
                eprintln!(
                    "{m}: accuracy {:.4}, atc {:.4}, tp {}",
                    report.accuracy,
                    report.atc,
                    report
                        .tp
                        .map(|v| format!("{v:.2}"))
                        .unwrap_or_else(|| "n/a".into()),
                );
            }
            Ok(())
        }
        Commands::Eval {
            ckpt,
            config,
            budget,
            sweep,
            out,
        } => {
            let cfg = load_config(&config)?;
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            let report = harness::cmd_eval(&ckpt, &cfg, budget, sweep, &out_dir)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Commands::CheckGrad {
            config,
            trials,
            corrupt_gradient,
        } => {
            let cfg = load_config(&config)?;
            let err = harness::cmd_check_grad(&cfg, trials, corrupt_gradient)?;
            println!("max relative error over {trials} trials: {err:.3e}");
            if err > GRAD_CHECK_TOLERANCE {
                bail!("gradient check failed: {err:.3e} > {GRAD_CHECK_TOLERANCE:.0e}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
