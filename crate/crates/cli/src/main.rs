use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ddiff::pipeline::{self, Baseline};
use ddiff::schedule::{DEFAULT_BETA_START, TABLE_BETAS, TABLE_STEPS};
use ddiff::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "ddiff", version, about = "Graph-diffusion prior + residual denoising diffusion forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config entry, e.g. `--set train.epochs=50` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Parent directory for the timestamped run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Ode,
    Persistence,
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoiser; writes checkpoint.json and losses.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Draw forecast ensembles for the test windows.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Disable the noise injected between reverse steps.
        #[arg(long)]
        deterministic: bool,
        /// Run the full reverse chain instead of starting at the accelerated step.
        #[arg(long)]
        no_accelerate: bool,
    },
    /// Score the model or a point baseline on the test windows.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        deterministic: bool,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        /// Also write per-horizon CSV series for plotting.
        #[arg(long)]
        emit_plots: bool,
    },
    /// Tabulate accelerated start steps and their closed-form approximation.
    Schedule {
        #[arg(long, value_delimiter = ',', default_values_t = TABLE_STEPS.to_vec())]
        steps: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = TABLE_BETAS.to_vec())]
        betas: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_BETA_START)]
        beta_start: f64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Generate the synthetic dataset (series, coordinates, adjacency).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Diffusion-only forecasts for the test windows.
    ForecastOde {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common, deterministic: bool) -> Result<RunConfig> {
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides, common.seed)?;
    if deterministic {
        cfg.sampling.deterministic = true;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, checkpoint } => {
            let cfg = resolve(&common, false)?;
            let dir = pipeline::create_run_dir(&cfg, "train")?;
            let out = pipeline::cmd_train(&cfg, checkpoint.as_deref(), &dir)?;
            let last = out.losses.last().copied().unwrap_or(f64::NAN);
            println!("trained {} epochs on {} windows, final loss {last:.6}", out.losses.len(), out.windows);
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::Sample {
            common,
            checkpoint,
            deterministic,
            no_accelerate,
        } => {
            let mut cfg = resolve(&common, deterministic)?;
            if no_accelerate {
                cfg.sampling.accelerate = false;
            }
            let dir = pipeline::create_run_dir(&cfg, "sample")?;
            let s = pipeline::cmd_sample(&cfg, &checkpoint, &dir)?;
            println!(
                "start step {} (accelerated step {}), {} samples x {} windows, {} denoiser invocations",
                s.start_step, s.accelerated_step, s.samples, s.windows, s.denoiser_invocations
            );
            println!("output: {}", dir.display());
        }
        Command::Evaluate {
            common,
            checkpoint,
            deterministic,
            baseline,
            emit_plots,
        } => {
            let cfg = resolve(&common, deterministic)?;
            let baseline = baseline.map(|b| match b {
                BaselineArg::Ode => Baseline::Ode,
                BaselineArg::Persistence => Baseline::Persistence,
            });
            let dir = pipeline::create_run_dir(&cfg, "evaluate")?;
            let r = pipeline::cmd_evaluate(&cfg, checkpoint.as_deref(), baseline, emit_plots, &dir)?;
            println!("mae {:.6}  rmse {:.6}  crps {:.6}", r.mae, r.rmse, r.crps);
            println!("output: {}", dir.display());
        }
        Command::Schedule {
            steps,
            betas,
            beta_start,
            out,
        } => {
            let cfg = RunConfig {
                output_dir: out,
                ..RunConfig::default()
            };
            let dir = pipeline::create_run_dir(&cfg, "schedule")?;
            let grid = pipeline::cmd_schedule(&steps, &betas, beta_start, &dir)?;
            let head: Vec<String> = steps.iter().map(|s| format!("{s:>5}")).collect();
            println!("beta_end {}", head.join(""));
            for (b, row) in betas.iter().zip(&grid) {
                let cells: Vec<String> = row.iter().map(|s| format!("{s:>5}")).collect();
                println!("{b:<8} {}", cells.join(""));
            }
            println!("output: {}", dir.display());
        }
        Command::Synth { common } => {
            let cfg = resolve(&common, false)?;
            let dir = pipeline::create_run_dir(&cfg, "synth")?;
            let series = pipeline::cmd_synth(&cfg, &dir)?;
            println!("series: {}", series.display());
        }
        Command::ForecastOde { common } => {
            let cfg = resolve(&common, false)?;
            let dir = pipeline::create_run_dir(&cfg, "forecast-ode")?;
            let r = pipeline::cmd_forecast_ode(&cfg, &dir)?;
            println!("mae {:.6}  rmse {:.6}", r.mae, r.rmse);
            println!("output: {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit(&e)
        }
    }
}

fn exit(e: &Error) -> ExitCode {
    ExitCode::from(e.exit_code() as u8)
}
