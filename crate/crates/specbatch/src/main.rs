use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use specbatch::experiments::{self, Experiment};
use specbatch::formats::parse_list;
use specbatch::{ExperimentConfig, ExperimentKind, HarnessError, Result};
use specbatch_core::policy::ProfileMode;

#[derive(Parser)]
#[command(name = "specbatch", version, about = "Batched speculative decoding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulated per-token latency over the (batch size, speculation length) grid.
    Sweep(Common),
    /// Build the speculation lookup table.
    Profile(ProfileArgs),
    /// Fixed batch sizes, adaptive against plain decoding.
    Uniform(Common),
    /// Gamma traffic over the interval x CV grid.
    Dynamic(Common),
    /// Phase-switching traffic.
    Timeline(Common),
    /// Refit the calibration from traces and step-time samples.
    Fit(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output table path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Comma-separated batch sizes, e.g. `1,2,4,8,16,32`.
    #[arg(long)]
    sizes: Option<String>,
    /// Speculation grid, e.g. `0..8` or `0,1,2`.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
}

fn load(path: &Path, kind: ExperimentKind, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(k) = config.kind.filter(|k| *k != kind) {
        return Err(HarnessError::Config(format!("config is for `{k}`, not `{kind}`")));
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(out) = out {
        config.out_dir = std::env::current_dir().map(|d| d.join(&out)).unwrap_or(out);
    }
    Ok(config)
}

fn profile_config(args: &ProfileArgs) -> Result<ExperimentConfig> {
    let mut config = match (&args.config, &args.calibration) {
        (Some(path), _) => load(path, ExperimentKind::Profile, args.seed, None)?,
        (None, Some(_)) => ExperimentConfig::new(""),
        (None, None) => return Err(HarnessError::Config("profile needs --config or --calibration".into())),
    };
    let cwd = std::env::current_dir().map_err(|e| HarnessError::Config(e.to_string()))?;
    if let Some(cal) = &args.calibration {
        config.calibration = cwd.join(cal);
    }
    if let Some(trace) = &args.trace {
        config.trace = Some(cwd.join(trace));
    }
    if let Some(sizes) = &args.sizes {
        config.profile.sizes = parse_list(sizes).map_err(HarnessError::Config)?;
    }
    if let Some(grid) = &args.grid {
        config.profile.grid = parse_list(grid).map_err(HarnessError::Config)?;
    }
    if let Some(mode) = &args.mode {
        config.profile.mode = mode.parse::<ProfileMode>().map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    if let Some(samples) = args.samples {
        config.profile.samples = samples;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Profile(args) => {
            let exp = Experiment::from_config(profile_config(&args)?)?;
            experiments::cmd_profile(&exp, args.out.as_deref())?;
        }
        Command::Sweep(c) => {
            experiments::cmd_sweep(&Experiment::from_config(load(&c.config, ExperimentKind::Sweep, c.seed, c.out)?)?)?;
        }
        Command::Uniform(c) => {
            experiments::cmd_uniform(&Experiment::from_config(load(&c.config, ExperimentKind::Uniform, c.seed, c.out)?)?)?;
        }
        Command::Dynamic(c) => {
            experiments::cmd_dynamic(&Experiment::from_config(load(&c.config, ExperimentKind::Dynamic, c.seed, c.out)?)?)?;
        }
        Command::Timeline(c) => {
            experiments::cmd_timeline(&Experiment::from_config(load(&c.config, ExperimentKind::Timeline, c.seed, c.out)?)?)?;
        }
        Command::Fit(c) => {
            experiments::cmd_fit(&Experiment::from_config(load(&c.config, ExperimentKind::Fit, c.seed, c.out)?)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
