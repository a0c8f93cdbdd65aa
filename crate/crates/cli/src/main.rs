use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gradvar::harness::{build_datasets, demo_fig1, plot_csv, run_sweep, run_to_dir, DemoConfig, ExperimentConfig, SweepSpec};
use gradvar::{write_atomic, Error, Result};

/// Gradient variance experiments: trajectories, sweeps, plots.
#[derive(Parser, Debug)]
#[command(name = "gradvar", version)]
struct Cli {
    /// Worker threads for estimator draws and sweep trials (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Root for output directories when --out is not given.
    #[arg(long, global = true, env = "GRADVAR_OUT", default_value = "runs")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the configured datasets and save them.
    GenData(Common),
    /// Train one SGD trajectory and measure every estimator's variance.
    Run(Common),
    /// Run a grid of trajectories and aggregate their tail statistics.
    Sweep(Common),
    /// Two-blob clustering demo, one SVG per gradient-descent step.
    DemoFig1(Common),
    /// Render SVG plots from a reports.csv or sweep.csv.
    Plot {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// An unreadable config file is a configuration problem, not an I/O one.
fn as_config(e: Error) -> Error {
    match e {
        Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
        other => other,
    }
}

fn experiment(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).map_err(as_config)?,
        None => ExperimentConfig::rf_default(0),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(c: &Common, configured: Option<&Path>, root: &Path, name: String) -> PathBuf {
    c.out
        .clone()
        .or_else(|| configured.map(Path::to_path_buf))
        .unwrap_or_else(|| root.join(name))
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => {
            let cfg = experiment(c)?;
            let dir = out_dir(c, cfg.output_dir.as_deref(), &cli.out_root, format!("data-seed{}", cfg.seed));
            let (train, test, _) = build_datasets(&cfg)?;
            train.save(&dir.join("train.gvd"))?;
            if let Some(t) = test {
                t.save(&dir.join("test.gvd"))?;
            }
            write_atomic(&dir.join("config.json"), cfg.to_json().as_bytes())?;
            log::info!("wrote {} training examples to {}", train.len(), dir.display());
        }
        Command::Run(c) => {
            let cfg = experiment(c)?;
            let dir = out_dir(c, cfg.output_dir.as_deref(), &cli.out_root, format!("run-seed{}", cfg.seed));
            let t = run_to_dir(&cfg, &dir)?;
            log::info!("{} measurements written to {}", t.measurements.len(), dir.display());
        }
        Command::Sweep(c) => {
            let path = c.config.as_ref().ok_or_else(|| Error::Config("sweep needs --config".into()))?;
            let mut spec = SweepSpec::load(path).map_err(as_config)?;
            if let Some(s) = c.seed {
                spec.seeds = vec![s];
            }
            let dir = out_dir(c, spec.base.output_dir.as_deref(), &cli.out_root, "sweep".into());
            let result = run_sweep(&spec)?;
            result.write(&dir)?;
            let failed = result.trials.iter().filter(|t| t.error.is_some()).count();
            if failed > 0 {
                log::warn!("{failed} of {} trials failed", result.trials.len());
            }
            log::info!("sweep written to {}", dir.display());
        }
        Command::DemoFig1(c) => {
            let mut cfg = match &c.config {
                Some(p) => DemoConfig::load(p)?,
                None => DemoConfig::default(),
            };
            if let Some(s) = c.seed {
                cfg.seed = s;
            }
            let dir = out_dir(c, None, &cli.out_root, "demo-fig1".into());
            demo_fig1(&cfg)?.write(&dir)?;
            log::info!("demo frames written to {}", dir.display());
        }
        Command::Plot { input, out } => {
            let text = std::fs::read_to_string(input).map_err(|e| Error::Config(format!("{}: {e}", input.display())))?;
            let dir = out
                .clone()
                .unwrap_or_else(|| input.parent().unwrap_or(Path::new(".")).join("plots"));
            for (name, svg) in plot_csv(&text)? {
                write_atomic(&dir.join(name), svg.as_bytes())?;
            }
            log::info!("plots written to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            log::error!("cannot size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_config() {
                2
            } else if e.is_numerical() {
                3
            } else {
                1
            })
        }
    }
}
