use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dlnlab::config::{check_sweep_values, ExperimentConfig, SweepAxis};
use dlnlab::lab;
use dlnlab::oracles::validate_all;
use dlnlab::LabError;

#[derive(Parser)]
#[command(name = "dlnlab", version, about = "Deep linear network SGD/SDE experiments")]
struct Cli {
    /// Worker threads for ensembles and sweeps (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,

    /// Output directory; defaults to the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Overrides the config's `run_seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf), LabError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.run_seed = seed;
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// One recorded trajectory: config.json, run.csv, summary.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also write the closed-form noise covariance at the final state.
        #[arg(long)]
        dump_covariance: bool,
    },
    /// Max-diffusion and end-of-training summaries along one axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// lr, batch, dt or width; defaults to the config's sweep_axis.
        #[arg(long)]
        axis: Option<SweepAxis>,
        /// Comma-separated axis values; defaults to the config's sweep_values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// End-of-training amplitudes of independent trajectories.
    Ensemble {
        #[command(flatten)]
        common: Common,
        /// Defaults to the config's n_traj.
        #[arg(long)]
        n_traj: Option<usize>,
    },
    /// Quadrature stationary densities, OU moments and, with n_traj >= 2,
    /// the ensemble comparison.
    Stationary {
        #[command(flatten)]
        common: Common,
    },
    /// Run the oracle suite; exits 2 on any failure.
    Validate {
        /// Also write validate.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every config of a directory (or one file) into OUT/<name>/.
    FiguresData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides every config's run_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn dispatch(cmd: Cmd) -> Result<(), LabError> {
    match cmd {
        Cmd::Train { common, dump_covariance } => {
            let (cfg, out) = common.load()?;
            let run = lab::write_train(&cfg, &out, dump_covariance)?;
            println!("{} rows -> {}", run.log.len(), out.join("run.csv").display());
        }
        Cmd::Sweep { common, axis, values } => {
            let (cfg, out) = common.load()?;
            let axis = axis
                .or(cfg.sweep_axis)
                .ok_or_else(|| LabError::Config("no sweep axis given".into()))?;
            let values = values.unwrap_or_else(|| cfg.sweep_values.clone());
            check_sweep_values(&values)?;
            let report = lab::write_sweep(&cfg, axis, &values, &out)?;
            for f in &report.fits {
                println!("mode {}: slope {:.4e}, R^2 {:.5}", f.mode, f.fit.slope, f.fit.r2);
            }
            println!("-> {}", out.join("sweep.csv").display());
        }
        Cmd::Ensemble { common, n_traj } => {
            let (cfg, out) = common.load()?;
            let n = n_traj.unwrap_or(cfg.n_traj);
            if n == 0 {
                return Err(LabError::Config("n_traj must be >= 1".into()));
            }
            if let Some(e) = lab::write_ensemble(&cfg, n, &out)? {
                for (a, (m, v)) in e.stats.mean.iter().zip(&e.stats.variance).enumerate() {
                    println!("w_{a}: mean {m:.6}, variance {v:.3e}");
                }
            }
            println!("-> {}", out.display());
        }
        Cmd::Stationary { common } => {
            let (cfg, out) = common.load()?;
            let res = lab::write_stationary(&cfg, &out)?;
            for m in &res.report.modes {
                println!(
                    "w_{}: mean {:.6}, variance {:.3e}, OU variance {:.3e}",
                    m.alpha, m.mean, m.variance, m.ou_variance
                );
            }
            println!("-> {}", out.display());
        }
        Cmd::Validate { out } => {
            let results = validate_all()?;
            for r in &results {
                println!("{}", r.line());
            }
            if let Some(dir) = out {
                let mut text = serde_json::to_string_pretty(&results).expect("report serializes");
                text.push('\n');
                lab::write_atomic(&dir.join("validate.json"), text.as_bytes())?;
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(LabError::Validation(format!("{failed} oracle(s) failed")));
            }
        }
        Cmd::FiguresData { config, out, seed } => {
            let configs = override_seed(&config, &out, seed)?;
            let index = lab::figures_data(&configs, &out)?;
            for e in &index {
                println!("{} ({:?}) -> {}", e.name, e.command, out.join(&e.dir).display());
            }
        }
    }
    Ok(())
}

/// With a seed override, rewritten configs go to `OUT/.configs/`.
fn override_seed(config: &Path, out: &Path, seed: Option<u64>) -> Result<PathBuf, LabError> {
    let Some(seed) = seed else {
        return Ok(config.to_path_buf());
    };
    let staged = out.join(".configs");
    for path in lab::config_paths(config)? {
        let mut cfg = ExperimentConfig::load(&path)?;
        cfg.run_seed = seed;
        let name = path.file_name().expect("config file has a name");
        lab::write_atomic(&staged.join(name), cfg.to_json().as_bytes())?;
    }
    Ok(staged)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
