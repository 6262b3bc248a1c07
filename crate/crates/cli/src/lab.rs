//! Experiment drivers behind the subcommands. Each `*_data` function is pure;
//! each `write_*` function lays its outputs out under one directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dlnsde::dynamics::{final_network, run, RunLog};
use dlnsde::model::{Network, Teacher, TeacherRecord};
use dlnsde::modes::{diffusion_peak, learned_time, LEARNED_FRACTION};
use dlnsde::noisecov::closed_form_covariance;
use dlnsde::numerics::RngStream;
use dlnsde::stationary::{
    density_vs_ensemble, ensemble_finals, ou_moments, stationary_density, DivergenceReport, EnsembleSpec,
    EnsembleStats, Histogram, StationaryDensity,
};

use crate::config::{check_sweep_values, Command, ExperimentConfig, SweepAxis};
use crate::LabError;

type Result<T> = std::result::Result<T, LabError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LabError + '_ {
    move |source| LabError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_log(path: &Path, log: &RunLog, hash: &str) -> Result<()> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf, Some(hash))?;
    write_atomic(path, &buf)
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let mut text = cfg.to_json();
    text.push('\n');
    write_atomic(&dir.join("config.json"), text.as_bytes())
}

fn run_rng(cfg: &ExperimentConfig, trajectory: u64) -> RngStream {
    RngStream::new(cfg.run_seed, trajectory)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub teacher: u64,
    pub init: u64,
    pub run: u64,
}

impl Seeds {
    fn of(cfg: &ExperimentConfig) -> Self {
        Self {
            teacher: cfg.teacher_seed,
            init: cfg.init_seed,
            run: cfg.run_seed,
        }
    }
}

/// Per-mode landmarks of one recorded trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub alpha: usize,
    pub s: f64,
    /// Theoretical diffusion maximiser.
    pub w_star: Option<f64>,
    /// First recorded time with `w ≥ 0.95 s`.
    pub learned_time: Option<f64>,
    /// Recorded time of the largest empirical diffusion.
    pub diffusion_peak_time: Option<f64>,
    pub diffusion_peak_value: Option<f64>,
    pub amplitude_at_peak: Option<f64>,
    pub final_amplitude: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub stepper: String,
    pub depth: usize,
    pub rows: usize,
    pub final_time: Option<f64>,
    pub final_loss: Option<f64>,
    pub modes: Vec<ModeSummary>,
    pub teacher: TeacherRecord,
}

pub fn mode_summaries(cfg: &ExperimentConfig, log: &RunLog) -> Result<Vec<ModeSummary>> {
    let times = log.times();
    (0..cfg.singular_values.len())
        .map(|a| {
            let s = cfg.singular_values[a];
            let w = log.column(&format!("w_{a}")).unwrap_or_default();
            let d = log.column(&format!("D_emp_{a}")).unwrap_or_default();
            let peak = d
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .max_by(|x, y| x.1.total_cmp(y.1))
                .map(|(i, _)| i);
            Ok(ModeSummary {
                alpha: a,
                s,
                w_star: diffusion_peak(&cfg.theory(a)?),
                learned_time: learned_time(&times, &w, s, LEARNED_FRACTION),
                diffusion_peak_time: peak.map(|i| times[i]),
                diffusion_peak_value: peak.map(|i| d[i]),
                amplitude_at_peak: peak.map(|i| w[i]),
                final_amplitude: w.last().copied(),
            })
        })
        .collect()
}

/// Result of one recorded trajectory.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub log: RunLog,
    pub summary: RunSummary,
}

fn setup(cfg: &ExperimentConfig) -> Result<(Teacher, Network)> {
    cfg.validate()?;
    let teacher = cfg.teacher()?;
    let net = cfg.initial_network(&teacher)?;
    Ok((teacher, net))
}

/// One trajectory on stream 0 of `run_seed`. Horizon 0 yields a header-only
/// log.
pub fn train_data(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    let (teacher, net0) = setup(cfg)?;
    let mut log = run(
        &net0,
        &teacher,
        &cfg.stepper_params(),
        cfg.horizon,
        cfg.record_every,
        &mut run_rng(cfg, 0),
    )?;
    if cfg.horizon == 0.0 {
        log.rows.clear();
    }
    let summary = RunSummary {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        seeds: Seeds::of(cfg),
        stepper: cfg.stepper.name().to_string(),
        depth: cfg.depth(),
        rows: log.len(),
        final_time: log.last_row().map(|r| r[0]),
        final_loss: log.last_row().map(|r| r[1]),
        modes: mode_summaries(cfg, &log)?,
        teacher: TeacherRecord::new(&teacher, Some(cfg.teacher_seed)),
    };
    Ok(TrainOutput { log, summary })
}

/// `config.json`, `run.csv`, `summary.json` and optionally `covariance.csv`
/// (closed-form one-sample Σ at the final network).
pub fn write_train(cfg: &ExperimentConfig, dir: &Path, dump_covariance: bool) -> Result<TrainOutput> {
    let out = train_data(cfg)?;
    let hash = cfg.hash();
    write_config(dir, cfg)?;
    write_log(&dir.join("run.csv"), &out.log, &hash)?;
    write_json(&dir.join("summary.json"), &out.summary)?;
    if dump_covariance {
        let (teacher, net0) = setup(cfg)?;
        let net = final_network(&net0, &teacher, &cfg.stepper_params(), cfg.horizon, &mut run_rng(cfg, 0))?;
        let sigma = closed_form_covariance(&net, &teacher, &teacher.label_covariance())?;
        let mut buf = Vec::new();
        writeln!(buf, "# config_hash: {hash}").expect("in-memory write");
        writeln!(buf, "# shape: {}x{}", sigma.full.nrows(), sigma.full.ncols()).expect("in-memory write");
        for i in 0..sigma.full.nrows() {
            let row: Vec<String> = sigma.full.row(i).iter().map(|x| format!("{x}")).collect();
            writeln!(buf, "{}", row.join(",")).expect("in-memory write");
        }
        write_atomic(&dir.join("covariance.csv"), &buf)?;
    }
    Ok(out)
}

/// Least-squares line with coefficient of determination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(LabError::Config("linear fit needs two or more paired points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if sxx == 0.0 {
        return Err(LabError::Config("linear fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(LinearFit { slope, intercept, r2 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    /// Regressor: `η` for lr, `1/b` for batch, the value itself otherwise.
    pub x: f64,
    /// Per-mode maximum of the empirical diffusion series, averaged over
    /// trajectories.
    pub max_diffusion: Vec<f64>,
    pub final_mean: Vec<f64>,
    /// Sample variance across trajectories; absent for a single trajectory.
    pub final_variance: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeFit {
    pub mode: usize,
    pub fit: LinearFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub name: String,
    pub config_hash: String,
    pub axis: SweepAxis,
    pub n_traj: usize,
    pub points: Vec<SweepPoint>,
    /// Max diffusion against `x`, for the lr and batch axes.
    pub fits: Vec<ModeFit>,
}

impl SweepReport {
    pub fn to_log(&self) -> RunLog {
        let r = self.points.first().map_or(0, |p| p.max_diffusion.len());
        let mut cols = vec!["value".to_string(), "x".to_string()];
        for prefix in ["max_D", "final_mean", "final_var"] {
            cols.extend((0..r).map(|a| format!("{prefix}_{a}")));
        }
        let mut log = RunLog::new(cols);
        for p in &self.points {
            let mut row = vec![p.value, p.x];
            row.extend(&p.max_diffusion);
            row.extend(&p.final_mean);
            match &p.final_variance {
                Some(v) => row.extend(v),
                None => row.extend(std::iter::repeat(f64::NAN).take(r)),
            }
            log.push(row);
        }
        log
    }
}

fn axis_regressor(axis: SweepAxis, value: f64) -> f64 {
    match axis {
        SweepAxis::Batch => 1.0 / value,
        _ => value,
    }
}

/// Point configs of a sweep. Along `dt` every run draws from the finest
/// step's Brownian path (`brownian_substeps = Δt / Δt_min`), so the runs
/// differ only by discretisation.
pub fn sweep_configs(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<ExperimentConfig>> {
    check_sweep_values(values)?;
    let finest = values.iter().copied().fold(f64::INFINITY, f64::min);
    values
        .iter()
        .map(|&v| {
            let mut point = cfg.with_axis(axis, v)?;
            if axis == SweepAxis::Dt {
                let ratio = v / finest;
                if (ratio - ratio.round()).abs() > 1e-9 * ratio {
                    return Err(LabError::Config(format!(
                        "dt value {v} is not an integer multiple of the finest step {finest}"
                    )));
                }
                point.brownian_substeps = cfg.brownian_substeps * ratio.round() as u32;
            }
            Ok(point)
        })
        .collect()
}

/// Every point runs `n_traj` recorded trajectories on streams `0..n_traj`,
/// so points share their random numbers.
pub fn sweep_data(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<SweepReport> {
    let points_cfg = sweep_configs(cfg, axis, values)?;
    let (teacher0, _) = setup(cfg)?;
    let r = teacher0.rank();
    let jobs: Vec<(usize, u64)> = (0..points_cfg.len())
        .flat_map(|i| (0..cfg.n_traj as u64).map(move |k| (i, k)))
        .collect();
    let results: Vec<(Vec<f64>, Vec<f64>)> = jobs
        .par_iter()
        .map(|&(i, k)| {
            let pc = &points_cfg[i];
            let (teacher, net0) = setup(pc)?;
            let log = run(&net0, &teacher, &pc.stepper_params(), pc.horizon, pc.record_every, &mut run_rng(pc, k))?;
            let max_d = (0..r)
                .map(|a| {
                    log.column(&format!("D_emp_{a}"))
                        .unwrap_or_default()
                        .into_iter()
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            let last = log.last_row().expect("run records step 0");
            let w = (0..r).map(|a| last[2 + a]).collect();
            Ok((max_d, w))
        })
        .collect::<Result<_>>()?;

    let n = cfg.n_traj;
    let points = points_cfg
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let chunk = &results[i * n..(i + 1) * n];
            let mean_of = |f: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> f64| chunk.iter().map(f).sum::<f64>() / n as f64;
            let max_diffusion = (0..r).map(|a| mean_of(&|t| t.0[a])).collect();
            let final_mean: Vec<f64> = (0..r).map(|a| mean_of(&|t| t.1[a])).collect();
            let final_variance = (n >= 2).then(|| {
                (0..r)
                    .map(|a| {
                        chunk.iter().map(|t| (t.1[a] - final_mean[a]).powi(2)).sum::<f64>() / (n - 1) as f64
                    })
                    .collect()
            });
            SweepPoint {
                value: values[i],
                x: axis_regressor(axis, values[i]),
                max_diffusion,
                final_mean,
                final_variance,
            }
        })
        .collect::<Vec<_>>();

    let fits = if matches!(axis, SweepAxis::Lr | SweepAxis::Batch) {
        let x: Vec<f64> = points.iter().map(|p| p.x).collect();
        (0..r)
            .map(|a| {
                let y: Vec<f64> = points.iter().map(|p| p.max_diffusion[a]).collect();
                Ok(ModeFit {
                    mode: a,
                    fit: linear_fit(&x, &y)?,
                })
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(SweepReport {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        axis,
        n_traj: n,
        points,
        fits,
    })
}

/// `config.json`, `sweep.csv` and `summary.json`.
pub fn write_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64], dir: &Path) -> Result<SweepReport> {
    let report = sweep_data(cfg, axis, values)?;
    let mut stored = cfg.clone();
    stored.command = Command::Sweep;
    stored.sweep_axis = Some(axis);
    stored.sweep_values = values.to_vec();
    let hash = stored.hash();
    write_config(dir, &stored)?;
    write_log(&dir.join("sweep.csv"), &report.to_log(), &hash)?;
    write_json(&dir.join("summary.json"), &SweepReport { config_hash: hash, ..report.clone() })?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleOutput {
    pub name: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub horizon: f64,
    pub stats: EnsembleStats,
}

fn histograms(cfg: &ExperimentConfig, stats: &mut EnsembleStats) {
    if let Some(bins) = cfg.histogram_bins {
        stats.histograms = stats
            .finals
            .iter()
            .map(|x| {
                let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                Histogram::fixed(x, lo, hi, bins)
            })
            .collect();
    }
}

/// Final amplitudes of `n_traj ≥ 2` trajectories sharing the teacher and the
/// initial network; trajectory `k` uses stream `k` of `run_seed`.
pub fn ensemble_data(cfg: &ExperimentConfig, n_traj: usize) -> Result<EnsembleOutput> {
    let (teacher, net0) = setup(cfg)?;
    let params = cfg.stepper_params();
    let spec = EnsembleSpec {
        net0: &net0,
        teacher: &teacher,
        params: &params,
        horizon: cfg.horizon,
        seed: cfg.run_seed,
        stream_base: 0,
    };
    let finals = ensemble_finals(&spec, n_traj)?;
    let mut stats = EnsembleStats::from_trajectories(&finals)?;
    histograms(cfg, &mut stats);
    Ok(EnsembleOutput {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        seeds: Seeds::of(cfg),
        horizon: cfg.horizon,
        stats,
    })
}

fn finals_log(stats: &EnsembleStats) -> RunLog {
    let r = stats.finals.len();
    let mut cols = vec!["traj".to_string()];
    cols.extend((0..r).map(|a| format!("w_{a}")));
    let mut log = RunLog::new(cols);
    for k in 0..stats.n_traj {
        let mut row = vec![k as f64];
        row.extend(stats.finals.iter().map(|x| x[k]));
        log.push(row);
    }
    log
}

fn write_ensemble_files(dir: &Path, out: &EnsembleOutput) -> Result<()> {
    write_log(&dir.join("finals.csv"), &finals_log(&out.stats), &out.config_hash)?;
    for (a, h) in out.stats.histograms.iter().enumerate() {
        let mut buf = Vec::new();
        h.write_csv(&mut buf, Some(&out.config_hash))?;
        write_atomic(&dir.join(format!("hist_w_{a}.csv")), &buf)?;
    }
    write_json(&dir.join("ensemble.json"), out)
}

/// With one trajectory this is exactly `write_train`; otherwise
/// `config.json`, `finals.csv`, `hist_w_α.csv`, `ensemble.json`.
pub fn write_ensemble(cfg: &ExperimentConfig, n_traj: usize, dir: &Path) -> Result<Option<EnsembleOutput>> {
    if n_traj == 1 {
        write_train(cfg, dir, false)?;
        return Ok(None);
    }
    let out = ensemble_data(cfg, n_traj)?;
    write_config(dir, cfg)?;
    write_ensemble_files(dir, &out)?;
    Ok(Some(out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryMode {
    pub alpha: usize,
    pub s: f64,
    pub mean: f64,
    pub variance: f64,
    pub argmax: f64,
    pub ou_mean_offset: f64,
    pub ou_variance: f64,
    pub divergence: Option<DivergenceReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StationaryReport {
    pub name: String,
    pub config_hash: String,
    pub modes: Vec<StationaryMode>,
}

#[derive(Clone, Debug)]
pub struct StationaryOutput {
    pub densities: Vec<StationaryDensity>,
    pub report: StationaryReport,
    pub ensemble: Option<EnsembleOutput>,
}

/// Quadrature density per mode on `[10⁻³ s, 2 s]`; with `n_traj ≥ 2` the
/// configured dynamics are also run as an ensemble and compared.
pub fn stationary_data(cfg: &ExperimentConfig) -> Result<StationaryOutput> {
    cfg.validate()?;
    let r = cfg.singular_values.len();
    let densities = (0..r)
        .map(|a| {
            let th = cfg.theory(a)?;
            Ok(stationary_density(&th, 1e-3 * th.s, 2.0 * th.s, cfg.stationary_grid)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let ensemble = if cfg.n_traj >= 2 {
        Some(ensemble_data(cfg, cfg.n_traj)?)
    } else {
        None
    };
    let modes = densities
        .iter()
        .enumerate()
        .map(|(a, d)| {
            let (ou_mean_offset, ou_variance) = ou_moments(&d.params)?;
            let divergence = match &ensemble {
                Some(e) => Some(density_vs_ensemble(d, &e.stats, a)?),
                None => None,
            };
            Ok(StationaryMode {
                alpha: a,
                s: d.params.s,
                mean: d.mean(),
                variance: d.variance(),
                argmax: d.argmax(),
                ou_mean_offset,
                ou_variance,
                divergence,
            })
        })
        .collect::<Result<_>>()?;
    Ok(StationaryOutput {
        densities,
        report: StationaryReport {
            name: cfg.name.clone(),
            config_hash: cfg.hash(),
            modes,
        },
        ensemble,
    })
}

/// `config.json`, `density_w_α.csv`, `summary.json`, plus the ensemble files
/// when an ensemble was run.
pub fn write_stationary(cfg: &ExperimentConfig, dir: &Path) -> Result<StationaryOutput> {
    let out = stationary_data(cfg)?;
    let hash = cfg.hash();
    write_config(dir, cfg)?;
    for (a, d) in out.densities.iter().enumerate() {
        let mut buf = Vec::new();
        d.write_csv(&mut buf, Some(&hash))?;
        write_atomic(&dir.join(format!("density_w_{a}.csv")), &buf)?;
    }
    write_json(&dir.join("summary.json"), &out.report)?;
    if let Some(e) = &out.ensemble {
        write_ensemble_files(dir, e)?;
    }
    Ok(out)
}

/// Runs a config according to its `command`.
pub fn execute(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    match cfg.command {
        Command::Train => write_train(cfg, dir, false).map(|_| ()),
        Command::Ensemble => write_ensemble(cfg, cfg.n_traj, dir).map(|_| ()),
        Command::Stationary => write_stationary(cfg, dir).map(|_| ()),
        Command::Sweep => {
            let axis = cfg.sweep_axis.ok_or_else(|| LabError::Config("sweep needs sweep_axis".into()))?;
            write_sweep(cfg, axis, &cfg.sweep_values, dir).map(|_| ())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub command: Command,
    pub dir: PathBuf,
    pub config_hash: String,
}

/// Config files of a directory in name order, or the single given file.
pub fn config_paths(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(LabError::Config(format!("no .json configs in {}", path.display())));
    }
    Ok(out)
}

/// Runs every config into `out/<name>/` and writes `out/index.json`.
pub fn figures_data(configs: &Path, out: &Path) -> Result<Vec<IndexEntry>> {
    let cfgs = config_paths(configs)?
        .iter()
        .map(|p| ExperimentConfig::load(p))
        .collect::<Result<Vec<_>>>()?;
    let mut index = Vec::new();
    for cfg in &cfgs {
        let dir = out.join(&cfg.name);
        execute(cfg, &dir)?;
        index.push(IndexEntry {
            name: cfg.name.clone(),
            command: cfg.command,
            dir: PathBuf::from(&cfg.name),
            config_hash: cfg.hash(),
        });
    }
    write_json(&out.join("index.json"), &index)?;
    Ok(index)
}
