//! Stationary modewise laws: detailed-balance density by quadrature, OU
//! linearisation around `s`, ensemble end-of-training statistics and the
//! distance between the two.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{final_amplitudes, StepperParams};
use crate::error::{Error, Result};
use crate::model::{Network, Teacher};
use crate::modes::BalancedTheory;
use crate::numerics::RngStream;

/// Normalised density on a grid.
#[derive(Clone, Debug)]
pub struct StationaryDensity {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub normalized: bool,
    pub params: BalancedTheory,
    cdf: Vec<f64>,
}

fn cumulative_trapezoid(x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    out.push(0.0);
    for i in 1..x.len() {
        let prev = out[i - 1];
        out.push(prev + 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]));
    }
    out
}

/// `p(w) ∝ D(w)⁻¹ exp(∫_{w_min}^{w} 2μ/D)` on a uniform grid, with
/// `μ = μ^grad + μ^Ito` in the variant carried by `th`.
pub fn stationary_density(th: &BalancedTheory, w_min: f64, w_max: f64, n_grid: usize) -> Result<StationaryDensity> {
    if th.sigma_q == 0.0 {
        return Err(Error::DiracCollapse);
    }
    if !(w_min > 0.0 && w_max > w_min) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < w_min < w_max, got {w_min} and {w_max}"
        )));
    }
    if n_grid < 100 {
        return Err(Error::InvalidArgument(format!("n_grid must be >= 100, got {n_grid}")));
    }
    let grid: Vec<f64> = (0..n_grid)
        .map(|i| w_min + (w_max - w_min) * i as f64 / (n_grid - 1) as f64)
        .collect();
    let mut diffusion = Vec::with_capacity(n_grid);
    let mut ratio = Vec::with_capacity(n_grid);
    for &w in &grid {
        let d = th.diffusion(w)?;
        diffusion.push(d);
        ratio.push(2.0 * th.drift(w)? / d);
    }
    let integral = cumulative_trapezoid(&grid, &ratio);
    let log_p: Vec<f64> = diffusion
        .iter()
        .zip(&integral)
        .map(|(d, i)| i - d.ln())
        .collect();
    let max = log_p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = log_p.iter().map(|l| (l - max).exp()).collect();
    let total = *cumulative_trapezoid(&grid, &raw).last().expect("non-empty grid");
    let density: Vec<f64> = raw.iter().map(|p| p / total).collect();
    let cdf = cumulative_trapezoid(&grid, &density);
    Ok(StationaryDensity {
        grid,
        density,
        normalized: true,
        params: *th,
        cdf,
    })
}

impl StationaryDensity {
    /// Trapezoidal `∫ p`.
    pub fn mass(&self) -> f64 {
        *self.cdf.last().expect("non-empty grid")
    }

    fn moment(&self, f: impl Fn(f64) -> f64) -> f64 {
        let y: Vec<f64> = self.grid.iter().zip(&self.density).map(|(&w, &p)| f(w) * p).collect();
        *cumulative_trapezoid(&self.grid, &y).last().expect("non-empty grid")
    }

    pub fn mean(&self) -> f64 {
        self.moment(|w| w)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.moment(|w| (w - m) * (w - m))
    }

    pub fn argmax(&self) -> f64 {
        let i = self
            .density
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("non-empty grid");
        self.grid[i]
    }

    pub fn cell_width(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }

    /// Piecewise-linear CDF, clamped to `[0, 1]` outside the grid.
    pub fn cdf(&self, w: f64) -> f64 {
        let n = self.grid.len();
        if w <= self.grid[0] {
            return 0.0;
        }
        if w >= self.grid[n - 1] {
            return 1.0;
        }
        let i = self.grid.partition_point(|&g| g <= w) - 1;
        let frac = (w - self.grid[i]) / (self.grid[i + 1] - self.grid[i]);
        (self.cdf[i] + frac * (self.cdf[i + 1] - self.cdf[i])) / self.mass()
    }

    fn inverse_cdf(&self, u: f64) -> f64 {
        let target = u * self.mass();
        let i = self.cdf.partition_point(|&c| c < target).clamp(1, self.grid.len() - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let frac = if c1 > c0 { (target - c0) / (c1 - c0) } else { 0.0 };
        self.grid[i - 1] + frac * (self.grid[i] - self.grid[i - 1])
    }

    /// Inverse-CDF draws.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Vec<f64> {
        (0..n).map(|_| self.inverse_cdf(rng.uniform())).collect()
    }

    /// `grid,density` CSV.
    pub fn write_csv<W: Write>(&self, mut out: W, config_hash: Option<&str>) -> Result<()> {
        if let Some(hash) = config_hash {
            writeln!(out, "# config_hash: {hash}")?;
        }
        writeln!(out, "grid,density")?;
        for (w, p) in self.grid.iter().zip(&self.density) {
            writeln!(out, "{w},{p}")?;
        }
        Ok(())
    }
}

/// Linearisation around `s`: mean offset `−μ(s)/μ'(s)` with the leading
/// slope `μ'(s) ≈ −L s^{2(L−1)/L}`, and variance `(βL/2) σ_q² s^{2(L−1)/L}`.
pub fn ou_moments(th: &BalancedTheory) -> Result<(f64, f64)> {
    let l = th.depth as f64;
    let slope = l * th.s.powf(2.0 * (l - 1.0) / l);
    let mean_offset = th.ito_drift(th.s)? / slope;
    let variance = 0.5 * th.beta * l * th.sigma_q * th.sigma_q * th.s.powf(2.0 * (l - 1.0) / l);
    Ok((mean_offset, variance))
}

/// Histogram as bin edges plus counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Freedman–Diaconis width `2 IQR n^{-1/3}`; one bin when the sample is
    /// degenerate, at most `max_bins` bins.
    pub fn freedman_diaconis(samples: &[f64], max_bins: usize) -> Self {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let (lo, hi) = (sorted[0], sorted[n - 1]);
        let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
        let bins = if hi > lo && iqr > 0.0 {
            let width = 2.0 * iqr / (n as f64).cbrt();
            (((hi - lo) / width).ceil() as usize).clamp(1, max_bins.max(1))
        } else {
            1
        };
        Self::fixed(&sorted, lo, hi, bins)
    }

    /// `bins` equal bins over `[lo, hi]`; samples outside are dropped.
    pub fn fixed(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        let edges: Vec<f64> = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for &x in samples {
            if x < lo || x > hi {
                continue;
            }
            let i = (((x - lo) / (hi - lo)) * bins as f64).floor() as usize;
            counts[i.min(bins - 1)] += 1;
        }
        Self { edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `bin_left,bin_right,count` CSV.
    pub fn write_csv<W: Write>(&self, mut out: W, config_hash: Option<&str>) -> Result<()> {
        if let Some(hash) = config_hash {
            writeln!(out, "# config_hash: {hash}")?;
        }
        writeln!(out, "bin_left,bin_right,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{},{},{}", self.edges[i], self.edges[i + 1], c)?;
        }
        Ok(())
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// End-of-training marginals per teacher mode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub n_traj: usize,
    /// `finals[α][k]` is mode `α` of trajectory `k`.
    pub finals: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Unbiased sample variance.
    pub variance: Vec<f64>,
    pub histograms: Vec<Histogram>,
}

impl EnsembleStats {
    /// Statistics from per-trajectory final amplitude vectors.
    pub fn from_trajectories(per_traj: &[Vec<f64>]) -> Result<Self> {
        let n = per_traj.len();
        if n < 2 {
            return Err(Error::InvalidArgument("ensemble needs at least 2 trajectories".into()));
        }
        let modes = per_traj[0].len();
        let finals: Vec<Vec<f64>> = (0..modes).map(|a| per_traj.iter().map(|t| t[a]).collect()).collect();
        let mean: Vec<f64> = finals.iter().map(|x| x.iter().sum::<f64>() / n as f64).collect();
        let variance = finals
            .iter()
            .zip(&mean)
            .map(|(x, m)| x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64)
            .collect();
        let histograms = finals.iter().map(|x| Histogram::freedman_diaconis(x, 200)).collect();
        Ok(Self {
            n_traj: n,
            finals,
            mean,
            variance,
            histograms,
        })
    }
}

/// One ensemble: shared initial network and teacher, trajectory `k` driven
/// by stream `stream_base + k` of `seed`.
#[derive(Clone, Debug)]
pub struct EnsembleSpec<'a> {
    pub net0: &'a Network,
    pub teacher: &'a Teacher,
    pub params: &'a StepperParams,
    /// Final time at which amplitudes are read.
    pub horizon: f64,
    pub seed: u64,
    pub stream_base: u64,
}

/// Runs `n_traj` trajectories in parallel and collects their final
/// teacher-mode amplitudes.
pub fn ensemble_final_stats(spec: &EnsembleSpec, n_traj: usize) -> Result<EnsembleStats> {
    if n_traj < 2 {
        return Err(Error::InvalidArgument("ensemble needs at least 2 trajectories".into()));
    }
    let per_traj = ensemble_finals(spec, n_traj)?;
    EnsembleStats::from_trajectories(&per_traj)
}

/// Final amplitudes of every trajectory, in trajectory order.
pub fn ensemble_finals(spec: &EnsembleSpec, n_traj: usize) -> Result<Vec<Vec<f64>>> {
    (0..n_traj as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = RngStream::new(spec.seed, spec.stream_base + k);
            final_amplitudes(spec.net0, spec.teacher, spec.params, spec.horizon, &mut rng)
        })
        .collect()
}

/// Kolmogorov–Smirnov distance and moment gaps between a quadrature density
/// and one ensemble mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub mode: usize,
    pub n: usize,
    pub ks: f64,
    /// `1.358 / √n`
    pub ks_critical_95: f64,
    pub mean_gap: f64,
    pub variance_gap: f64,
}

pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

pub fn density_vs_ensemble(dist: &StationaryDensity, stats: &EnsembleStats, mode: usize) -> Result<DivergenceReport> {
    let samples = stats
        .finals
        .get(mode)
        .ok_or_else(|| Error::InvalidArgument(format!("ensemble has no mode {mode}")))?;
    let n = samples.len();
    Ok(DivergenceReport {
        mode,
        n,
        ks: ks_distance(samples, |w| dist.cdf(w)),
        ks_critical_95: 1.358 / (n as f64).sqrt(),
        mean_gap: stats.mean[mode] - dist.mean(),
        variance_gap: stats.variance[mode] - dist.variance(),
    })
}
