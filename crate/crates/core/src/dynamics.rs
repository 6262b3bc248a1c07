//! Steppers (GD, online/offline SGD, isotropic Langevin, anisotropic EM,
//! modewise EM), the recording training loop and the balance diagnostics.
//!
//! Time axis: discrete optimizers map step `k` to `t = η k`, the EM
//! simulators to `t = Δt k`.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    batch_gradient_with, gradient_from_residual, sample_batch, Dataset, Network, Partials, Teacher,
};
use crate::modes::{
    fast_mode_diffusion_with, theory_diffusion, theory_grad_drift, theory_ito_drift, BalancedTheory,
    ItoVariant,
};
use crate::noisecov::{noise_factor_with_root, NoiseFactor};
use crate::numerics::{gaussian_matrix, identity, singular_values, Mat, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepperKind {
    GradientDescent,
    OnlineSgd,
    OfflineSgd,
    IsotropicLangevin,
    AnisotropicEm,
    ModewiseEm,
}

impl StepperKind {
    pub fn is_em(self) -> bool {
        matches!(self, Self::IsotropicLangevin | Self::AnisotropicEm | Self::ModewiseEm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::GradientDescent => "gradient_descent",
            Self::OnlineSgd => "online_sgd",
            Self::OfflineSgd => "offline_sgd",
            Self::IsotropicLangevin => "isotropic_langevin",
            Self::AnisotropicEm => "anisotropic_em",
            Self::ModewiseEm => "modewise_em",
        }
    }
}

impl std::str::FromStr for StepperKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidArgument(format!("unknown stepper kind {s:?}")))
    }
}

/// Optimizer choice and its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepperParams {
    pub kind: StepperKind,
    pub eta: f64,
    pub batch_size: usize,
    /// EM time step.
    pub dt: f64,
    /// Isotropic Langevin noise is `N(0, σ_iso² η Δt I)`.
    pub sigma_iso: f64,
    /// Anisotropic EM recomputes its noise factor every this many steps.
    pub refresh_interval: u64,
    /// Stored sample size for offline SGD.
    pub dataset_size: Option<usize>,
    /// Each EM Gaussian is the normalised sum of this many finer draws, so
    /// runs at `Δt` and `kΔt` with `k`-fold substeps share Brownian paths.
    pub brownian_substeps: u32,
    pub ito_variant: ItoVariant,
}

impl StepperParams {
    pub fn new(kind: StepperKind, eta: f64) -> Self {
        Self {
            kind,
            eta,
            batch_size: 1,
            dt: 1e-4,
            sigma_iso: 1.0,
            refresh_interval: 1,
            dataset_size: None,
            brownian_substeps: 1,
            ito_variant: ItoVariant::SquaredNoise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidArgument(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if self.kind.is_em() && !(self.dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.refresh_interval == 0 || self.brownian_substeps == 0 {
            return Err(Error::InvalidArgument(
                "refresh interval and Brownian substeps must be >= 1".into(),
            ));
        }
        if self.kind == StepperKind::OfflineSgd {
            match self.dataset_size {
                Some(n) if n >= self.batch_size => {}
                _ => {
                    return Err(Error::InvalidArgument(
                        "offline SGD needs a dataset size >= batch size".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Continuous time per step.
    pub fn step_time(&self) -> f64 {
        if self.kind.is_em() {
            self.dt
        } else {
            self.eta
        }
    }

    /// `β = η / b`.
    pub fn beta(&self) -> f64 {
        self.eta / self.batch_size as f64
    }
}

fn axpy(w: &mut Mat, scale: f64, g: &Mat) {
    for (a, b) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *a += scale * b;
    }
}

fn axpy_layers(net: &mut Network, grads: &[Mat], scale: f64) {
    for (w, g) in net.layers_mut().iter_mut().zip(grads) {
        axpy(w, scale, g);
    }
}

fn gradient(net: &Network, teacher: &Teacher) -> Vec<Mat> {
    let parts = Partials::new(net);
    let delta = &teacher.m - parts.end_to_end(net);
    gradient_from_residual(&parts, &delta)
}

/// `W_l ← W_l − η G_l` with the population gradient.
pub fn gd_step(net: &Network, teacher: &Teacher, eta: f64) -> Network {
    let mut out = net.clone();
    axpy_layers(&mut out, &gradient(net, teacher), -eta);
    out
}

/// Online SGD: fresh batch of size `b` from the teacher distribution.
pub fn sgd_step(net: &Network, teacher: &Teacher, eta: f64, b: usize, rng: &mut RngStream) -> Network {
    let batch = sample_batch(teacher, b, rng);
    let parts = Partials::new(net);
    let mut out = net.clone();
    axpy_layers(&mut out, &batch_gradient_with(&parts, net, &batch), -eta);
    out
}

/// Draws batches without replacement from a stored dataset, reshuffling
/// once fewer than `b` unused samples remain.
#[derive(Clone, Debug)]
pub struct OfflineSampler {
    pub dataset: Dataset,
    order: Vec<usize>,
    cursor: usize,
}

impl OfflineSampler {
    pub fn new(dataset: Dataset, rng: &mut RngStream) -> Self {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(rng);
        Self {
            dataset,
            order,
            cursor: 0,
        }
    }

    pub fn next_batch(&mut self, b: usize, rng: &mut RngStream) -> crate::model::Batch {
        if self.cursor + b > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let idx = &self.order[self.cursor..self.cursor + b];
        self.cursor += b;
        self.dataset.samples.select(idx)
    }
}

/// Offline SGD step on a batch drawn by `sampler`.
pub fn offline_sgd_step(net: &Network, sampler: &mut OfflineSampler, eta: f64, b: usize, rng: &mut RngStream) -> Network {
    let batch = sampler.next_batch(b, rng);
    let parts = Partials::new(net);
    let mut out = net.clone();
    axpy_layers(&mut out, &batch_gradient_with(&parts, net, &batch), -eta);
    out
}

/// Standard Gaussians of the given shapes, each the normalised sum of
/// `substeps` draws taken in the same order a fine-step run would take them.
fn coupled_gaussians(shapes: &[(usize, usize)], substeps: u32, rng: &mut RngStream) -> Vec<Mat> {
    let mut out: Vec<Mat> = shapes.iter().map(|&(r, c)| gaussian_matrix(r, c, rng)).collect();
    if substeps == 1 {
        return out;
    }
    for _ in 1..substeps {
        for (acc, &(r, c)) in out.iter_mut().zip(shapes) {
            *acc += gaussian_matrix(r, c, rng);
        }
    }
    let norm = 1.0 / (substeps as f64).sqrt();
    for m in &mut out {
        *m *= norm;
    }
    out
}

fn coupled_scalar(substeps: u32, rng: &mut RngStream) -> f64 {
    let mut sum = 0.0;
    for _ in 0..substeps {
        sum += rng.normal();
    }
    sum / (substeps as f64).sqrt()
}

/// Euler–Maruyama with gradient drift and `N(0, σ_iso² η Δt I)` noise.
pub fn isotropic_langevin_step(
    net: &Network,
    teacher: &Teacher,
    eta: f64,
    dt: f64,
    sigma_iso: f64,
    rng: &mut RngStream,
) -> Network {
    let mut out = net.clone();
    isotropic_in_place(&mut out, teacher, eta, dt, sigma_iso, 1, rng);
    out
}

fn isotropic_in_place(
    net: &mut Network,
    teacher: &Teacher,
    eta: f64,
    dt: f64,
    sigma_iso: f64,
    substeps: u32,
    rng: &mut RngStream,
) {
    let g = gradient(net, teacher);
    axpy_layers(net, &g, -dt);
    let scale = sigma_iso * (eta * dt).sqrt();
    let shapes: Vec<(usize, usize)> = net.layers().iter().map(|w| w.shape()).collect();
    let noise = coupled_gaussians(&shapes, substeps, rng);
    axpy_layers(net, &noise, scale);
}

/// Anisotropic EM: `θ ← θ − g Δt + √(η Δt / b) F z`, with `F` the exact
/// factor of `Σ` and one shared `z` across layers.
#[allow(clippy::too_many_arguments)]
pub fn anisotropic_em_step(
    net: &Network,
    teacher: &Teacher,
    eta: f64,
    b: usize,
    dt: f64,
    factor: &NoiseFactor,
    step: u64,
    refresh_interval: u64,
    rng: &mut RngStream,
) -> Result<Network> {
    factor.check_fresh(step, refresh_interval)?;
    let (z, z_label) = factor.draw(rng);
    let mut out = net.clone();
    anisotropic_apply(&mut out, teacher, (eta * dt / b as f64).sqrt(), dt, Some(factor), &z, &z_label);
    Ok(out)
}

fn anisotropic_apply(
    net: &mut Network,
    teacher: &Teacher,
    noise_scale: f64,
    dt: f64,
    factor: Option<&NoiseFactor>,
    z: &Mat,
    z_label: &Mat,
) {
    let g = gradient(net, teacher);
    axpy_layers(net, &g, -dt);
    if let Some(f) = factor {
        let noise = f.apply(z, z_label);
        axpy_layers(net, &noise, noise_scale);
    }
}

/// Scalar EM for one mode with a reflecting floor at zero.
pub fn modewise_em_step(w: f64, th: &BalancedTheory, dt: f64, rng: &mut RngStream) -> Result<f64> {
    let z = rng.normal();
    modewise_apply(w, th, dt, z)
}

fn modewise_apply(w: f64, th: &BalancedTheory, dt: f64, z: f64) -> Result<f64> {
    let mu = th.drift(w)?;
    let d = th.diffusion(w)?;
    let next = w + mu * dt + (d * dt).sqrt() * z;
    Ok(next.abs())
}

/// Balance measure
/// `‖W_l W_lᵀ − W_{l+1}ᵀ W_{l+1}‖ / (‖W_l W_lᵀ‖ + ‖W_{l+1}ᵀ W_{l+1}‖)`.
pub fn balance_residual(net: &Network, l: usize) -> Result<f64> {
    if l == 0 || l >= net.depth() {
        return Err(Error::InvalidArgument(format!(
            "balance index {l} outside 1..={}",
            net.depth().saturating_sub(1)
        )));
    }
    let lower = net.layer(l) * net.layer(l).transpose();
    let upper = net.layer(l + 1).transpose() * net.layer(l + 1);
    let denom = lower.norm() + upper.norm();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((&lower - &upper).norm() / denom)
}

/// Default threshold fraction for [`numerical_rank`].
pub const RANK_THRESHOLD: f64 = 0.05;

/// Singular values of `W` above `threshold_frac · s_max(M)`.
pub fn numerical_rank(net: &Network, teacher: &Teacher, threshold_frac: f64) -> Result<usize> {
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rank threshold must lie in (0, 1), got {threshold_frac}"
        )));
    }
    let cut = threshold_frac * teacher.singular_values[0];
    Ok(singular_values(&crate::model::end_to_end(net))
        .iter()
        .filter(|&&s| s > cut)
        .count())
}

/// Time-indexed table of observables, one row per recording event.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl RunLog {
    pub fn new(columns: Vec<String>) -> Self {
        Self { columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[0]).collect()
    }

    pub fn last_row(&self) -> Option<&[f64]> {
        self.rows.last().map(|r| r.as_slice())
    }

    /// CSV with an optional leading `# config_hash: …` line.
    pub fn write_csv<W: Write>(&self, mut out: W, config_hash: Option<&str>) -> Result<()> {
        if let Some(hash) = config_hash {
            writeln!(out, "# config_hash: {hash}")?;
        }
        writeln!(out, "{}", self.columns.join(","))?;
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Inverse of [`RunLog::write_csv`]; `#` lines are skipped.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().filter(|l| !matches!(l, Ok(s) if s.starts_with('#')));
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty CSV".into()))??;
        let columns: Vec<String> = header.split(',').map(str::to_string).collect();
        let mut log = Self::new(columns);
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|x| {
                    x.parse::<f64>()
                        .map_err(|_| Error::InvalidArgument(format!("bad CSV number {x:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != log.columns.len() {
                return Err(Error::Shape(format!(
                    "CSV row has {} fields, header has {}",
                    row.len(),
                    log.columns.len()
                )));
            }
            log.rows.push(row);
        }
        Ok(log)
    }
}

/// Ordered cross-mode pairs `(α, β)`, `α ≠ β`, among teacher modes.
pub fn cross_pairs(rank: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for a in 0..rank {
        for b in 0..rank {
            if a != b {
                out.push((a, b));
            }
        }
    }
    out
}

/// Fixed RunLog header for a teacher of rank `r` and a depth-`L` network.
pub fn run_columns(rank: usize, depth: usize) -> Vec<String> {
    let mut cols = vec!["time".to_string(), "loss".to_string()];
    cols.extend((0..rank).map(|a| format!("w_{a}")));
    cols.extend(cross_pairs(rank).iter().map(|(a, b)| format!("cross_{a}_{b}")));
    for prefix in ["D_emp", "D_theo", "mu_grad", "mu_ito"] {
        cols.extend((0..rank).map(|a| format!("{prefix}_{a}")));
    }
    cols.extend((1..depth).map(|l| format!("r_{l}")));
    cols.extend((1..=depth).map(|l| format!("frob_{l}")));
    cols.push("num_rank".to_string());
    cols
}

fn theories(teacher: &Teacher, depth: usize, params: &StepperParams) -> Vec<BalancedTheory> {
    teacher
        .singular_values
        .iter()
        .map(|&s| BalancedTheory {
            s,
            depth,
            beta: params.beta(),
            sigma_q: teacher.sigma_q,
            ito: params.ito_variant,
        })
        .collect()
}

fn theory_or_nan(value: Result<f64>) -> f64 {
    value.unwrap_or(f64::NAN)
}

fn push_theory_columns(row: &mut Vec<f64>, amplitudes: &[f64], ths: &[BalancedTheory]) {
    let r = ths.len();
    let per_mode = |f: &dyn Fn(&BalancedTheory, f64) -> Result<f64>| -> Vec<f64> {
        (0..r).map(|a| theory_or_nan(f(&ths[a], amplitudes[a]))).collect()
    };
    row.extend(per_mode(&|th, w| theory_diffusion(th, w)));
    row.extend(per_mode(&|th, w| theory_grad_drift(th, w)));
    row.extend(per_mode(&|th, w| theory_ito_drift(th, w)));
}

fn record_network(net: &Network, teacher: &Teacher, params: &StepperParams, ths: &[BalancedTheory], time: f64) -> Vec<f64> {
    let parts = Partials::new(net);
    let w = parts.end_to_end(net);
    let delta = &teacher.m - &w;
    let r = teacher.rank();
    let cross = teacher.u.transpose() * &w * &teacher.v;
    let amplitudes: Vec<f64> = (0..r).map(|a| cross[(a, a)]).collect();
    let mut row = Vec::with_capacity(run_columns(r, net.depth()).len());
    row.push(time);
    row.push(0.5 * delta.norm_squared());
    row.extend(&amplitudes);
    row.extend(cross_pairs(r).iter().map(|&(a, b)| cross[(a, b)]));
    let d = fast_mode_diffusion_with(&parts, &delta, teacher, &teacher.label_covariance(), params.beta());
    row.extend((0..r).map(|a| d[(a, a)]));
    push_theory_columns(&mut row, &amplitudes, ths);
    for l in 1..net.depth() {
        row.push(balance_residual(net, l).expect("index in range"));
    }
    row.extend(net.layers().iter().map(|m| m.norm()));
    let cut = RANK_THRESHOLD * teacher.singular_values[0];
    row.push(singular_values(&w).iter().filter(|&&s| s > cut).count() as f64);
    row
}

/// Modewise state read as a balanced, aligned network: `r_l = 0`,
/// `‖W_l‖_F² = Σ_α w_α^{2/L}`, rank counted from the amplitudes.
fn record_modewise(w: &[f64], teacher: &Teacher, depth: usize, ths: &[BalancedTheory], time: f64) -> Vec<f64> {
    let r = teacher.rank();
    let mut row = Vec::new();
    row.push(time);
    row.push(
        0.5 * teacher
            .singular_values
            .iter()
            .zip(w)
            .map(|(s, x)| (s - x) * (s - x))
            .sum::<f64>(),
    );
    row.extend(w);
    row.extend(std::iter::repeat(0.0).take(cross_pairs(r).len()));
    row.extend((0..r).map(|a| theory_or_nan(theory_diffusion(&ths[a], w[a]))));
    push_theory_columns(&mut row, w, ths);
    row.extend(std::iter::repeat(0.0).take(depth - 1));
    let frob = w.iter().map(|x| x.powf(2.0 / depth as f64)).sum::<f64>().sqrt();
    row.extend(std::iter::repeat(frob).take(depth));
    let cut = RANK_THRESHOLD * teacher.singular_values[0];
    row.push(w.iter().filter(|&&x| x > cut).count() as f64);
    row
}

/// Number of steps covering `horizon` time units.
pub fn steps_for(horizon: f64, step_time: f64) -> u64 {
    if horizon <= 0.0 {
        return 0;
    }
    (horizon / step_time - 1e-9).ceil() as u64
}

/// Trajectory state shared by the recording and the final-value drivers.
enum State {
    Full(Network),
    Modewise(Vec<f64>),
}

struct Stepper<'a> {
    teacher: &'a Teacher,
    params: &'a StepperParams,
    depth: usize,
    ths: Vec<BalancedTheory>,
    label_root: Mat,
    factor: Option<NoiseFactor>,
    sampler: Option<OfflineSampler>,
}

impl<'a> Stepper<'a> {
    fn new(net0: &Network, teacher: &'a Teacher, params: &'a StepperParams, rng: &mut RngStream) -> Result<(Self, State)> {
        params.validate()?;
        if teacher.d_in() != net0.d_in() || teacher.d_out() != net0.d_out() {
            return Err(Error::Shape("teacher and network disagree on input/output widths".into()));
        }
        let depth = net0.depth();
        let sampler = if params.kind == StepperKind::OfflineSgd {
            let n = params.dataset_size.expect("validated");
            let mut data_rng = rng.split(1 << 32);
            let data = Dataset::sample(teacher, n, &mut data_rng)?;
            Some(OfflineSampler::new(data, &mut data_rng))
        } else {
            None
        };
        let state = if params.kind == StepperKind::ModewiseEm {
            let report = crate::modes::mode_amplitudes(net0, teacher);
            State::Modewise(report.amplitudes[..teacher.rank()].iter().map(|w| w.abs()).collect())
        } else {
            State::Full(net0.clone())
        };
        let stepper = Self {
            teacher,
            params,
            depth,
            ths: theories(teacher, depth, params),
            label_root: identity(teacher.d_out()) * teacher.sigma_q,
            factor: None,
            sampler,
        };
        Ok((stepper, state))
    }

    fn step(&mut self, state: &mut State, k: u64, rng: &mut RngStream) -> Result<()> {
        let p = self.params;
        match state {
            State::Modewise(w) => {
                for (a, x) in w.iter_mut().enumerate() {
                    let z = coupled_scalar(p.brownian_substeps, rng);
                    *x = modewise_apply(*x, &self.ths[a], p.dt, z)?;
                    if !x.is_finite() {
                        return Err(Error::NumericalAbort { step: k + 1, layer: 0 });
                    }
                }
            }
            State::Full(net) => {
                match p.kind {
                    StepperKind::GradientDescent => {
                        let g = gradient(net, self.teacher);
                        axpy_layers(net, &g, -p.eta);
                    }
                    StepperKind::OnlineSgd => {
                        let batch = sample_batch(self.teacher, p.batch_size, rng);
                        let parts = Partials::new(net);
                        let g = batch_gradient_with(&parts, net, &batch);
                        axpy_layers(net, &g, -p.eta);
                    }
                    StepperKind::OfflineSgd => {
                        let batch = self.sampler.as_mut().expect("offline sampler").next_batch(p.batch_size, rng);
                        let parts = Partials::new(net);
                        let g = batch_gradient_with(&parts, net, &batch);
                        axpy_layers(net, &g, -p.eta);
                    }
                    StepperKind::IsotropicLangevin => {
                        isotropic_in_place(net, self.teacher, p.eta, p.dt, p.sigma_iso, p.brownian_substeps, rng);
                    }
                    StepperKind::AnisotropicEm => {
                        let stale = match &self.factor {
                            Some(f) => f.check_fresh(k, p.refresh_interval).is_err(),
                            None => true,
                        };
                        if stale {
                            self.factor = Some(noise_factor_with_root(net, self.teacher, self.label_root.clone(), k)?);
                        }
                        let f = self.factor.as_ref().expect("fresh factor");
                        f.check_fresh(k, p.refresh_interval)?;
                        let shapes = [(f.d_in(), f.d_in()), (f.d_out(), f.d_in())];
                        let z = coupled_gaussians(&shapes, p.brownian_substeps, rng);
                        let (z, z_label) = (&z[0], &z[1]);
                        let scale = (p.eta * p.dt / p.batch_size as f64).sqrt();
                        anisotropic_apply(net, self.teacher, scale, p.dt, Some(f), z, z_label);
                    }
                    StepperKind::ModewiseEm => unreachable!("modewise state"),
                }
                if let Some(layer) = net.first_non_finite_layer() {
                    return Err(Error::NumericalAbort { step: k + 1, layer });
                }
            }
        }
        Ok(())
    }

    fn record(&self, state: &State, time: f64) -> Vec<f64> {
        match state {
            State::Full(net) => record_network(net, self.teacher, self.params, &self.ths, time),
            State::Modewise(w) => record_modewise(w, self.teacher, self.depth, &self.ths, time),
        }
    }
}

/// Step the chosen dynamics for `horizon` time units, recording at step 0,
/// every `record_every` steps, and at the final step.
pub fn run(
    net0: &Network,
    teacher: &Teacher,
    params: &StepperParams,
    horizon: f64,
    record_every: u64,
    rng: &mut RngStream,
) -> Result<RunLog> {
    if horizon < 0.0 || !horizon.is_finite() {
        return Err(Error::InvalidArgument(format!("horizon must be >= 0, got {horizon}")));
    }
    if record_every == 0 {
        return Err(Error::InvalidArgument("record cadence must be >= 1".into()));
    }
    let (mut stepper, mut state) = Stepper::new(net0, teacher, params, rng)?;
    let h = params.step_time();
    let n = steps_for(horizon, h);
    let mut log = RunLog::new(run_columns(teacher.rank(), net0.depth()));
    log.push(stepper.record(&state, 0.0));
    for k in 0..n {
        stepper.step(&mut state, k, rng)?;
        let done = k + 1;
        if done % record_every == 0 || done == n {
            log.push(stepper.record(&state, done as f64 * h));
        }
    }
    Ok(log)
}

/// Final teacher-mode amplitudes after `horizon`, without recording.
pub fn final_amplitudes(
    net0: &Network,
    teacher: &Teacher,
    params: &StepperParams,
    horizon: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let (mut stepper, mut state) = Stepper::new(net0, teacher, params, rng)?;
    let n = steps_for(horizon, params.step_time());
    for k in 0..n {
        stepper.step(&mut state, k, rng)?;
    }
    Ok(match state {
        State::Modewise(w) => w,
        State::Full(net) => crate::modes::mode_amplitudes(&net, teacher).amplitudes[..teacher.rank()].to_vec(),
    })
}

/// Final network of a full-parameter run (modewise runs are rejected).
pub fn final_network(
    net0: &Network,
    teacher: &Teacher,
    params: &StepperParams,
    horizon: f64,
    rng: &mut RngStream,
) -> Result<Network> {
    if params.kind == StepperKind::ModewiseEm {
        return Err(Error::InvalidArgument("modewise runs carry no network".into()));
    }
    let (mut stepper, mut state) = Stepper::new(net0, teacher, params, rng)?;
    let n = steps_for(horizon, params.step_time());
    for k in 0..n {
        stepper.step(&mut state, k, rng)?;
    }
    match state {
        State::Full(net) => Ok(net),
        State::Modewise(_) => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{aligned_balanced_network, build_teacher, init_network, population_loss, InitSpec};
    use crate::modes::{gf_logistic, learned_time, mode_amplitudes, LEARNED_FRACTION};
    use crate::noisecov::{closed_form_covariance, noise_factor};
    use crate::numerics::{psd_sqrt, relative_frobenius, DEFAULT_CLAMP_TOL};

    fn teacher(d: usize, sigma_q: f64, seed: u64) -> Teacher {
        build_teacher(d, d, &[1.0, 0.7, 0.4], sigma_q, &mut RngStream::new(seed, 0)).unwrap()
    }

    fn random_net(dims: &[usize], scale: f64, seed: u64) -> Network {
        let mut rng = RngStream::new(seed, 0);
        let layers = dims
            .windows(2)
            .map(|w| gaussian_matrix(w[1], w[0], &mut rng) * scale)
            .collect();
        Network::new(layers).unwrap()
    }

    fn flat(blocks: &[Mat]) -> Vec<f64> {
        blocks.iter().flat_map(|b| b.iter().copied()).collect()
    }

    #[test]
    fn teacher_is_a_fixed_point() {
        let t = teacher(3, 0.0, 1);
        let net = Network::new(vec![identity(3), t.m.clone()]).unwrap();
        assert_eq!(gd_step(&net, &t, 0.1), net);
        let mut rng = RngStream::new(2, 0);
        assert_eq!(sgd_step(&net, &t, 0.1, 3, &mut rng), net);
    }

    #[test]
    fn gd_loss_decreases() {
        let t = teacher(4, 0.0, 3);
        let mut net = random_net(&[4, 4, 4], 0.5, 4);
        let mut prev = population_loss(&net, &t);
        for _ in 0..100 {
            net = gd_step(&net, &t, 1e-4);
            let now = population_loss(&net, &t);
            assert!(now <= prev);
            prev = now;
        }
    }

    #[test]
    fn gd_tracks_logistic() {
        let t = Teacher::canonical(4, 4, &[1.0], 0.0).unwrap();
        let w0 = 1e-3;
        let net = aligned_balanced_network(&t, &[4], &[w0], &mut RngStream::new(5, 0)).unwrap();
        let params = StepperParams::new(StepperKind::GradientDescent, 1e-4);
        let log = run(&net, &t, &params, 15.0, 100, &mut RngStream::new(6, 0)).unwrap();
        let times = log.times();
        let w = log.column("w_0").unwrap();
        let sup = times
            .iter()
            .zip(&w)
            .map(|(&tt, &x)| (x - gf_logistic(1.0, w0, tt).unwrap()).abs())
            .fold(0.0, f64::max);
        assert!(sup < 1e-3, "sup error {sup}");
    }

    #[test]
    fn sgd_is_unbiased() {
        let t = teacher(3, 0.2, 7);
        let net = random_net(&[3, 3, 3], 0.5, 8);
        let eta = 0.1;
        let gd = flat(gd_step(&net, &t, eta).layers());
        let mut rng = RngStream::new(9, 0);
        let n = 100_000;
        let p = net.num_params();
        let mut sum = vec![0.0; p];
        let mut sum_sq = vec![0.0; p];
        for _ in 0..n {
            let x = flat(sgd_step(&net, &t, eta, 1, &mut rng).layers());
            for i in 0..p {
                sum[i] += x[i];
                sum_sq[i] += x[i] * x[i];
            }
        }
        for i in 0..p {
            let mean = sum[i] / n as f64;
            let var = sum_sq[i] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!((mean - gd[i]).abs() < 3.0 * se + 1e-15, "coordinate {i}");
        }
    }

    fn increment_covariance(n: usize, mut draw: impl FnMut() -> Vec<f64>, center: &[f64]) -> Mat {
        let p = center.len();
        let mut acc = Mat::zeros(p, p);
        for _ in 0..n {
            let x = draw();
            let d = Mat::from_fn(p, 1, |i, _| x[i] - center[i]);
            acc += &d * d.transpose();
        }
        acc / n as f64
    }

    #[test]
    fn sgd_increment_covariance() {
        let t = teacher(3, 0.2, 10);
        let net = random_net(&[3, 3, 3], 0.5, 11);
        let eta = 0.1;
        let b = 2;
        let gd = flat(gd_step(&net, &t, eta).layers());
        let mut rng = RngStream::new(12, 0);
        let cov = increment_covariance(100_000, || flat(sgd_step(&net, &t, eta, b, &mut rng).layers()), &gd);
        let exact = closed_form_covariance(&net, &t, &t.label_covariance()).unwrap();
        let want = &exact.full * (eta * eta / b as f64);
        assert!(relative_frobenius(&cov, &want) < 0.05);
    }

    #[test]
    fn isotropic_langevin_increment() {
        let t = teacher(3, 0.0, 13);
        let net = random_net(&[3, 3], 0.5, 14);
        let (eta, dt) = (0.005, 1e-2);
        let drift = flat(gd_step(&net, &t, dt).layers());
        let mut rng = RngStream::new(15, 0);
        let n = 100_000;
        let mut sq = 0.0;
        for _ in 0..n {
            let x = flat(isotropic_langevin_step(&net, &t, eta, dt, 1.0, &mut rng).layers());
            sq += x.iter().zip(&drift).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        let var = sq / (n * 9) as f64;
        assert!((var / (eta * dt) - 1.0).abs() < 0.03);
        let quiet = isotropic_langevin_step(&net, &t, eta, dt, 0.0, &mut rng);
        assert_eq!(flat(quiet.layers()), drift);
    }

    #[test]
    fn anisotropic_em_increment_covariance() {
        let t = teacher(3, 0.3, 16);
        let net = random_net(&[3, 4, 3], 0.6, 17);
        let (eta, b, dt) = (0.005, 2, 1e-3);
        let factor = noise_factor(&net, &t).unwrap();
        let drift = flat(gd_step(&net, &t, dt).layers());
        let mut rng = RngStream::new(18, 0);
        let cov = increment_covariance(
            100_000,
            || flat(anisotropic_em_step(&net, &t, eta, b, dt, &factor, 0, 1, &mut rng).unwrap().layers()),
            &drift,
        );
        let exact = closed_form_covariance(&net, &t, &t.label_covariance()).unwrap();
        let want = &exact.full * (eta * dt / b as f64);
        assert!(relative_frobenius(&cov, &want) < 0.05);
    }

    #[test]
    fn factorized_and_dense_roots_give_same_increment_law() {
        let t = teacher(3, 0.3, 19);
        let net = random_net(&[3, 3, 3], 0.6, 20);
        let exact = closed_form_covariance(&net, &t, &t.label_covariance()).unwrap();
        let root = psd_sqrt(&exact.full, DEFAULT_CLAMP_TOL).unwrap();
        let factor = noise_factor(&net, &t).unwrap();
        let p = net.num_params();
        let n = 100_000;
        let mut rng = RngStream::new(21, 0);
        let mut a = Mat::zeros(p, p);
        let mut b = Mat::zeros(p, p);
        for _ in 0..n {
            let x = Mat::from_vec(p, 1, flat(&factor.sample(&mut rng)));
            a += &x * x.transpose();
            let z = gaussian_matrix(p, 1, &mut rng);
            let y = &root * z;
            b += &y * y.transpose();
        }
        assert!(relative_frobenius(&(a / n as f64), &(b / n as f64)) < 0.05);
    }

    #[test]
    fn anisotropic_em_is_pure_drift_at_noiseless_minimum() {
        let t = teacher(3, 0.0, 22);
        let net = Network::new(vec![identity(3), t.m.clone()]).unwrap();
        let factor = noise_factor(&net, &t).unwrap();
        let out = anisotropic_em_step(&net, &t, 0.005, 1, 1e-3, &factor, 0, 1, &mut RngStream::new(23, 0)).unwrap();
        assert_eq!(out, net);
    }

    #[test]
    fn stale_factor_is_rejected() {
        let t = teacher(3, 0.1, 24);
        let net = random_net(&[3, 3], 0.5, 25);
        let factor = noise_factor(&net, &t).unwrap();
        let err = anisotropic_em_step(&net, &t, 0.005, 1, 1e-3, &factor, 1, 1, &mut RngStream::new(26, 0));
        assert!(matches!(err, Err(Error::StaleFactor { .. })));
    }

    #[test]
    fn zero_noise_em_equals_gd_bitwise() {
        let t = teacher(3, 0.2, 27);
        let mut gd = random_net(&[3, 4, 3], 0.5, 28);
        let mut em = gd.clone();
        let dt = 1e-3;
        let z = Mat::zeros(3, 3);
        for _ in 0..200 {
            gd = gd_step(&gd, &t, dt);
            anisotropic_apply(&mut em, &t, 0.0, dt, None, &z, &z);
        }
        assert_eq!(gd, em);
    }

    #[test]
    fn modewise_em_cases() {
        let th = BalancedTheory::new(1.0, 2, 0.005, 0.0).unwrap();
        let mut rng = RngStream::new(29, 0);
        assert_eq!(modewise_em_step(1.0, &th, 1e-3, &mut rng).unwrap(), 1.0);
        assert!(modewise_em_step(-0.1, &th, 1e-3, &mut rng).is_err());
        // vanishing β: deterministic mode ODE, logistic for L = 2
        let th = BalancedTheory::new(1.0, 2, 1e-300, 0.0).unwrap();
        let (dt, w0) = (1e-4, 1e-3);
        let mut w = w0;
        let mut sup: f64 = 0.0;
        for k in 1..=150_000 {
            w = modewise_em_step(w, &th, dt, &mut rng).unwrap();
            sup = sup.max((w - gf_logistic(1.0, w0, k as f64 * dt).unwrap()).abs());
        }
        assert!(sup < 1e-3);
    }

    #[test]
    fn modewise_ensemble_mean_tracks_ode() {
        let th = BalancedTheory::new(1.0, 2, 1e-4, 0.0).unwrap();
        let (dt, w0, steps) = (1e-3, 0.05, 3000);
        let mut rng = RngStream::new(30, 0);
        let n = 400;
        let mut finals = Vec::with_capacity(n);
        for _ in 0..n {
            let mut w = w0;
            for _ in 0..steps {
                w = modewise_em_step(w, &th, dt, &mut rng).unwrap();
            }
            finals.push(w);
        }
        let mean = finals.iter().sum::<f64>() / n as f64;
        let var = finals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let det = {
            let quiet = BalancedTheory { beta: 1e-300, ..th };
            let mut w = w0;
            for _ in 0..steps {
                w = modewise_apply(w, &quiet, dt, 0.0).unwrap();
            }
            w
        };
        assert!((mean - det).abs() < 3.0 * (var / n as f64).sqrt() + 1e-6, "mean {mean} ode {det}");
    }

    #[test]
    fn balance_residual_cases() {
        let spec = InitSpec { gamma: 3.0, balanced: true, seed: 0 };
        let net = init_network(&[4, 4, 4, 4], &spec, &mut RngStream::new(31, 0)).unwrap();
        for l in 1..3 {
            assert!(balance_residual(&net, l).unwrap() < 1e-12);
        }
        let net = Network::new(vec![identity(3), identity(3) * 2.0]).unwrap();
        assert!((balance_residual(&net, 1).unwrap() - 0.6).abs() < 1e-15);
        let scaled = Network::new(vec![identity(3) * 3.0, identity(3) * 6.0]).unwrap();
        assert!((balance_residual(&scaled, 1).unwrap() - 0.6).abs() < 1e-15);
        assert!(balance_residual(&net, 0).is_err());
        assert!(balance_residual(&net, 2).is_err());
        let zero = Network::new(vec![Mat::zeros(2, 2), Mat::zeros(2, 2)]).unwrap();
        assert_eq!(balance_residual(&zero, 1).unwrap(), 0.0);
    }

    #[test]
    fn numerical_rank_cases() {
        let t = teacher(4, 0.0, 32);
        let zero = Network::new(vec![Mat::zeros(4, 4)]).unwrap();
        assert_eq!(numerical_rank(&zero, &t, RANK_THRESHOLD).unwrap(), 0);
        let exact = Network::new(vec![t.m.clone()]).unwrap();
        assert_eq!(numerical_rank(&exact, &t, RANK_THRESHOLD).unwrap(), 3);
        assert!(numerical_rank(&exact, &t, 1.5).is_err());
    }

    #[test]
    fn gd_learns_modes_in_order() {
        let t = teacher(12, 0.0, 33);
        let spec = InitSpec { gamma: 3.0, balanced: false, seed: 34 };
        let net = init_network(&[12, 12, 12], &spec, &mut RngStream::new(34, 0)).unwrap();
        let params = StepperParams::new(StepperKind::GradientDescent, 0.005);
        let log = run(&net, &t, &params, 40.0, 10, &mut RngStream::new(35, 0)).unwrap();
        let times = log.times();
        let learned: Vec<f64> = (0..3)
            .map(|a| {
                learned_time(&times, &log.column(&format!("w_{a}")).unwrap(), t.singular_values[a], LEARNED_FRACTION)
                    .expect("mode learned")
            })
            .collect();
        assert!(learned[0] < learned[1] && learned[1] < learned[2], "{learned:?}");
        let rank = log.column("num_rank").unwrap();
        assert_eq!(*rank.last().unwrap(), 3.0);
    }

    #[test]
    fn zero_horizon_keeps_initial_row() {
        let t = teacher(3, 0.0, 36);
        let net = random_net(&[3, 3, 3], 0.1, 37);
        let params = StepperParams::new(StepperKind::OnlineSgd, 0.005);
        let log = run(&net, &t, &params, 0.0, 1, &mut RngStream::new(38, 0)).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log.rows[0][0], 0.0);
        assert_eq!(log.columns, run_columns(3, 2));
    }

    #[test]
    fn runs_are_deterministic_and_roundtrip() {
        let t = teacher(3, 0.2, 39);
        let net = random_net(&[3, 3, 3], 0.3, 40);
        for kind in [
            StepperKind::GradientDescent,
            StepperKind::OnlineSgd,
            StepperKind::OfflineSgd,
            StepperKind::IsotropicLangevin,
            StepperKind::AnisotropicEm,
            StepperKind::ModewiseEm,
        ] {
            let mut params = StepperParams::new(kind, 0.005);
            params.dataset_size = Some(16);
            params.batch_size = 2;
            params.dt = 1e-3;
            let a = run(&net, &t, &params, 0.5, 7, &mut RngStream::new(41, 0)).unwrap();
            let b = run(&net, &t, &params, 0.5, 7, &mut RngStream::new(41, 0)).unwrap();
            let mut bytes_a = Vec::new();
            let mut bytes_b = Vec::new();
            a.write_csv(&mut bytes_a, Some("abc")).unwrap();
            b.write_csv(&mut bytes_b, Some("abc")).unwrap();
            assert_eq!(bytes_a, bytes_b, "{kind:?}");
            let back = RunLog::read_csv(std::io::Cursor::new(bytes_a)).unwrap();
            assert_eq!(back.columns, a.columns);
            for (x, y) in back.rows.iter().zip(&a.rows) {
                for (p, q) in x.iter().zip(y) {
                    assert!(p == q || (p.is_nan() && q.is_nan()));
                }
            }
            let times = a.times();
            assert!(times.windows(2).all(|w| w[1] > w[0]));
            let last = *times.last().unwrap();
            assert!((last - 0.5).abs() < params.step_time());
        }
    }

    #[test]
    fn nan_aborts_with_location() {
        let t = teacher(3, 0.0, 42);
        let net = random_net(&[3, 3, 3], 3.0, 43);
        let params = StepperParams::new(StepperKind::GradientDescent, 5.0);
        let err = run(&net, &t, &params, 1e4, u64::MAX, &mut RngStream::new(44, 0)).unwrap_err();
        assert!(matches!(err, Error::NumericalAbort { step, layer } if step > 0 && layer >= 1));
    }

    #[test]
    fn coupled_substeps_share_brownian_paths() {
        // one coarse step with k substeps consumes the draws of k fine steps
        let mut fine = RngStream::new(45, 0);
        let mut coarse = RngStream::new(45, 0);
        let a: f64 = (0..4).map(|_| fine.normal()).sum::<f64>() / 2.0;
        let b = coupled_scalar(4, &mut coarse);
        assert_eq!(a, b);

        let shapes = [(2, 2), (3, 2)];
        let mut fine = RngStream::new(46, 0);
        let mut coarse = RngStream::new(46, 0);
        let mut sum = vec![Mat::zeros(2, 2), Mat::zeros(3, 2)];
        for _ in 0..4 {
            for (acc, z) in sum.iter_mut().zip(coupled_gaussians(&shapes, 1, &mut fine)) {
                *acc += z;
            }
        }
        let coupled = coupled_gaussians(&shapes, 4, &mut coarse);
        for (x, y) in sum.iter().zip(&coupled) {
            assert!((x / 2.0 - y).amax() < 1e-15);
        }
    }

    #[test]
    fn offline_sampler_covers_each_epoch() {
        let t = teacher(3, 0.0, 46);
        let mut rng = RngStream::new(47, 0);
        let data = Dataset::sample(&t, 6, &mut rng).unwrap();
        let mut sampler = OfflineSampler::new(data.clone(), &mut rng);
        let mut seen = Vec::new();
        for _ in 0..3 {
            let batch = sampler.next_batch(2, &mut rng);
            for c in 0..2 {
                let col = batch.x.column(c).into_owned();
                let idx = (0..6).find(|&i| data.samples.x.column(i) == col).unwrap();
                seen.push(idx);
            }
        }
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn modewise_record_matches_aligned_network() {
        let t = teacher(4, 0.2, 48);
        let w = [0.5, 0.3, 0.1];
        let net = aligned_balanced_network(&t, &[4, 4], &w, &mut RngStream::new(49, 0)).unwrap();
        let params = StepperParams::new(StepperKind::ModewiseEm, 0.005);
        let ths = theories(&t, 3, &params);
        let from_net = record_network(&net, &t, &params, &ths, 0.0);
        let from_modes = record_modewise(&w, &t, 3, &ths, 0.0);
        for (a, b) in from_net.iter().zip(&from_modes) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert_eq!(mode_amplitudes(&net, &t).amplitudes.len(), 4);
    }
}
