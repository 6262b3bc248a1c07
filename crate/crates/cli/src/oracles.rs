//! Independent-route checks behind `validate`. Each oracle returns the
//! measured discrepancy together with its tolerance.

use serde::{Deserialize, Serialize};

use dlnsde::dynamics::{run, StepperKind, StepperParams};
use dlnsde::model::{
    aligned_balanced_network, batch_gradient, build_teacher, population_gradient, population_loss, Dataset, Network,
    Teacher,
};
use dlnsde::modes::{
    aligned_ito_drift, empirical_mode_diffusion, gf_logistic, ito_drift, mode_report, theory_diffusion,
    theory_ito_drift, BalancedTheory, ItoVariant, ReportOptions,
};
use dlnsde::noisecov::{closed_form_covariance, empirical_covariance, finite_dataset_covariance, noise_factor};
use dlnsde::numerics::{gaussian_matrix, relative_frobenius, Mat, RngStream};

use crate::LabError;

type Result<T> = std::result::Result<T, LabError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl OracleResult {
    /// Passes when `measured < tolerance`.
    pub fn below(name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            measured,
            tolerance,
            passed: measured < tolerance,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: measured {:.3e}, tolerance {:.1e} ({})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.detail
        )
    }
}

fn flat(mats: &[Mat]) -> Vec<f64> {
    mats.iter().flat_map(|m| m.as_slice().to_vec()).collect()
}

fn random_net(dims: &[usize], scale: f64, rng: &mut RngStream) -> Network {
    let layers = dims
        .windows(2)
        .map(|w| gaussian_matrix(w[1], w[0], rng) * scale)
        .collect();
    Network::new(layers).expect("consistent ladder")
}

/// Worst `‖g_fd − g‖_∞ / ‖g‖_∞` over `n_nets` random nets with depths cycling
/// through 1..=4, central differences of `½‖M − W‖²_F` with step `h`.
pub fn gradient_finite_differences(n_nets: usize, h: f64, seed: u64) -> Result<OracleResult> {
    let mut rng = RngStream::new(seed, 0);
    let mut worst: f64 = 0.0;
    for i in 0..n_nets {
        let depth = 1 + i % 4;
        let dims: Vec<usize> = (0..=depth).map(|_| 2 + (rng.uniform() * 3.0) as usize).collect();
        let r = dims[0].min(dims[depth]);
        let values: Vec<f64> = (0..r).map(|k| 1.0 - 0.2 * k as f64).collect();
        let teacher = build_teacher(dims[depth], dims[0], &values, 0.0, &mut rng)?;
        let net = random_net(&dims, 0.6, &mut rng);
        let exact = flat(&population_gradient(&net, &teacher));
        let theta = flat(net.layers());
        let mut max_gap: f64 = 0.0;
        for j in 0..theta.len() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[j] += h;
            minus[j] -= h;
            let fd = (population_loss(&net.with_params(&plus), &teacher)
                - population_loss(&net.with_params(&minus), &teacher))
                / (2.0 * h);
            max_gap = max_gap.max((fd - exact[j]).abs());
        }
        let scale = exact.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        worst = worst.max(max_gap / scale);
    }
    Ok(OracleResult::below(
        "gradient vs finite differences",
        worst,
        1e-5,
        format!("{n_nets} nets, L in 1..=4, h = {h:e}"),
    ))
}

/// Relative Frobenius gap between the closed-form and a Monte-Carlo
/// covariance on a depth-2, width-3 net.
pub fn covariance_monte_carlo(sigma_q: f64, n_samples: usize, seed: u64) -> Result<OracleResult> {
    let mut rng = RngStream::new(seed, 0);
    let teacher = build_teacher(3, 3, &[1.0, 0.6, 0.3], sigma_q, &mut rng)?;
    let net = random_net(&[3, 3, 3], 0.7, &mut rng);
    let exact = closed_form_covariance(&net, &teacher, &teacher.label_covariance())?;
    let mc = empirical_covariance(&net, &teacher, n_samples, &mut rng)?;
    Ok(OracleResult::below(
        &format!("covariance closed form vs Monte Carlo (sigma_q = {sigma_q})"),
        relative_frobenius(&mc.full, &exact.full),
        0.05,
        format!("{n_samples} samples"),
    ))
}

/// Worst relative gap of `F Fᵀ` against the closed form over random nets,
/// then at the global minimum `W = M` with and without label noise.
pub fn factorization_identity(n_nets: usize, seed: u64) -> Result<OracleResult> {
    let mut rng = RngStream::new(seed, 0);
    let mut worst: f64 = 0.0;
    for i in 0..n_nets {
        let dims = [3, 4 + i % 2, 2 + i % 3, 3];
        let teacher = build_teacher(3, 3, &[1.0, 0.7, 0.4], 0.1 * (i % 4) as f64, &mut rng)?;
        let net = random_net(&dims, 0.6, &mut rng);
        let exact = closed_form_covariance(&net, &teacher, &teacher.label_covariance())?;
        let f = noise_factor(&net, &teacher)?.dense();
        worst = worst.max(relative_frobenius(&(&f * f.transpose()), &exact.full));
    }
    for sigma_q in [0.0, 0.3] {
        let teacher = build_teacher(3, 3, &[1.0, 0.7, 0.4], sigma_q, &mut rng)?;
        let net = aligned_balanced_network(&teacher, &[3], &teacher.singular_values, &mut rng)?;
        let exact = closed_form_covariance(&net, &teacher, &teacher.label_covariance())?;
        let f = noise_factor(&net, &teacher)?.dense();
        let gap = relative_frobenius(&(&f * f.transpose()), &exact.full);
        worst = worst.max(if sigma_q == 0.0 { gap.max(exact.full.norm()) } else { gap });
    }
    Ok(OracleResult::below(
        "noise factor reconstructs covariance",
        worst,
        1e-10,
        format!("{n_nets} random nets plus W = M"),
    ))
}

/// Balanced aligned nets swept along `w = t s`, `t ∈ (0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedIdentity {
    /// Worst relative gap of `η a_αᵀ Σ a_α` against the closed-form `D`.
    pub diffusion: f64,
    /// Largest `|D_{αβ}|`, `α ≠ β`.
    pub cross: f64,
    /// Worst relative gap of the Hessian contraction against the squared-noise closed form.
    pub ito_squared_noise: f64,
    /// Worst relative gap of the Hessian contraction against the exact
    /// aligned form.
    pub ito_exact: f64,
}

pub fn balanced_identity(depths: &[usize], n_points: usize, sigma_q: f64, eta: f64, seed: u64) -> Result<BalancedIdentity> {
    let mut rng = RngStream::new(seed, 0);
    let values = [1.0, 0.7, 0.4];
    let mut out = BalancedIdentity {
        diffusion: 0.0,
        cross: 0.0,
        ito_squared_noise: 0.0,
        ito_exact: 0.0,
    };
    let rel = |a: f64, b: f64| if b == 0.0 { a.abs() } else { (a - b).abs() / b.abs() };
    for &depth in depths {
        let teacher = build_teacher(4, 4, &values, sigma_q, &mut rng)?;
        let sigma_q_matrix = teacher.label_covariance();
        let hidden = vec![4; depth - 1];
        for k in 1..=n_points {
            let t = k as f64 / n_points as f64;
            let w: Vec<f64> = values.iter().map(|s| t * s).collect();
            let net = aligned_balanced_network(&teacher, &hidden, &w, &mut rng)?;
            let sigma = closed_form_covariance(&net, &teacher, &sigma_q_matrix)?;
            let opts = ReportOptions {
                eta,
                batch_size: 1,
                jacobians: true,
                diffusion: false,
                drifts: false,
            };
            let report = mode_report(&net, &teacher, &opts);
            let d = empirical_mode_diffusion(&report, &sigma, eta)?;
            for a in 0..values.len() {
                let th = BalancedTheory::new(values[a], depth, eta, sigma_q)?.with_ito(ItoVariant::SquaredNoise);
                out.diffusion = out.diffusion.max(rel(d[(a, a)], theory_diffusion(&th, w[a])?));
                for b in 0..values.len() {
                    if a != b {
                        out.cross = out.cross.max(d[(a, b)].abs());
                    }
                }
                let hessian = ito_drift(&net, &teacher, a, &sigma, eta)?;
                out.ito_squared_noise = out.ito_squared_noise.max(rel(hessian, theory_ito_drift(&th, w[a])?));
                let exact = aligned_ito_drift(depth, eta, &values, &w, sigma_q, a)?;
                out.ito_exact = out.ito_exact.max(rel(hessian, exact));
            }
        }
    }
    Ok(out)
}

/// Sup gap between depth-2 GD from a balanced aligned start and the
/// logistic gradient-flow solution over `[0, horizon]`.
pub fn logistic_tracking(eta: f64, horizon: f64, w0: f64, seed: u64) -> Result<OracleResult> {
    let teacher = Teacher::canonical(4, 4, &[1.0, 0.7, 0.4], 0.0)?;
    let values = teacher.singular_values.clone();
    let net = aligned_balanced_network(&teacher, &[4], &vec![w0; values.len()], &mut RngStream::new(seed, 0))?;
    let params = StepperParams::new(StepperKind::GradientDescent, eta);
    let log = run(&net, &teacher, &params, horizon, 1, &mut RngStream::new(seed, 1))?;
    let mut worst: f64 = 0.0;
    for row in &log.rows {
        for (a, &s) in values.iter().enumerate() {
            worst = worst.max((row[2 + a] - gf_logistic(s, w0, row[0])?).abs());
        }
    }
    Ok(OracleResult::below(
        "depth-2 GD tracks logistic",
        worst,
        1e-3,
        format!("eta = {eta:e}, t in [0, {horizon}], w0 = {w0:e}"),
    ))
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Covariance of the batch gradient by enumerating every size-`b` subset.
pub fn enumerated_batch_covariance(net: &Network, data: &Dataset, b: usize) -> Mat {
    let n = data.len();
    let all: Vec<usize> = (0..n).collect();
    let full = flat(&batch_gradient(net, &data.samples.select(&all)));
    let p = full.len();
    let mean = Mat::from_vec(p, 1, full);
    let subsets = combinations(n, b);
    let mut acc = Mat::zeros(p, p);
    for s in &subsets {
        let g = flat(&batch_gradient(net, &data.samples.select(s)));
        let centred = Mat::from_vec(p, 1, g) - &mean;
        acc += &centred * centred.transpose();
    }
    acc / subsets.len() as f64
}

/// Worst gap between the finite-population formula and enumeration for
/// every `b ∈ 1..=N`, relative to the `b = 1` covariance norm.
pub fn finite_dataset_enumeration(n: usize, seed: u64) -> Result<OracleResult> {
    let mut rng = RngStream::new(seed, 0);
    let teacher = build_teacher(3, 3, &[1.0, 0.6], 0.3, &mut rng)?;
    let net = random_net(&[3, 2, 3], 0.7, &mut rng);
    let data = Dataset::sample(&teacher, n, &mut rng)?;
    let scale = enumerated_batch_covariance(&net, &data, 1).norm();
    let mut worst: f64 = 0.0;
    for b in 1..=n {
        let formula = finite_dataset_covariance(&net, &data, b)?;
        let oracle = enumerated_batch_covariance(&net, &data, b);
        worst = worst.max((formula.full - oracle).norm() / scale);
    }
    Ok(OracleResult::below(
        "finite-dataset covariance vs enumeration",
        worst,
        1e-12,
        format!("N = {n}, b in 1..={n}"),
    ))
}

/// The whole suite at desk scale.
pub fn validate_all() -> Result<Vec<OracleResult>> {
    let mut out = vec![
        gradient_finite_differences(20, 1e-5, 101)?,
        covariance_monte_carlo(0.0, 200_000, 102)?,
        covariance_monte_carlo(0.3, 200_000, 103)?,
        factorization_identity(10, 104)?,
        finite_dataset_enumeration(6, 105)?,
    ];
    let b = balanced_identity(&[2, 3, 4], 20, 0.3, 0.005, 106)?;
    out.push(OracleResult::below(
        "balanced aligned diffusion closed form",
        b.diffusion,
        1e-8,
        "L in {2,3,4}, 20 amplitudes".into(),
    ));
    out.push(OracleResult::below(
        "balanced aligned cross-mode diffusion",
        b.cross,
        1e-10,
        "largest |D_ab|, a != b".into(),
    ));
    out.push(OracleResult::below(
        "balanced aligned Ito drift, Hessian vs exact aligned form",
        b.ito_exact,
        1e-8,
        "L in {2,3,4}, 20 amplitudes".into(),
    ));
    out.push(logistic_tracking(1e-4, 15.0, 1e-3, 107)?);
    Ok(out)
}
