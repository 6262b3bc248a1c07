//! Modewise view of training: amplitudes `w_α = u_αᵀ W v_α`, their
//! Jacobians and Hessians in parameter space, empirical diffusion and Itô
//! drift, and the scalar closed forms on the balanced, aligned manifold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{jacobian_block, partials, Network, Partials, Teacher};
use crate::noisecov::NoiseCovariance;
use crate::numerics::{identity, kron, Mat};

/// Per-mode observables at one parameter state.
#[derive(Clone, Debug, Default)]
pub struct ModeReport {
    /// `w_α` for every singular direction `α < min(d_0, d_L)`.
    pub amplitudes: Vec<f64>,
    /// `cross[(α, β)] = u_αᵀ W v_β`, `d_L × d_0`.
    pub cross: Mat,
    /// Stacked `a_α` columns, one per teacher mode (rank only).
    pub mode_jacobians: Option<Mat>,
    /// `D_{αβ}` over teacher modes.
    pub diffusion_emp: Option<Mat>,
    pub ito_drift: Option<Vec<f64>>,
    pub grad_drift: Option<Vec<f64>>,
}

/// Amplitudes and cross-mode amplitudes `Uᵀ W V`.
pub fn mode_amplitudes(net: &Network, teacher: &Teacher) -> ModeReport {
    let w = crate::model::end_to_end(net);
    amplitudes_from_map(&w, teacher)
}

fn amplitudes_from_map(w: &Mat, teacher: &Teacher) -> ModeReport {
    let cross = teacher.u.transpose() * w * &teacher.v;
    let n = cross.nrows().min(cross.ncols());
    ModeReport {
        amplitudes: (0..n).map(|a| cross[(a, a)]).collect(),
        cross,
        ..Default::default()
    }
}

fn check_mode(teacher: &Teacher, alpha: usize) -> Result<()> {
    if alpha >= teacher.rank() {
        return Err(Error::InvalidArgument(format!(
            "mode {alpha} outside teacher rank {}",
            teacher.rank()
        )));
    }
    Ok(())
}

/// `A_{l,α} = (W_{>l}ᵀ u_α)(W_{<l} v_α)ᵀ` for every layer.
fn jacobian_blocks(parts: &Partials, teacher: &Teacher, alpha: usize) -> Vec<Mat> {
    let u = teacher.u_col(alpha);
    let v = teacher.v_col(alpha);
    parts
        .above
        .iter()
        .zip(&parts.below)
        .map(|(above, below)| (above.transpose() * &u) * (below * &v).transpose())
        .collect()
}

fn stack_vecs(blocks: &[Mat]) -> Mat {
    let total: usize = blocks.iter().map(|b| b.len()).sum();
    let mut out = Vec::with_capacity(total);
    for b in blocks {
        out.extend_from_slice(b.as_slice());
    }
    Mat::from_vec(total, 1, out)
}

/// Stacked `a_α = (vec A_{1,α}; …; vec A_{L,α})`, the gradient of `w_α`.
pub fn mode_jacobian(net: &Network, teacher: &Teacher, alpha: usize) -> Result<Mat> {
    check_mode(teacher, alpha)?;
    let parts = Partials::new(net);
    Ok(stack_vecs(&jacobian_blocks(&parts, teacher, alpha)))
}

/// Same vector through the network Jacobian: `a_{l,α} = J_lᵀ (v_α ⊗ u_α)`.
pub fn mode_jacobian_via_ntk(net: &Network, teacher: &Teacher, alpha: usize) -> Result<Mat> {
    check_mode(teacher, alpha)?;
    let vu = kron(&teacher.v_col(alpha), &teacher.u_col(alpha));
    let blocks = (1..=net.depth())
        .map(|l| Ok(jacobian_block(net, l)?.transpose() * &vu))
        .collect::<Result<Vec<_>>>()?;
    Ok(stack_vecs(&blocks))
}

/// `D_{αβ} = η a_αᵀ Σ a_β` from an assembled covariance; `report` must carry
/// mode Jacobians.
pub fn empirical_mode_diffusion(report: &ModeReport, sigma: &NoiseCovariance, eta: f64) -> Result<Mat> {
    let a = report
        .mode_jacobians
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("report carries no mode Jacobians".into()))?;
    if a.nrows() != sigma.full.nrows() {
        return Err(Error::Shape(format!(
            "mode Jacobians have {} rows, covariance is {}x{}",
            a.nrows(),
            sigma.full.nrows(),
            sigma.full.ncols()
        )));
    }
    let d = a.transpose() * &sigma.full * a * eta;
    Ok((&d + d.transpose()) * 0.5)
}

/// `G_α = Σ_l (W_{>l} W_{>l}ᵀ u_α)(W_{<l}ᵀ W_{<l} v_α)ᵀ`, `d_L × d_0`.
///
/// `a_αᵀ ξ = ⟨G_α, S⟩` for parameter noise `ξ_l = W_{>l}ᵀ S W_{<l}ᵀ`.
fn mode_gram(parts: &Partials, teacher: &Teacher, alpha: usize) -> Mat {
    let u = teacher.u_col(alpha);
    let v = teacher.v_col(alpha);
    let mut g = Mat::zeros(u.nrows(), v.nrows());
    for (above, below) in parts.above.iter().zip(&parts.below) {
        let p = above * (above.transpose() * &u);
        let q = below.transpose() * (below * &v);
        g += p * q.transpose();
    }
    g
}

/// Empirical `D_{αβ}` over all teacher modes without assembling `Σ`:
/// `a_αᵀ Σ a_β = ⟨ΔᵀG_α, ΔᵀG_β⟩ + ⟨ΔᵀG_α, (ΔᵀG_β)ᵀ⟩ + tr(G_αᵀ Σ_q G_β)`,
/// scaled by `η / b`.
pub fn fast_mode_diffusion(net: &Network, teacher: &Teacher, sigma_q_matrix: &Mat, eta: f64, b: usize) -> Mat {
    let parts = Partials::new(net);
    let delta = &teacher.m - parts.end_to_end(net);
    fast_mode_diffusion_with(&parts, &delta, teacher, sigma_q_matrix, eta / b as f64)
}

pub(crate) fn fast_mode_diffusion_with(
    parts: &Partials,
    delta: &Mat,
    teacher: &Teacher,
    sigma_q_matrix: &Mat,
    beta: f64,
) -> Mat {
    let r = teacher.rank();
    let grams: Vec<Mat> = (0..r).map(|a| mode_gram(parts, teacher, a)).collect();
    let projected: Vec<Mat> = grams.iter().map(|g| delta.transpose() * g).collect();
    let labelled: Vec<Mat> = grams.iter().map(|g| sigma_q_matrix * g).collect();
    let mut d = Mat::zeros(r, r);
    for a in 0..r {
        for c in a..r {
            let value = projected[a].dot(&projected[c])
                + projected[a].dot(&projected[c].transpose())
                + grams[a].dot(&labelled[c]);
            d[(a, c)] = beta * value;
            d[(c, a)] = beta * value;
        }
    }
    d
}

/// NTK form of the data part of `D_{αβ}`:
/// `η (v_α⊗u_α)ᵀ Σ_{l,m} K_l (I⊗Δ)(I+C)(I⊗Δ)ᵀ K_m (v_β⊗u_β)`.
pub fn ntk_mode_diffusion(net: &Network, teacher: &Teacher, alpha: usize, beta_mode: usize, eta: f64) -> Result<f64> {
    check_mode(teacher, alpha)?;
    check_mode(teacher, beta_mode)?;
    let d0 = net.d_in();
    let delta = crate::model::residual(net, teacher);
    let lift = kron(&identity(d0), &delta);
    let middle = &lift * (identity(d0 * d0) + crate::numerics::commutation_matrix(d0, d0)) * lift.transpose();
    let mut k_sum = Mat::zeros(d0 * net.d_out(), d0 * net.d_out());
    for l in 1..=net.depth() {
        k_sum += crate::model::ntk_block(net, l)?;
    }
    let ea = kron(&teacher.v_col(alpha), &teacher.u_col(alpha));
    let eb = kron(&teacher.v_col(beta_mode), &teacher.u_col(beta_mode));
    let value = (ea.transpose() * &k_sum * middle * &k_sum * eb)[(0, 0)];
    Ok(eta * value)
}

/// `W_{l-1} ⋯ W_{m+1}` for `l > m`, identity when `l = m + 1`.
fn middle_product(net: &Network, l: usize, m: usize) -> Mat {
    let mut out = identity(net.dims()[m]);
    for k in m + 1..l {
        out = net.layer(k) * out;
    }
    out
}

/// Hessian block `∇²_{l,m} w_α` in stacked vec coordinates (1-based).
/// For `l > m` it is `(W_{l-1:m+1} ⊗ W_{>l}ᵀ u_α)(v_αᵀ W_{<m}ᵀ ⊗ I_{d_m})`;
/// `l < m` is the transpose of the mirrored block and `l = m` is zero.
pub fn hessian_block(net: &Network, teacher: &Teacher, alpha: usize, l: usize, m: usize) -> Result<Mat> {
    check_mode(teacher, alpha)?;
    partials(net, l)?;
    partials(net, m)?;
    if l == m {
        let p = net.layer_sizes()[l - 1];
        return Ok(Mat::zeros(p, p));
    }
    if l < m {
        return Ok(hessian_block(net, teacher, alpha, m, l)?.transpose());
    }
    let (above_l, _) = partials(net, l)?;
    let (_, below_m) = partials(net, m)?;
    let left = kron(&middle_product(net, l, m), &(above_l.transpose() * teacher.u_col(alpha)));
    let right = kron(
        &(teacher.v_col(alpha).transpose() * below_m.transpose()),
        &identity(net.dims()[m]),
    );
    Ok(left * right)
}

/// `(η/2) tr(Σ ∇²w_α)` from dense Hessian blocks and an assembled covariance.
pub fn ito_drift(net: &Network, teacher: &Teacher, alpha: usize, sigma: &NoiseCovariance, eta: f64) -> Result<f64> {
    check_mode(teacher, alpha)?;
    let depth = net.depth();
    let mut total = 0.0;
    for l in 1..=depth {
        for m in 1..=depth {
            if l != m {
                total += sigma.block(l, m).dot(&hessian_block(net, teacher, alpha, l, m)?);
            }
        }
    }
    Ok(0.5 * eta * total)
}

/// Itô drift for every teacher mode without Hessians or `Σ`:
/// `(η/2b) tr(Σ H) = (η/b) Σ_{l>m} E[pᵀ S N S q]` with
/// `p = W_{>l}W_{>l}ᵀu`, `q = W_{<m}ᵀW_{<m}v`, `N = W_{<l}ᵀ W_{l-1:m+1} W_{>m}ᵀ`
/// and `E[pᵀSNSq] = (Δᵀp)ᵀ(tr(NΔ) I + (NΔ)ᵀ) q + pᵀ Σ_q Nᵀ q`.
pub fn fast_ito_drift(net: &Network, teacher: &Teacher, sigma_q_matrix: &Mat, eta: f64, b: usize) -> Vec<f64> {
    let parts = Partials::new(net);
    let delta = &teacher.m - parts.end_to_end(net);
    fast_ito_drift_with(net, &parts, &delta, teacher, sigma_q_matrix, eta / b as f64)
}

pub(crate) fn fast_ito_drift_with(
    net: &Network,
    parts: &Partials,
    delta: &Mat,
    teacher: &Teacher,
    sigma_q_matrix: &Mat,
    beta: f64,
) -> Vec<f64> {
    let depth = net.depth();
    let r = teacher.rank();
    let us: Vec<Mat> = (0..r).map(|a| teacher.u_col(a)).collect();
    let vs: Vec<Mat> = (0..r).map(|a| teacher.v_col(a)).collect();
    let mut out = vec![0.0; r];
    for l in 2..=depth {
        let above_l = &parts.above[l - 1];
        let below_l = &parts.below[l - 1];
        // N_{l,m} accumulates W_{<l}ᵀ W_{l-1:m+1} as m decreases
        let mut left = below_l.transpose();
        for m in (1..l).rev() {
            let above_m = &parts.above[m - 1];
            let below_m = &parts.below[m - 1];
            if m + 1 < l {
                left = &left * net.layer(m + 1);
            }
            let n = &left * above_m.transpose();
            let q_mat = &n * delta;
            let tr_q = q_mat.trace();
            for a in 0..r {
                let p = above_l * (above_l.transpose() * &us[a]);
                let q = below_m.transpose() * (below_m * &vs[a]);
                let dp = delta.transpose() * &p;
                let data = tr_q * dp.dot(&q) + dp.dot(&(q_mat.transpose() * &q));
                let label = (p.transpose() * sigma_q_matrix * n.transpose() * &q)[(0, 0)];
                out[a] += beta * (data + label);
            }
        }
    }
    out
}

/// Gradient-flow drift `−a_αᵀ g = ⟨G_α, Δ⟩` for every teacher mode.
pub fn grad_drift(net: &Network, teacher: &Teacher) -> Vec<f64> {
    let parts = Partials::new(net);
    let delta = &teacher.m - parts.end_to_end(net);
    grad_drift_with(&parts, &delta, teacher)
}

pub(crate) fn grad_drift_with(parts: &Partials, delta: &Mat, teacher: &Teacher) -> Vec<f64> {
    (0..teacher.rank())
        .map(|a| mode_gram(parts, teacher, a).dot(delta))
        .collect()
}

/// What [`mode_report`] should fill beyond amplitudes.
#[derive(Clone, Copy, Debug)]
pub struct ReportOptions {
    pub eta: f64,
    pub batch_size: usize,
    pub jacobians: bool,
    pub diffusion: bool,
    pub drifts: bool,
}

/// Full per-state report through the factorized routes.
pub fn mode_report(net: &Network, teacher: &Teacher, opts: &ReportOptions) -> ModeReport {
    let parts = Partials::new(net);
    let w = parts.end_to_end(net);
    let delta = &teacher.m - &w;
    let mut report = amplitudes_from_map(&w, teacher);
    let sigma_q = teacher.label_covariance();
    let beta = opts.eta / opts.batch_size as f64;
    if opts.jacobians {
        let cols: Vec<Mat> = (0..teacher.rank())
            .map(|a| stack_vecs(&jacobian_blocks(&parts, teacher, a)))
            .collect();
        let mut a = Mat::zeros(net.num_params(), cols.len());
        for (i, c) in cols.iter().enumerate() {
            a.column_mut(i).copy_from(c);
        }
        report.mode_jacobians = Some(a);
    }
    if opts.diffusion {
        report.diffusion_emp = Some(fast_mode_diffusion_with(&parts, &delta, teacher, &sigma_q, beta));
    }
    if opts.drifts {
        report.grad_drift = Some(grad_drift_with(&parts, &delta, teacher));
        report.ito_drift = Some(fast_ito_drift_with(net, &parts, &delta, teacher, &sigma_q, beta));
    }
    report
}

/// Which closed form to use for the Itô drift on the balanced, aligned
/// manifold. With `b = 2(L−2)/L` and `c = β L (L−1) w^b`:
///
/// * `SquaredNoise`: `c (s − w) + (c/2) σ_q²`
/// * `LinearNoise`: `c (s − w) + c σ_q`
/// * `HalfLinearNoise`: `c ((s − w) + σ_q/2)`
/// * `Contraction`: `(β/2) L (L−1) w^{(3L−4)/L} (2 (s − w)² + σ_q²)`, the exact
///   value of `(η/2b) tr(Σ H)` for an isolated aligned mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItoVariant {
    #[default]
    SquaredNoise,
    LinearNoise,
    HalfLinearNoise,
    Contraction,
}

impl std::str::FromStr for ItoVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared_noise" => Ok(Self::SquaredNoise),
            "linear_noise" => Ok(Self::LinearNoise),
            "half_linear_noise" => Ok(Self::HalfLinearNoise),
            "contraction" => Ok(Self::Contraction),
            other => Err(Error::InvalidArgument(format!("unknown Itô variant {other:?}"))),
        }
    }
}

/// Scalar coefficients of one mode on the balanced, aligned manifold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedTheory {
    pub s: f64,
    pub depth: usize,
    /// `η / b`
    pub beta: f64,
    pub sigma_q: f64,
    #[serde(default)]
    pub ito: ItoVariant,
}

impl BalancedTheory {
    pub fn new(s: f64, depth: usize, beta: f64, sigma_q: f64) -> Result<Self> {
        if !(s > 0.0) || depth == 0 || !(beta > 0.0) || !(sigma_q >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "balanced theory needs s > 0, L >= 1, beta > 0, sigma_q >= 0; got s={s}, L={depth}, beta={beta}, sigma_q={sigma_q}"
            )));
        }
        Ok(Self {
            s,
            depth,
            beta,
            sigma_q,
            ito: ItoVariant::SquaredNoise,
        })
    }

    pub fn with_ito(mut self, ito: ItoVariant) -> Self {
        self.ito = ito;
        self
    }

    /// `a = 4(L−1)/L`.
    pub fn a_exponent(&self) -> f64 {
        4.0 * (self.depth as f64 - 1.0) / self.depth as f64
    }

    pub fn grad_drift(&self, w: f64) -> Result<f64> {
        theory_grad_drift(self, w)
    }

    pub fn ito_drift(&self, w: f64) -> Result<f64> {
        theory_ito_drift(self, w)
    }

    pub fn drift(&self, w: f64) -> Result<f64> {
        Ok(self.grad_drift(w)? + self.ito_drift(w)?)
    }

    pub fn diffusion(&self, w: f64) -> Result<f64> {
        theory_diffusion(self, w)
    }
}

fn check_amplitude(w: f64) -> Result<()> {
    if w < 0.0 || w.is_nan() {
        return Err(Error::NegativeAmplitude(w));
    }
    Ok(())
}

/// `x^p` with `0^0 = 1`.
fn pow(x: f64, p: f64) -> f64 {
    if p == 0.0 {
        1.0
    } else {
        x.powf(p)
    }
}

/// `μ^grad(w) = (s − w) L w^{2(L−1)/L}`.
pub fn theory_grad_drift(th: &BalancedTheory, w: f64) -> Result<f64> {
    check_amplitude(w)?;
    let l = th.depth as f64;
    Ok((th.s - w) * l * pow(w, 2.0 * (l - 1.0) / l))
}

/// Itô drift in the variant selected by `th.ito`.
pub fn theory_ito_drift(th: &BalancedTheory, w: f64) -> Result<f64> {
    check_amplitude(w)?;
    let l = th.depth as f64;
    if th.depth == 1 {
        return Ok(0.0);
    }
    let c = th.beta * l * (l - 1.0) * pow(w, 2.0 * (l - 2.0) / l);
    let gap = th.s - w;
    let sq = th.sigma_q;
    Ok(match th.ito {
        ItoVariant::SquaredNoise => c * gap + 0.5 * c * sq * sq,
        ItoVariant::LinearNoise => c * gap + c * sq,
        ItoVariant::HalfLinearNoise => c * (gap + 0.5 * sq),
        ItoVariant::Contraction => {
            0.5 * th.beta * l * (l - 1.0) * pow(w, (3.0 * l - 4.0) / l) * (2.0 * gap * gap + sq * sq)
        }
    })
}

/// Exact Itô drift of mode `alpha` on a balanced net aligned with the
/// teacher at amplitudes `w` (all modes present). With `k = l − m`:
/// `β Σ_{k=1}^{L−1} (L−k) w_α^{(2L−2k−2)/L} [ (s_α−w_α)(Σ_γ n_γ (s_γ−w_γ) + n_α (s_α−w_α)) + σ_q² n_α ]`,
/// `n_γ = w_γ^{(L+2k−2)/L}`.
pub fn aligned_ito_drift(depth: usize, beta: f64, s: &[f64], w: &[f64], sigma_q: f64, alpha: usize) -> Result<f64> {
    if s.len() != w.len() || alpha >= s.len() {
        return Err(Error::Shape("amplitude and singular value lists must match".into()));
    }
    for &x in w {
        check_amplitude(x)?;
    }
    let l = depth as f64;
    let gap_a = s[alpha] - w[alpha];
    let mut total = 0.0;
    for k in 1..depth {
        let kf = k as f64;
        let n = |x: f64| pow(x, (l + 2.0 * kf - 2.0) / l);
        let tr: f64 = s.iter().zip(w).map(|(&sg, &wg)| n(wg) * (sg - wg)).sum();
        let na = n(w[alpha]);
        let inner = gap_a * (tr + na * gap_a) + sigma_q * sigma_q * na;
        total += (l - kf) * pow(w[alpha], (2.0 * l - 2.0 * kf - 2.0) / l) * inner;
    }
    Ok(beta * total)
}

/// `D(w) = β L² (2 (s − w)² + σ_q²) w^{4(L−1)/L}`.
pub fn theory_diffusion(th: &BalancedTheory, w: f64) -> Result<f64> {
    check_amplitude(w)?;
    let l = th.depth as f64;
    let gap = th.s - w;
    Ok(th.beta * l * l * (2.0 * gap * gap + th.sigma_q * th.sigma_q) * pow(w, th.a_exponent()))
}

/// Maximiser `w*` of the closed-form diffusion in `(0, s)`, absent when the
/// discriminant is negative:
/// `w* = ((a+1)s − √(s² − a(a+2)σ_q²/2)) / (a+2)`.
pub fn diffusion_peak(th: &BalancedTheory) -> Option<f64> {
    let a = th.a_exponent();
    let disc = th.s * th.s - a * (a + 2.0) * th.sigma_q * th.sigma_q / 2.0;
    if disc < 0.0 {
        return None;
    }
    let w = ((a + 1.0) * th.s - disc.sqrt()) / (a + 2.0);
    (w > 0.0 && w < th.s).then_some(w)
}

/// Largest `σ_q` with a diffusion peak: `σ_q² = s² L² / (4 (L−1)(3L−2))`.
pub fn sigma_q_max(s: f64, depth: usize) -> Result<f64> {
    if depth < 2 {
        return Err(Error::InvalidArgument("sigma_q_max needs depth >= 2".into()));
    }
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("s must be > 0, got {s}")));
    }
    let l = depth as f64;
    Ok((s * s * l * l / (4.0 * (l - 1.0) * (3.0 * l - 2.0))).sqrt())
}

/// Depth-2 gradient-flow solution `s / (1 + (s/w_0 − 1) e^{−2st})`.
pub fn gf_logistic(s: f64, w0: f64, t: f64) -> Result<f64> {
    if !(w0 > 0.0) {
        return Err(Error::InvalidArgument(format!("w0 must be > 0, got {w0}")));
    }
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("s must be > 0, got {s}")));
    }
    Ok(s / (1.0 + (s / w0 - 1.0) * (-2.0 * s * t).exp()))
}

/// First time the series reaches `frac · s`.
pub fn learned_time(times: &[f64], series: &[f64], s: f64, frac: f64) -> Option<f64> {
    times
        .iter()
        .zip(series)
        .find(|(_, &w)| w >= frac * s)
        .map(|(&t, _)| t)
}

/// Threshold used for "mode learned".
pub const LEARNED_FRACTION: f64 = 0.95;
