//! Teacher–student setup: teacher with explicit SVD, data sampling, the deep
//! linear network and its exact gradients and Jacobian blocks.
//!
//! Layer indices in the public API are 1-based (`1 ≤ l ≤ L`), matching the
//! usual `W_1 … W_L` notation; `W_{>l} = W_L⋯W_{l+1}` and
//! `W_{<l} = W_{l-1}⋯W_1`, with empty products equal to the identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    gaussian_matrix, identity, kron, psd_sqrt, random_orthogonal, Mat, RngStream, Vector,
    DEFAULT_CLAMP_TOL,
};

/// Target map `M = U S Vᵀ` plus isotropic label noise `σ_q`.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub m: Mat,
    pub u: Mat,
    pub v: Mat,
    pub singular_values: Vec<f64>,
    pub sigma_q: f64,
}

impl Teacher {
    /// Assemble a teacher from explicit orthogonal bases.
    pub fn from_basis(u: Mat, v: Mat, singular_values: &[f64], sigma_q: f64) -> Result<Self> {
        validate_singular_values(singular_values, u.nrows().min(v.nrows()))?;
        if !u.is_square() || !v.is_square() {
            return Err(Error::Shape("teacher bases must be square".into()));
        }
        if sigma_q < 0.0 || !sigma_q.is_finite() {
            return Err(Error::InvalidArgument(format!("sigma_q must be >= 0, got {sigma_q}")));
        }
        let (d_out, d_in) = (u.nrows(), v.nrows());
        let mut s = Mat::zeros(d_out, d_in);
        for (i, &sv) in singular_values.iter().enumerate() {
            s[(i, i)] = sv;
        }
        let m = &u * s * v.transpose();
        Ok(Self {
            m,
            u,
            v,
            singular_values: singular_values.to_vec(),
            sigma_q,
        })
    }

    /// Identity bases, so `M = diag(s)` padded with zeros.
    pub fn canonical(d_out: usize, d_in: usize, singular_values: &[f64], sigma_q: f64) -> Result<Self> {
        Self::from_basis(identity(d_out), identity(d_in), singular_values, sigma_q)
    }

    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn d_in(&self) -> usize {
        self.m.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.m.nrows()
    }

    /// Left singular vector `u_α` as a column.
    pub fn u_col(&self, alpha: usize) -> Mat {
        self.u.columns(alpha, 1).into_owned()
    }

    /// Right singular vector `v_α` as a column.
    pub fn v_col(&self, alpha: usize) -> Mat {
        self.v.columns(alpha, 1).into_owned()
    }

    /// `Σ_q = σ_q² I`.
    pub fn label_covariance(&self) -> Mat {
        identity(self.d_out()) * (self.sigma_q * self.sigma_q)
    }
}

fn validate_singular_values(values: &[f64], max_rank: usize) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("at least one singular value is required".into()));
    }
    if values.len() > max_rank {
        return Err(Error::InvalidArgument(format!(
            "{} singular values do not fit a teacher of rank at most {max_rank}",
            values.len()
        )));
    }
    if values.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument("singular values must be positive".into()));
    }
    if values.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidArgument("singular values must be non-increasing".into()));
    }
    Ok(())
}

/// Teacher with Haar-random singular vectors.
pub fn build_teacher(
    d_out: usize,
    d_in: usize,
    singular_values: &[f64],
    sigma_q: f64,
    rng: &mut RngStream,
) -> Result<Teacher> {
    validate_singular_values(singular_values, d_out.min(d_in))?;
    let u = random_orthogonal(d_out, rng);
    let v = random_orthogonal(d_in, rng);
    Teacher::from_basis(u, v, singular_values, sigma_q)
}

/// `W_1 … W_L` with `W_l ∈ R^{d_l × d_{l-1}}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Mat>,
}

impl Network {
    pub fn new(layers: Vec<Mat>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].ncols() != pair[0].nrows() {
                return Err(Error::Shape(format!(
                    "layer {} is {}x{} but layer {} is {}x{}",
                    i + 1,
                    pair[0].nrows(),
                    pair[0].ncols(),
                    i + 2,
                    pair[1].nrows(),
                    pair[1].ncols()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `W_l`, 1-based.
    pub fn layer(&self, l: usize) -> &Mat {
        &self.layers[l - 1]
    }

    pub fn layers(&self) -> &[Mat] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Mat] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Mat> {
        self.layers
    }

    /// `[d_0, d_1, …, d_L]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].ncols()];
        dims.extend(self.layers.iter().map(|w| w.nrows()));
        dims
    }

    /// Sizes `p_l = d_l d_{l-1}` of each vectorised layer.
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|w| w.len()).collect()
    }

    /// Total parameter count `P`.
    pub fn num_params(&self) -> usize {
        self.layer_sizes().iter().sum()
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].ncols()
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|w| w.iter().all(|x| x.is_finite()))
    }

    /// Index of the first layer holding a non-finite entry, 1-based.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|w| w.iter().any(|x| !x.is_finite()))
            .map(|i| i + 1)
    }

    /// Stacked `(vec W_1; …; vec W_L)`.
    pub fn flatten(&self) -> Vector {
        let mut out = Vec::with_capacity(self.num_params());
        for w in &self.layers {
            out.extend_from_slice(w.as_slice());
        }
        Vector::from_vec(out)
    }

    /// Rebuild a network of the same shape from stacked parameters.
    pub fn with_params(&self, theta: &[f64]) -> Self {
        assert_eq!(theta.len(), self.num_params());
        let mut offset = 0;
        let layers = self
            .layers
            .iter()
            .map(|w| {
                let n = w.len();
                let m = Mat::from_column_slice(w.nrows(), w.ncols(), &theta[offset..offset + n]);
                offset += n;
                m
            })
            .collect();
        Self { layers }
    }
}

/// Initialization scale and balance choice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub gamma: f64,
    pub balanced: bool,
    pub seed: u64,
}

/// Small random initialization.
///
/// Unbalanced: `W_l` entries i.i.d. `N(0, min(d_{l-1}, d_l)^{-γ})`.
///
/// Balanced: `W_l = R_l D_l R_{l-1}ᵀ` with Haar `R_0 … R_L` and every `D_l`
/// carrying the same diagonal `δ_1 … δ_r` (`r = min_l d_l`), so
/// `W_{l+1}ᵀ W_{l+1} = W_l W_lᵀ` holds exactly. `δ_i = c |z_i|` with `c` chosen
/// so `E‖W_L⋯W_1‖²_F` equals the unbalanced value `∏ d_l · ∏ var_l`.
pub fn init_network(dims: &[usize], spec: &InitSpec, rng: &mut RngStream) -> Result<Network> {
    if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(
            "dimension ladder needs at least two positive entries".into(),
        ));
    }
    if !(spec.gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be > 0, got {}", spec.gamma)));
    }
    let depth = dims.len() - 1;
    let variances: Vec<f64> = (1..=depth)
        .map(|l| (dims[l - 1].min(dims[l]) as f64).powf(-spec.gamma))
        .collect();
    if !spec.balanced {
        let layers = (1..=depth)
            .map(|l| gaussian_matrix(dims[l], dims[l - 1], rng) * variances[l - 1].sqrt())
            .collect();
        return Network::new(layers);
    }

    let r = *dims.iter().min().expect("non-empty");
    let rotations: Vec<Mat> = dims.iter().map(|&d| random_orthogonal(d, rng)).collect();
    let target_sq: f64 = dims.iter().map(|&d| d as f64).product::<f64>() * variances.iter().product::<f64>();
    // E|z|^{2L} = (2L-1)!!
    let double_factorial: f64 = (1..=depth).map(|k| (2 * k - 1) as f64).product();
    let scale = (target_sq / (r as f64 * double_factorial)).powf(1.0 / (2.0 * depth as f64));
    let diag: Vec<f64> = (0..r).map(|_| scale * rng.normal().abs()).collect();
    let layers = (1..=depth)
        .map(|l| {
            let mut d = Mat::zeros(dims[l], dims[l - 1]);
            for (i, &delta) in diag.iter().enumerate() {
                d[(i, i)] = delta;
            }
            &rotations[l] * d * rotations[l - 1].transpose()
        })
        .collect();
    Network::new(layers)
}

/// Exactly balanced network aligned with the teacher: `W_l = R_l D R_{l-1}ᵀ`
/// with `R_0 = V`, `R_L = U` and `D = diag(w_γ^{1/L})`, so the end-to-end
/// map is `U diag(w) Vᵀ`. Hidden rotations come from `rng`.
pub fn aligned_balanced_network(
    teacher: &Teacher,
    hidden: &[usize],
    amplitudes: &[f64],
    rng: &mut RngStream,
) -> Result<Network> {
    let mut dims = vec![teacher.d_in()];
    dims.extend_from_slice(hidden);
    dims.push(teacher.d_out());
    let depth = dims.len() - 1;
    let r = *dims.iter().min().expect("non-empty");
    if amplitudes.len() > r {
        return Err(Error::InvalidArgument(format!(
            "{} amplitudes exceed the narrowest width {r}",
            amplitudes.len()
        )));
    }
    if let Some(&w) = amplitudes.iter().find(|&&w| w < 0.0) {
        return Err(Error::NegativeAmplitude(w));
    }
    let mut rotations = Vec::with_capacity(depth + 1);
    rotations.push(teacher.v.clone());
    for &h in hidden {
        rotations.push(random_orthogonal(h, rng));
    }
    rotations.push(teacher.u.clone());
    let root = 1.0 / depth as f64;
    let layers = (1..=depth)
        .map(|l| {
            let mut d = Mat::zeros(dims[l], dims[l - 1]);
            for (i, &w) in amplitudes.iter().enumerate() {
                d[(i, i)] = w.powf(root);
            }
            &rotations[l] * d * rotations[l - 1].transpose()
        })
        .collect();
    Network::new(layers)
}

pub fn end_to_end(net: &Network) -> Mat {
    let mut w = net.layers[0].clone();
    for layer in &net.layers[1..] {
        w = layer * w;
    }
    w
}

/// `W_{>l}` and `W_{<l}` for every layer at once.
#[derive(Clone, Debug)]
pub struct Partials {
    /// `above[l-1] = W_{>l}` (`d_L × d_l`)
    pub above: Vec<Mat>,
    /// `below[l-1] = W_{<l}` (`d_{l-1} × d_0`)
    pub below: Vec<Mat>,
}

impl Partials {
    pub fn new(net: &Network) -> Self {
        let depth = net.depth();
        let dims = net.dims();
        let mut below = Vec::with_capacity(depth);
        below.push(identity(dims[0]));
        for l in 1..depth {
            let next = &net.layers[l - 1] * &below[l - 1];
            below.push(next);
        }
        let mut above = vec![Mat::zeros(0, 0); depth];
        above[depth - 1] = identity(dims[depth]);
        for l in (1..depth).rev() {
            above[l - 1] = &above[l] * &net.layers[l];
        }
        Self { above, below }
    }

    /// End-to-end map `W_{>1} W_1`.
    pub fn end_to_end(&self, net: &Network) -> Mat {
        &self.above[0] * &net.layers[0]
    }
}

fn check_layer(net: &Network, l: usize) -> Result<()> {
    if l == 0 || l > net.depth() {
        return Err(Error::InvalidArgument(format!(
            "layer index {l} outside 1..={}",
            net.depth()
        )));
    }
    Ok(())
}

/// `(W_{>l}, W_{<l})`.
pub fn partials(net: &Network, l: usize) -> Result<(Mat, Mat)> {
    check_layer(net, l)?;
    let dims = net.dims();
    let mut above = identity(dims[net.depth()]);
    for k in (l + 1..=net.depth()).rev() {
        above = &above * net.layer(k);
    }
    let mut below = identity(dims[0]);
    for k in 1..l {
        below = net.layer(k) * below;
    }
    Ok((above, below))
}

/// `Δ = M − W`.
pub fn residual(net: &Network, teacher: &Teacher) -> Mat {
    &teacher.m - end_to_end(net)
}

/// Whitened-input population loss `½‖M − W‖²_F`, without the constant
/// label-noise offset `½ tr Σ_q`.
pub fn population_loss(net: &Network, teacher: &Teacher) -> f64 {
    0.5 * residual(net, teacher).norm_squared()
}

/// `G_l = −W_{>l}ᵀ Δ W_{<l}ᵀ`.
pub fn population_gradient(net: &Network, teacher: &Teacher) -> Vec<Mat> {
    let parts = Partials::new(net);
    let delta = &teacher.m - parts.end_to_end(net);
    gradient_from_residual(&parts, &delta)
}

pub(crate) fn gradient_from_residual(parts: &Partials, delta: &Mat) -> Vec<Mat> {
    parts
        .above
        .iter()
        .zip(&parts.below)
        .map(|(above, below)| -(above.transpose() * delta * below.transpose()))
        .collect()
}

/// Inputs as columns of `x`, labels as columns of `y`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Mat,
    pub y: Mat,
}

impl Batch {
    pub fn new(x: Mat, y: Mat) -> Result<Self> {
        if x.ncols() != y.ncols() || x.ncols() == 0 {
            return Err(Error::Shape(format!(
                "batch needs equal non-zero column counts, got {} and {}",
                x.ncols(),
                y.ncols()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn size(&self) -> usize {
        self.x.ncols()
    }

    /// Columns `idx` as a new batch.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let x = Mat::from_fn(self.x.nrows(), idx.len(), |r, c| self.x[(r, idx[c])]);
        let y = Mat::from_fn(self.y.nrows(), idx.len(), |r, c| self.y[(r, idx[c])]);
        Batch { x, y }
    }
}

/// Finite stored sample of size `N` for offline SGD.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Batch,
}

impl Dataset {
    pub fn sample(teacher: &Teacher, n: usize, rng: &mut RngStream) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
        }
        Ok(Self {
            samples: sample_batch(teacher, n, rng),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.size()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `x ~ N(0, I)`, `y = M x + ξ_q` with `ξ_q ~ N(0, σ_q² I)` drawn independently.
pub fn sample_batch(teacher: &Teacher, b: usize, rng: &mut RngStream) -> Batch {
    let x = gaussian_matrix(teacher.d_in(), b, rng);
    let mut y = &teacher.m * &x;
    if teacher.sigma_q > 0.0 {
        y += gaussian_matrix(teacher.d_out(), b, rng) * teacher.sigma_q;
    }
    Batch { x, y }
}

/// `g_l = −W_{>l}ᵀ ε xᵀ W_{<l}ᵀ` with `ε = y − W x`.
pub fn per_sample_gradient(net: &Network, x: &Mat, y: &Mat) -> Vec<Mat> {
    let parts = Partials::new(net);
    per_sample_gradient_with(&parts, net, x, y)
}

pub(crate) fn per_sample_gradient_with(parts: &Partials, net: &Network, x: &Mat, y: &Mat) -> Vec<Mat> {
    let eps = y - parts.end_to_end(net) * x;
    parts
        .above
        .iter()
        .zip(&parts.below)
        .map(|(above, below)| {
            let left = above.transpose() * &eps;
            let right = below * x;
            -(left * right.transpose())
        })
        .collect()
}

/// Mean of per-sample gradients over the batch columns.
pub fn batch_gradient(net: &Network, batch: &Batch) -> Vec<Mat> {
    let parts = Partials::new(net);
    batch_gradient_with(&parts, net, batch)
}

pub(crate) fn batch_gradient_with(parts: &Partials, net: &Network, batch: &Batch) -> Vec<Mat> {
    // (1/b) Σ_i ε_i x_iᵀ = E Xᵀ / b, then sandwich once
    let b = batch.size() as f64;
    let eps = &batch.y - parts.end_to_end(net) * &batch.x;
    let cross = &eps * batch.x.transpose() / b;
    gradient_from_residual(parts, &cross)
}

/// Empirical batch loss `(1/b) Σ ½‖y_i − W x_i‖²`.
pub fn batch_loss(net: &Network, batch: &Batch) -> f64 {
    let eps = &batch.y - end_to_end(net) * &batch.x;
    0.5 * eps.norm_squared() / batch.size() as f64
}

/// `J_l = W_{<l}ᵀ ⊗ W_{>l}`, shape `(d_0 d_L) × (d_{l-1} d_l)`, oriented so
/// that `vec(G_l) = −J_lᵀ vec(Δ)`.
pub fn jacobian_block(net: &Network, l: usize) -> Result<Mat> {
    let (above, below) = partials(net, l)?;
    Ok(kron(&below.transpose(), &above))
}

/// `K_l = J_l J_lᵀ = (W_{<l}ᵀ W_{<l}) ⊗ (W_{>l} W_{>l}ᵀ)`.
pub fn ntk_block(net: &Network, l: usize) -> Result<Mat> {
    let j = jacobian_block(net, l)?;
    Ok(&j * j.transpose())
}

/// Row-major matrix carrier for JSON documents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Mat> for MatRecord {
    fn from(m: &Mat) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl TryFrom<&MatRecord> for Mat {
    type Error = Error;

    fn try_from(rec: &MatRecord) -> Result<Mat> {
        if rec.data.len() != rec.rows * rec.cols {
            return Err(Error::Shape(format!(
                "matrix record {}x{} carries {} entries",
                rec.rows,
                rec.cols,
                rec.data.len()
            )));
        }
        Ok(Mat::from_row_slice(rec.rows, rec.cols, &rec.data))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub d_out: usize,
    pub d_in: usize,
    pub singular_values: Vec<f64>,
    pub sigma_q: f64,
    pub seed: Option<u64>,
    pub m: MatRecord,
    pub u: MatRecord,
    pub v: MatRecord,
}

impl TeacherRecord {
    pub fn new(teacher: &Teacher, seed: Option<u64>) -> Self {
        Self {
            d_out: teacher.d_out(),
            d_in: teacher.d_in(),
            singular_values: teacher.singular_values.clone(),
            sigma_q: teacher.sigma_q,
            seed,
            m: (&teacher.m).into(),
            u: (&teacher.u).into(),
            v: (&teacher.v).into(),
        }
    }

    pub fn to_teacher(&self) -> Result<Teacher> {
        let u = Mat::try_from(&self.u)?;
        let v = Mat::try_from(&self.v)?;
        Teacher::from_basis(u, v, &self.singular_values, self.sigma_q)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub dims: Vec<usize>,
    pub init: Option<InitSpec>,
    pub layers: Vec<MatRecord>,
}

impl NetworkRecord {
    pub fn new(net: &Network, init: Option<InitSpec>) -> Self {
        Self {
            dims: net.dims(),
            init,
            layers: net.layers().iter().map(MatRecord::from).collect(),
        }
    }

    pub fn to_network(&self) -> Result<Network> {
        let layers = self
            .layers
            .iter()
            .map(Mat::try_from)
            .collect::<Result<Vec<_>>>()?;
        let net = Network::new(layers)?;
        if net.dims() != self.dims {
            return Err(Error::Shape("network record dims disagree with its layers".into()));
        }
        Ok(net)
    }
}

/// Convenience: `Σ_q^{1/2}` for a general label covariance.
pub fn label_noise_root(sigma_q_matrix: &Mat) -> Result<Mat> {
    psd_sqrt(sigma_q_matrix, DEFAULT_CLAMP_TOL)
}
