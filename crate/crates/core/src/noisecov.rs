//! SGD gradient-noise covariance: exact closed form, factorized sampler,
//! Monte-Carlo and finite-dataset estimators.
//!
//! With `A_l = W_{<l}`, `B_l = W_{>l}ᵀ` and `Δ = M − W`, block `(l, m)` is
//! `(A_l ⊗ B_lΔ)(I + C)(A_m ⊗ B_mΔ)ᵀ + (A_l A_mᵀ) ⊗ (B_l Σ_q B_mᵀ)`.
//! Since `C² = I`, `(I + C)/√2` is an exact square root of `I + C`, which is
//! what the factorized sampler exploits.

use crate::error::{Error, Result};
use crate::model::{
    per_sample_gradient_with, sample_batch, Dataset, Network, Partials, Teacher,
};
use crate::numerics::{
    check_symmetric, commutation_matrix, gaussian_matrix, identity, kron, psd_sqrt, Mat,
    RngStream, DEFAULT_CLAMP_TOL,
};

/// Full covariance plus its per-layer block view. `data_part` and
/// `label_part` are only known for the closed form.
#[derive(Clone, Debug)]
pub struct NoiseCovariance {
    pub layer_sizes: Vec<usize>,
    pub full: Mat,
    pub data_part: Option<Mat>,
    pub label_part: Option<Mat>,
}

impl NoiseCovariance {
    fn offsets(&self) -> Vec<usize> {
        let mut out = vec![0];
        for &p in &self.layer_sizes {
            out.push(out.last().unwrap() + p);
        }
        out
    }

    pub fn depth(&self) -> usize {
        self.layer_sizes.len()
    }

    /// Block `(l, m)`, 1-based.
    pub fn block(&self, l: usize, m: usize) -> Mat {
        let off = self.offsets();
        self.full
            .view((off[l - 1], off[m - 1]), (self.layer_sizes[l - 1], self.layer_sizes[m - 1]))
            .into_owned()
    }

    pub fn blocks(&self) -> Vec<Vec<Mat>> {
        let depth = self.depth();
        (1..=depth)
            .map(|l| (1..=depth).map(|m| self.block(l, m)).collect())
            .collect()
    }

    pub fn trace(&self) -> f64 {
        self.full.trace()
    }

    fn scaled(&self, factor: f64) -> Self {
        Self {
            layer_sizes: self.layer_sizes.clone(),
            full: &self.full * factor,
            data_part: self.data_part.as_ref().map(|m| m * factor),
            label_part: self.label_part.as_ref().map(|m| m * factor),
        }
    }
}

fn validate_label_covariance(sigma_q: &Mat, d_out: usize) -> Result<()> {
    if sigma_q.nrows() != d_out || sigma_q.ncols() != d_out {
        return Err(Error::Shape(format!(
            "label covariance must be {d_out}x{d_out}, got {}x{}",
            sigma_q.nrows(),
            sigma_q.ncols()
        )));
    }
    check_symmetric(sigma_q, 1e-10)?;
    // rejects non-PSD input
    psd_sqrt(sigma_q, DEFAULT_CLAMP_TOL).map(|_| ())
}

/// Per-layer data factors `A_l ⊗ B_lΔ`, each `p_l × d_0²`.
fn data_kron_factors(parts: &Partials, delta: &Mat) -> Vec<Mat> {
    parts
        .above
        .iter()
        .zip(&parts.below)
        .map(|(above, below)| kron(below, &(above.transpose() * delta)))
        .collect()
}

fn stack_rows(blocks: &[Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks[0].ncols();
    let mut out = Mat::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(b);
        r += b.nrows();
    }
    out
}

/// Exact population noise covariance for online single-sample SGD.
pub fn closed_form_covariance(net: &Network, teacher: &Teacher, sigma_q_matrix: &Mat) -> Result<NoiseCovariance> {
    validate_label_covariance(sigma_q_matrix, net.d_out())?;
    if teacher.d_in() != net.d_in() || teacher.d_out() != net.d_out() {
        return Err(Error::Shape("teacher and network disagree on input/output widths".into()));
    }
    let parts = Partials::new(net);
    let delta = &teacher.m - parts.end_to_end(net);
    let d0 = net.d_in();

    let d = stack_rows(&data_kron_factors(&parts, &delta));
    let i_plus_c = identity(d0 * d0) + commutation_matrix(d0, d0);
    let data_part = &d * i_plus_c * d.transpose();

    let sizes = net.layer_sizes();
    let p = net.num_params();
    let mut label_part = Mat::zeros(p, p);
    let mut row = 0;
    for l in 0..net.depth() {
        let (al, bl) = (&parts.below[l], parts.above[l].transpose());
        let bl_sigma = &bl * sigma_q_matrix;
        let mut col = 0;
        for m in 0..net.depth() {
            let (am, bm) = (&parts.below[m], parts.above[m].transpose());
            let block = kron(&(al * am.transpose()), &(&bl_sigma * bm.transpose()));
            label_part.view_mut((row, col), (sizes[l], sizes[m])).copy_from(&block);
            col += sizes[m];
        }
        row += sizes[l];
    }

    let full = &data_part + &label_part;
    Ok(NoiseCovariance {
        layer_sizes: sizes,
        full,
        data_part: Some(data_part),
        label_part: Some(label_part),
    })
}

/// Monte-Carlo estimate `(1/n) Σ (g_i − ḡ)(g_i − ḡ)ᵀ` over fresh online
/// samples, centred on the exact population gradient.
pub fn empirical_covariance(
    net: &Network,
    teacher: &Teacher,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<NoiseCovariance> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument("empirical covariance needs n_samples >= 2".into()));
    }
    let parts = Partials::new(net);
    let delta = &teacher.m - parts.end_to_end(net);
    let mean = flatten(&crate::model::gradient_from_residual(&parts, &delta));
    let p = net.num_params();
    let chunk = 512;
    let mut acc = Mat::zeros(p, p);
    let mut done = 0;
    while done < n_samples {
        let n = chunk.min(n_samples - done);
        let batch = sample_batch(teacher, n, rng);
        let mut centred = Mat::zeros(p, n);
        for i in 0..n {
            let x = batch.x.columns(i, 1).into_owned();
            let y = batch.y.columns(i, 1).into_owned();
            let g = flatten(&per_sample_gradient_with(&parts, net, &x, &y));
            centred.column_mut(i).copy_from(&(g - &mean));
        }
        acc += &centred * centred.transpose();
        done += n;
    }
    acc /= n_samples as f64;
    let full = (&acc + acc.transpose()) * 0.5;
    Ok(NoiseCovariance {
        layer_sizes: net.layer_sizes(),
        full,
        data_part: None,
        label_part: None,
    })
}

/// `Σ_b = Σ / b`.
pub fn batch_scaled(sigma: &NoiseCovariance, b: usize) -> Result<NoiseCovariance> {
    if b == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    Ok(sigma.scaled(1.0 / b as f64))
}

/// Covariance of the minibatch gradient when batches of size `b` are drawn
/// without replacement from a stored dataset of size `N`:
/// `(N − b) / (b (N − 1)) · Σ̂_N`, with `Σ̂_N` the dataset covariance of
/// per-sample gradients about their dataset mean.
pub fn finite_dataset_covariance(net: &Network, dataset: &Dataset, b: usize) -> Result<NoiseCovariance> {
    let n = dataset.len();
    if b == 0 || b > n {
        return Err(Error::InvalidArgument(format!("batch size {b} outside 1..={n}")));
    }
    let parts = Partials::new(net);
    let p = net.num_params();
    let mut grads = Mat::zeros(p, n);
    for i in 0..n {
        let x = dataset.samples.x.columns(i, 1).into_owned();
        let y = dataset.samples.y.columns(i, 1).into_owned();
        grads
            .column_mut(i)
            .copy_from(&flatten(&per_sample_gradient_with(&parts, net, &x, &y)));
    }
    let mean = grads.column_mean();
    for mut c in grads.column_iter_mut() {
        c -= &mean;
    }
    let sigma_hat = &grads * grads.transpose() / n as f64;
    let factor = if n == 1 {
        0.0
    } else {
        (n - b) as f64 / (b as f64 * (n - 1) as f64)
    };
    let full = sigma_hat * factor;
    let full = (&full + full.transpose()) * 0.5;
    Ok(NoiseCovariance {
        layer_sizes: net.layer_sizes(),
        full,
        data_part: None,
        label_part: None,
    })
}

fn flatten(blocks: &[Mat]) -> Mat {
    let total: usize = blocks.iter().map(|b| b.len()).sum();
    let mut out = Vec::with_capacity(total);
    for b in blocks {
        out.extend_from_slice(b.as_slice());
    }
    Mat::from_vec(total, 1, out)
}

/// Exact square-root factor of the closed-form covariance, kept in
/// structured form. Applying it to `(Z, Z₂)` costs `O(L d³)` and never forms
/// a `P × P` matrix.
#[derive(Clone, Debug)]
pub struct NoiseFactor {
    above: Vec<Mat>,
    below: Vec<Mat>,
    delta: Mat,
    label_root: Mat,
    pub computed_at_step: u64,
}

impl NoiseFactor {
    pub fn depth(&self) -> usize {
        self.above.len()
    }

    pub fn d_in(&self) -> usize {
        self.delta.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.delta.nrows()
    }

    /// Layer noise `B_l S A_lᵀ` with `S = Δ (Z + Zᵀ)/√2 + Σ_q^{1/2} Z₂`;
    /// `z` is `d_0 × d_0`, `z_label` is `d_L × d_0`.
    pub fn apply(&self, z: &Mat, z_label: &Mat) -> Vec<Mat> {
        let s = &self.delta * (z + z.transpose()) * std::f64::consts::FRAC_1_SQRT_2
            + &self.label_root * z_label;
        self.above
            .iter()
            .zip(&self.below)
            .map(|(above, below)| above.transpose() * &s * below.transpose())
            .collect()
    }

    /// One draw distributed as `N(0, Σ)`, per layer.
    pub fn sample(&self, rng: &mut RngStream) -> Vec<Mat> {
        let (z, z_label) = self.draw(rng);
        self.apply(&z, &z_label)
    }

    /// The standard-normal inputs consumed by [`NoiseFactor::apply`].
    pub fn draw(&self, rng: &mut RngStream) -> (Mat, Mat) {
        let z = gaussian_matrix(self.d_in(), self.d_in(), rng);
        let z_label = gaussian_matrix(self.d_out(), self.d_in(), rng);
        (z, z_label)
    }

    /// Dense `P × d_0²` factor, rows for layer `l` equal to
    /// `(A_l ⊗ B_lΔ)(I + C)/√2`.
    pub fn data_factor(&self) -> Mat {
        let d0 = self.d_in();
        let root = (identity(d0 * d0) + commutation_matrix(d0, d0)) * std::f64::consts::FRAC_1_SQRT_2;
        let blocks: Vec<Mat> = self
            .above
            .iter()
            .zip(&self.below)
            .map(|(above, below)| kron(below, &(above.transpose() * &self.delta)) * &root)
            .collect();
        stack_rows(&blocks)
    }

    /// Dense `P × (d_0 d_L)` factor, rows for layer `l` equal to
    /// `A_l ⊗ B_l Σ_q^{1/2}`.
    pub fn label_factor(&self) -> Mat {
        let blocks: Vec<Mat> = self
            .above
            .iter()
            .zip(&self.below)
            .map(|(above, below)| kron(below, &(above.transpose() * &self.label_root)))
            .collect();
        stack_rows(&blocks)
    }

    /// `[data_factor | label_factor]`.
    pub fn dense(&self) -> Mat {
        let d = self.data_factor();
        let l = self.label_factor();
        let mut out = Mat::zeros(d.nrows(), d.ncols() + l.ncols());
        out.view_mut((0, 0), (d.nrows(), d.ncols())).copy_from(&d);
        out.view_mut((0, d.ncols()), (l.nrows(), l.ncols())).copy_from(&l);
        out
    }

    /// Errors once the factor is older than `interval` steps.
    pub fn check_fresh(&self, step: u64, interval: u64) -> Result<()> {
        if step.saturating_sub(self.computed_at_step) >= interval.max(1) {
            return Err(Error::StaleFactor {
                computed_at: self.computed_at_step,
                step,
                interval,
            });
        }
        Ok(())
    }
}

/// Factor for `Σ_q = σ_q² I`.
pub fn noise_factor(net: &Network, teacher: &Teacher) -> Result<NoiseFactor> {
    let root = identity(teacher.d_out()) * teacher.sigma_q;
    noise_factor_with_root(net, teacher, root, 0)
}

/// Factor for an explicit PSD label covariance.
pub fn noise_factor_general(net: &Network, teacher: &Teacher, sigma_q_matrix: &Mat) -> Result<NoiseFactor> {
    validate_label_covariance(sigma_q_matrix, net.d_out())?;
    let root = psd_sqrt(sigma_q_matrix, DEFAULT_CLAMP_TOL)?;
    noise_factor_with_root(net, teacher, root, 0)
}

/// Factor built from a precomputed `Σ_q^{1/2}`, stamped with `step`.
pub fn noise_factor_with_root(net: &Network, teacher: &Teacher, label_root: Mat, step: u64) -> Result<NoiseFactor> {
    if teacher.d_in() != net.d_in() || teacher.d_out() != net.d_out() {
        return Err(Error::Shape("teacher and network disagree on input/output widths".into()));
    }
    let parts = Partials::new(net);
    let delta = &teacher.m - parts.end_to_end(net);
    Ok(NoiseFactor {
        above: parts.above,
        below: parts.below,
        delta,
        label_root,
        computed_at_step: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_teacher, Batch};
    use crate::numerics::{relative_frobenius, symmetric_eig};

    fn random_net(dims: &[usize], scale: f64, seed: u64) -> Network {
        let mut rng = RngStream::new(seed, 0);
        let layers = dims
            .windows(2)
            .map(|w| gaussian_matrix(w[1], w[0], &mut rng) * scale)
            .collect();
        Network::new(layers).unwrap()
    }

    fn teacher(d: usize, sigma_q: f64, seed: u64) -> Teacher {
        let values: Vec<f64> = [1.0, 0.7, 0.4].iter().copied().take(d).collect();
        build_teacher(d, d, &values, sigma_q, &mut RngStream::new(seed, 7)).unwrap()
    }

    fn check_invariants(cov: &NoiseCovariance) {
        let f = &cov.full;
        assert!((f - f.transpose()).norm() <= 1e-10 * f.norm().max(1e-300));
        let (eigs, _) = symmetric_eig(f);
        let max = eigs.last().copied().unwrap();
        assert!(eigs[0] >= -1e-8 * max.abs().max(1e-300), "min eig {} max {}", eigs[0], max);
        if let (Some(d), Some(l)) = (&cov.data_part, &cov.label_part) {
            assert!((d + l - f).norm() <= 1e-12 * f.norm().max(1e-300));
        }
    }

    #[test]
    fn zero_at_global_minimum_without_label_noise() {
        let t = teacher(3, 0.0, 1);
        let net = Network::new(vec![t.m.clone()]).unwrap();
        let cov = closed_form_covariance(&net, &t, &t.label_covariance()).unwrap();
        assert_eq!(cov.full.norm(), 0.0);
    }

    #[test]
    fn scalar_oracle() {
        // E[((m − w)(x² − 1))²] = 2(m − w)²
        let t = Teacher::canonical(1, 1, &[1.3], 0.0).unwrap();
        let net = Network::new(vec![Mat::from_element(1, 1, 0.4)]).unwrap();
        let cov = closed_form_covariance(&net, &t, &t.label_covariance()).unwrap();
        assert!((cov.full[(0, 0)] - 2.0 * 0.9f64.powi(2)).abs() < 1e-14);
    }

    #[test]
    fn label_term_alone_for_single_layer() {
        let t = teacher(3, 0.0, 2);
        let net = Network::new(vec![t.m.clone()]).unwrap();
        let g = gaussian_matrix(3, 3, &mut RngStream::new(3, 0));
        let sigma_q = &g * g.transpose();
        let cov = closed_form_covariance(&net, &t, &sigma_q).unwrap();
        let want = kron(&identity(3), &sigma_q);
        assert!((cov.full - want).norm() < 1e-12);
    }

    #[test]
    fn rejects_bad_label_covariance() {
        let t = teacher(2, 0.0, 4);
        let net = random_net(&[2, 2], 0.5, 5);
        let bad = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(closed_form_covariance(&net, &t, &bad).is_err());
        let asym = Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(closed_form_covariance(&net, &t, &asym).is_err());
    }

    #[test]
    fn monte_carlo_agrees_with_closed_form() {
        let t = teacher(3, 0.2, 6);
        let net = random_net(&[3, 3, 3], 0.5, 7);
        let exact = closed_form_covariance(&net, &t, &t.label_covariance()).unwrap();
        let mc = empirical_covariance(&net, &t, 200_000, &mut RngStream::new(8, 0)).unwrap();
        let err = relative_frobenius(&mc.full, &exact.full);
        assert!(err < 0.05, "relative error {err}");
        assert!((&mc.full - mc.full.transpose()).norm() == 0.0);
    }

    #[test]
    fn monte_carlo_zero_at_minimum() {
        let t = teacher(3, 0.0, 9);
        let net = Network::new(vec![t.m.clone()]).unwrap();
        let mc = empirical_covariance(&net, &t, 100, &mut RngStream::new(10, 0)).unwrap();
        assert!(mc.full.norm() < 1e-28);
        assert!(empirical_covariance(&net, &t, 1, &mut RngStream::new(10, 0)).is_err());
    }

    #[test]
    fn batch_scaling() {
        let t = teacher(3, 0.1, 11);
        let net = random_net(&[3, 4, 3], 0.5, 12);
        let cov = closed_form_covariance(&net, &t, &t.label_covariance()).unwrap();
        assert_eq!(batch_scaled(&cov, 1).unwrap().full, cov.full);
        let q = batch_scaled(&cov, 4).unwrap();
        assert!((&q.full * 4.0 - &cov.full).norm() < 1e-14 * cov.full.norm());
        let t2 = batch_scaled(&cov, 2).unwrap().trace();
        let t4 = q.trace();
        assert!((t4 * 2.0 - t2).abs() < 1e-13 * t2);
        assert!(batch_scaled(&cov, 0).is_err());
    }

    fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        if n < k {
            return vec![];
        }
        let mut out = combinations(n - 1, k);
        for mut c in combinations(n - 1, k - 1) {
            c.push(n - 1);
            out.push(c);
        }
        out
    }

    fn enumerated_covariance(net: &Network, data: &Dataset, b: usize) -> Mat {
        let n = data.len();
        let all: Vec<usize> = (0..n).collect();
        let full = flatten(&crate::model::batch_gradient(net, &data.samples.select(&all)));
        let subsets = combinations(n, b);
        let p = net.num_params();
        let mut acc = Mat::zeros(p, p);
        for s in &subsets {
            let batch: Batch = data.samples.select(s);
            let g = flatten(&crate::model::batch_gradient(net, &batch)) - &full;
            acc += &g * g.transpose();
        }
        acc / subsets.len() as f64
    }

    #[test]
    fn finite_dataset_matches_enumeration() {
        let t = teacher(2, 0.3, 13);
        let net = random_net(&[2, 2, 2], 0.7, 14);
        let data = Dataset::sample(&t, 6, &mut RngStream::new(15, 0)).unwrap();
        for b in 1..=6 {
            let formula = finite_dataset_covariance(&net, &data, b).unwrap();
            let oracle = enumerated_covariance(&net, &data, b);
            let scale = enumerated_covariance(&net, &data, 1).norm();
            assert!((formula.full - oracle).norm() <= 1e-12 * scale, "b = {b}");
        }
        let full = finite_dataset_covariance(&net, &data, 6).unwrap();
        assert_eq!(full.full.norm(), 0.0);
        assert!(finite_dataset_covariance(&net, &data, 7).is_err());
    }

    #[test]
    fn factor_reconstructs_closed_form() {
        for seed in 0..3 {
            let t = teacher(3, 0.25, 20 + seed);
            let net = random_net(&[3, 4, 2, 3], 0.6, 30 + seed);
            let cov = closed_form_covariance(&net, &t, &t.label_covariance()).unwrap();
            check_invariants(&cov);
            let f = noise_factor(&net, &t).unwrap();
            let d = f.data_factor();
            let l = f.label_factor();
            assert_eq!(d.shape(), (net.num_params(), 9));
            assert_eq!(l.shape(), (net.num_params(), 9));
            assert!(relative_frobenius(&(&d * d.transpose()), cov.data_part.as_ref().unwrap()) < 1e-10);
            assert!(relative_frobenius(&(&l * l.transpose()), cov.label_part.as_ref().unwrap()) < 1e-10);
            let all = f.dense();
            assert!(relative_frobenius(&(&all * all.transpose()), &cov.full) < 1e-10);
        }
    }

    #[test]
    fn factor_matches_dense_application() {
        let t = teacher(3, 0.25, 40);
        let net = random_net(&[3, 4, 3], 0.6, 41);
        let f = noise_factor(&net, &t).unwrap();
        let mut rng = RngStream::new(42, 0);
        let (z, z2) = f.draw(&mut rng);
        let structured = flatten(&f.apply(&z, &z2));
        let dense = f.data_factor() * crate::numerics::vec(&z) + f.label_factor() * crate::numerics::vec(&z2);
        assert!((structured - dense).norm() < 1e-12);
    }

    #[test]
    fn factor_zero_at_noiseless_minimum() {
        let t = teacher(3, 0.0, 43);
        let net = Network::new(vec![t.m.clone()]).unwrap();
        let f = noise_factor(&net, &t).unwrap();
        assert_eq!(f.data_factor().norm(), 0.0);
        assert_eq!(f.label_factor().norm(), 0.0);
    }

    #[test]
    fn factor_samples_have_closed_form_covariance() {
        let t = teacher(3, 0.3, 44);
        let net = random_net(&[3, 3, 3], 0.6, 45);
        let cov = closed_form_covariance(&net, &t, &t.label_covariance()).unwrap();
        let f = noise_factor(&net, &t).unwrap();
        let mut rng = RngStream::new(46, 0);
        let n = 100_000;
        let p = net.num_params();
        let mut acc = Mat::zeros(p, p);
        for _ in 0..n {
            let v = flatten(&f.sample(&mut rng));
            acc += &v * v.transpose();
        }
        acc /= n as f64;
        assert!(relative_frobenius(&acc, &cov.full) < 0.05);
    }

    #[test]
    fn general_label_covariance_factor() {
        let t = teacher(3, 0.0, 47);
        let net = random_net(&[3, 2, 3], 0.6, 48);
        let g = gaussian_matrix(3, 2, &mut RngStream::new(49, 0));
        let sigma_q = &g * g.transpose();
        let cov = closed_form_covariance(&net, &t, &sigma_q).unwrap();
        let f = noise_factor_general(&net, &t, &sigma_q).unwrap();
        let all = f.dense();
        assert!(relative_frobenius(&(&all * all.transpose()), &cov.full) < 1e-10);
    }

    #[test]
    fn staleness() {
        let t = teacher(2, 0.1, 50);
        let net = random_net(&[2, 2], 0.5, 51);
        let root = identity(2) * 0.1;
        let f = noise_factor_with_root(&net, &t, root, 10).unwrap();
        assert!(f.check_fresh(10, 1).is_ok());
        assert!(f.check_fresh(14, 5).is_ok());
        assert!(matches!(f.check_fresh(15, 5), Err(Error::StaleFactor { .. })));
    }

    #[test]
    fn data_and_label_parts_vanish_separately() {
        let t = teacher(3, 0.0, 52);
        let net = random_net(&[3, 3, 3], 0.5, 53);
        let cov = closed_form_covariance(&net, &t, &t.label_covariance()).unwrap();
        assert_eq!(cov.label_part.unwrap().norm(), 0.0);
        let tq = Teacher { sigma_q: 0.4, ..t.clone() };
        let exact = Network::new(vec![identity(3), tq.m.clone()]).unwrap();
        let cov = closed_form_covariance(&exact, &tq, &tq.label_covariance()).unwrap();
        assert_eq!(cov.data_part.unwrap().norm(), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn closed_form_is_symmetric_psd_and_factorizes(
                seed in 0u64..10_000,
                depth in 1usize..4,
                width in 1usize..4,
                sigma_q in 0.0f64..0.5,
            ) {
                let t = build_teacher(2, 2, &[1.0], sigma_q, &mut RngStream::new(seed, 1)).unwrap();
                let mut dims = vec![2];
                dims.extend(std::iter::repeat(width).take(depth - 1));
                dims.push(2);
                let net = random_net(&dims, 0.7, seed);
                let cov = closed_form_covariance(&net, &t, &t.label_covariance()).unwrap();
                check_invariants(&cov);
                let all = noise_factor(&net, &t).unwrap().dense();
                let rebuilt = &all * all.transpose();
                prop_assert!((rebuilt - &cov.full).norm() <= 1e-10 * cov.full.norm().max(1e-300));
            }
        }
    }
}
