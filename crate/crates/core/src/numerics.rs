//! Dense linear algebra and seeded sampling shared by every other module.
//!
//! Matrices are `nalgebra::DMatrix<f64>`. `vec` is column-major stacking, which
//! is the convention every Kronecker identity in this crate is written against:
//! `vec(A X B) = (Bᵀ ⊗ A) vec(X)` and `vec(u vᵀ) = v ⊗ u`.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative eigenvalue clamp for [`psd_sqrt`].
pub const DEFAULT_CLAMP_TOL: f64 = 1e-12;

/// Seeded, splittable random stream. Equal `(seed, stream)` pairs reproduce
/// the same sequence bit for bit; distinct stream ids give independent
/// ChaCha keystreams.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh stream with the same seed and id `stream + offset`.
    pub fn split(&self, offset: u64) -> Self {
        Self::new(self.seed, self.stream.wrapping_add(offset))
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// The `mn × mn` permutation `C` with `C vec(A) = vec(Aᵀ)` for every `m × n` matrix `A`.
pub fn commutation_matrix(m: usize, n: usize) -> Mat {
    let mut c = Mat::zeros(m * n, m * n);
    for i in 0..m {
        for j in 0..n {
            // A[i,j] sits at i + j*m in vec(A) and at j + i*n in vec(Aᵀ)
            c[(j + i * n, i + j * m)] = 1.0;
        }
    }
    c
}

/// Column-major stacking into an `(rows·cols) × 1` matrix.
pub fn vec(a: &Mat) -> Mat {
    Mat::from_column_slice(a.len(), 1, a.as_slice())
}

/// Inverse of [`vec`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Mat {
    assert_eq!(v.len(), rows * cols, "unvec: length does not match shape");
    Mat::from_column_slice(rows, cols, v)
}

pub fn frobenius_norm(a: &Mat) -> f64 {
    a.norm()
}

/// `‖a − b‖_F / ‖b‖_F`, or the absolute gap when `b` is zero.
pub fn relative_frobenius(a: &Mat, b: &Mat) -> f64 {
    let gap = (a - b).norm();
    let scale = b.norm();
    if scale == 0.0 {
        gap
    } else {
        gap / scale
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    a * b
}

/// Column vector of i.i.d. standard normals.
pub fn gaussian_vector(d: usize, rng: &mut RngStream) -> Mat {
    gaussian_matrix(d, 1, rng)
}

/// i.i.d. standard normal entries, filled column by column.
pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.normal())
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the signs
/// of `diag(R)` folded into `Q`.
pub fn random_orthogonal(d: usize, rng: &mut RngStream) -> Mat {
    let g = gaussian_matrix(d, d, rng);
    let (mut q, r) = qr(&g);
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn qr(a: &Mat) -> (Mat, Mat) {
    let qr = a.clone().qr();
    (qr.q(), qr.r())
}

/// Thin SVD `a = U diag(s) Vᵀ` with `s` non-increasing.
pub struct Svd {
    pub u: Mat,
    pub singular_values: Vec<f64>,
    pub v_t: Mat,
}

pub fn svd(a: &Mat) -> Svd {
    let raw = a.clone().svd(true, true);
    let u = raw.u.expect("svd requested U");
    let v_t = raw.v_t.expect("svd requested Vᵀ");
    let mut order: Vec<usize> = (0..raw.singular_values.len()).collect();
    order.sort_by(|&i, &j| raw.singular_values[j].total_cmp(&raw.singular_values[i]));
    let singular_values = order.iter().map(|&i| raw.singular_values[i]).collect();
    let u = Mat::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v_t = Mat::from_fn(order.len(), v_t.ncols(), |r, c| v_t[(order[r], c)]);
    Svd {
        u,
        singular_values,
        v_t,
    }
}

/// Non-increasing singular values; all NaN when the input is non-finite or
/// the iteration fails to converge.
pub fn singular_values(a: &Mat) -> Vec<f64> {
    let n = a.nrows().min(a.ncols());
    if !all_finite(a) {
        return vec![f64::NAN; n];
    }
    match a.clone().try_svd(false, false, f64::EPSILON, 10_000) {
        Some(raw) => {
            let mut s: Vec<f64> = raw.singular_values.iter().copied().collect();
            s.sort_by(|x, y| y.total_cmp(x));
            s
        }
        None => vec![f64::NAN; n],
    }
}

/// Eigenvalues (ascending) and matching orthonormal eigenvectors of a symmetric matrix.
pub fn symmetric_eig(a: &Mat) -> (Vec<f64>, Mat) {
    let eig = a.clone().symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Mat::from_fn(a.nrows(), n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Relative asymmetry check used by the PSD routines.
pub fn check_symmetric(a: &Mat, rel_tol: f64) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Shape(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let asymmetry = (a - a.transpose()).norm();
    let norm = a.norm();
    if asymmetry > rel_tol * norm.max(f64::MIN_POSITIVE) && asymmetry > 0.0 {
        return Err(Error::NotSymmetric { asymmetry, norm });
    }
    Ok(())
}

/// Symmetric PSD square root `S = Q Λ^{1/2} Qᵀ`, so `S Sᵀ = sigma`.
///
/// Eigenvalues in `[-clamp_tol·λ_max, clamp_tol·λ_max)` are treated as zero;
/// anything more negative is rejected. Works on exactly singular inputs,
/// which is the normal case for the gradient-noise covariance at a minimum.
pub fn psd_sqrt(sigma: &Mat, clamp_tol: f64) -> Result<Mat> {
    check_symmetric(sigma, 1e-10)?;
    let n = sigma.nrows();
    if sigma.norm() == 0.0 {
        return Ok(Mat::zeros(n, n));
    }
    let sym = (sigma + sigma.transpose()) * 0.5;
    let (values, vectors) = symmetric_eig(&sym);
    let max_eig = values.iter().copied().fold(0.0_f64, f64::max);
    let min_eig = values.iter().copied().fold(f64::INFINITY, f64::min);
    if min_eig < -clamp_tol * max_eig {
        return Err(Error::NotPsd {
            min_eig,
            max_eig,
            tol: clamp_tol,
        });
    }
    let threshold = clamp_tol * max_eig;
    let mut scaled = vectors.clone();
    for (j, &lambda) in values.iter().enumerate() {
        let root = if lambda < threshold { 0.0 } else { lambda.sqrt() };
        scaled.column_mut(j).scale_mut(root);
    }
    Ok(scaled * vectors.transpose())
}

pub fn identity(n: usize) -> Mat {
    Mat::identity(n, n)
}

pub fn all_finite(a: &Mat) -> bool {
    a.iter().all(|x| x.is_finite())
}
