//! Matrix-free linear operators.
//!
//! Every operator exposes `apply` (forward) and `apply_adjoint`. Matrices
//! acting on vectorized images or matrices use column-major order, matching
//! `nalgebra::DMatrix` storage: entry `(i, j)` of an `r x c` matrix lives at
//! index `i + j * r`.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng;

/// Largest `n_rows * n_cols` for which [`LinearOperator::to_dense`] will materialize.
pub const DENSE_LIMIT: usize = 1_000_000;

pub trait LinearOperator: Send + Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
    fn apply_adjoint(&self, y: &DVector<f64>) -> DVector<f64>;

    fn to_dense(&self) -> Result<DMatrix<f64>> {
        let (m, n) = (self.nrows(), self.ncols());
        if m.saturating_mul(n) > DENSE_LIMIT {
            return Err(Error::InvalidDimension(format!(
                "refusing to materialize a {m}x{n} operator"
            )));
        }
        let mut out = DMatrix::zeros(m, n);
        let mut e = DVector::zeros(n);
        for j in 0..n {
            e[j] = 1.0;
            out.set_column(j, &self.apply(&e));
            e[j] = 0.0;
        }
        Ok(out)
    }
}

/// Shared handle used wherever an operator is stored.
pub type LinearMap = Arc<dyn LinearOperator>;

#[derive(Debug, Clone)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
}

impl DenseOperator {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl LinearOperator for DenseOperator {
    fn nrows(&self) -> usize {
        self.matrix.nrows()
    }
    fn ncols(&self) -> usize {
        self.matrix.ncols()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }
    fn apply_adjoint(&self, y: &DVector<f64>) -> DVector<f64> {
        self.matrix.tr_mul(y)
    }
    fn to_dense(&self) -> Result<DMatrix<f64>> {
        Ok(self.matrix.clone())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IdentityOperator {
    n: usize,
}

impl IdentityOperator {
    pub fn new(n: usize) -> Self {
        Self { n }
    }
}

impl LinearOperator for IdentityOperator {
    fn nrows(&self) -> usize {
        self.n
    }
    fn ncols(&self) -> usize {
        self.n
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn apply_adjoint(&self, y: &DVector<f64>) -> DVector<f64> {
        y.clone()
    }
}

/// Dense `m x n` matrix with orthonormal rows, `A A^T = I_m`.
///
/// A seeded Gaussian `n x m` matrix is QR-factorized and `A = Q^T`.
pub fn random_orthonormal_rows(m: usize, n: usize, seed: u64) -> Result<DenseOperator> {
    if m == 0 || m > n {
        return Err(Error::InvalidDimension(format!(
            "orthonormal rows need 1 <= m <= n, got m = {m}, n = {n}"
        )));
    }
    let mut rng = rng::seeded(seed);
    let g = rng::gaussian_matrix(&mut rng, n, m);
    let q = g.qr().q();
    Ok(DenseOperator::new(q.transpose()))
}

/// Projection onto the observed entries `omega` of an `n_rows x n_cols` matrix.
#[derive(Debug, Clone)]
pub struct EntryMask {
    n_rows: usize,
    n_cols: usize,
    observed: Vec<bool>,
    count: usize,
}

impl EntryMask {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        omega: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut observed = vec![false; n_rows * n_cols];
        for (row, col) in omega {
            if row >= n_rows || col >= n_cols {
                return Err(Error::InvalidIndex {
                    row,
                    col,
                    n_rows,
                    n_cols,
                });
            }
            observed[row + col * n_rows] = true;
        }
        let count = observed.iter().filter(|&&b| b).count();
        Ok(Self {
            n_rows,
            n_cols,
            observed,
            count,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    pub fn num_observed(&self) -> usize {
        self.count
    }

    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.observed[row + col * self.n_rows]
    }

    pub fn observed_indices(&self) -> BTreeSet<(usize, usize)> {
        (0..self.n_cols)
            .flat_map(|j| (0..self.n_rows).map(move |i| (i, j)))
            .filter(|&(i, j)| self.is_observed(i, j))
            .collect()
    }

    fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(&self.observed)
                .map(|(&v, &keep)| if keep { v } else { 0.0 }),
        )
    }
}

impl LinearOperator for EntryMask {
    fn nrows(&self) -> usize {
        self.n_rows * self.n_cols
    }
    fn ncols(&self) -> usize {
        self.n_rows * self.n_cols
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.project(x)
    }
    fn apply_adjoint(&self, y: &DVector<f64>) -> DVector<f64> {
        self.project(y)
    }
}

pub fn entry_mask(
    n_rows: usize,
    n_cols: usize,
    omega: impl IntoIterator<Item = (usize, usize)>,
) -> Result<EntryMask> {
    EntryMask::new(n_rows, n_cols, omega)
}

/// 2-D convolution of `side x side` images with a truncated Gaussian kernel.
///
/// The kernel covers offsets `-radius..=radius` in each direction and is
/// renormalized to sum to one. Pixels outside the image are zero.
#[derive(Debug, Clone)]
pub struct GaussianBlur {
    side: usize,
    radius: usize,
    kernel: Vec<f64>,
}

impl GaussianBlur {
    pub fn new(side: usize, radius: usize, sigma: f64) -> Result<Self> {
        if side == 0 {
            return Err(Error::InvalidDimension("blur side must be >= 1".into()));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "blur sigma must be positive, got {sigma}"
            )));
        }
        let width = 2 * radius + 1;
        let r = radius as isize;
        let mut kernel = Vec::with_capacity(width * width);
        for di in -r..=r {
            for dj in -r..=r {
                let d2 = (di * di + dj * dj) as f64;
                kernel.push((-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|w| *w /= total);
        Ok(Self {
            side,
            radius,
            kernel,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Kernel weight at offset `(di, dj)`, each in `-radius..=radius`.
    pub fn weight(&self, di: isize, dj: isize) -> f64 {
        let r = self.radius as isize;
        let width = 2 * self.radius + 1;
        self.kernel[(di + r) as usize * width + (dj + r) as usize]
    }

    // out(i, j) = sum_k w(k) x(i + sign * di, j + sign * dj)
    fn convolve(&self, x: &DVector<f64>, sign: isize) -> DVector<f64> {
        let n = self.side as isize;
        let r = self.radius as isize;
        let mut out = DVector::zeros(x.len());
        for j in 0..n {
            for i in 0..n {
                let mut acc = 0.0;
                for di in -r..=r {
                    let ii = i + sign * di;
                    if ii < 0 || ii >= n {
                        continue;
                    }
                    for dj in -r..=r {
                        let jj = j + sign * dj;
                        if jj < 0 || jj >= n {
                            continue;
                        }
                        acc += self.weight(di, dj) * x[(ii + jj * n) as usize];
                    }
                }
                out[(i + j * n) as usize] = acc;
            }
        }
        out
    }
}

impl LinearOperator for GaussianBlur {
    fn nrows(&self) -> usize {
        self.side * self.side
    }
    fn ncols(&self) -> usize {
        self.side * self.side
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.convolve(x, 1)
    }
    fn apply_adjoint(&self, y: &DVector<f64>) -> DVector<f64> {
        self.convolve(y, -1)
    }
}

pub fn blur_operator(side: usize, kernel_radius: usize, kernel_sigma: f64) -> Result<GaussianBlur> {
    GaussianBlur::new(side, kernel_radius, kernel_sigma)
}

/// Power iteration on `A^T A`, returning an estimate of the largest singular value.
pub fn spectral_norm_estimate(op: &dyn LinearOperator, iterations: usize, seed: u64) -> f64 {
    let mut rng = rng::seeded(seed);
    let mut v = rng::gaussian_vector(&mut rng, op.ncols());
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let norm = v.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v /= norm;
        let w = op.apply_adjoint(&op.apply(&v));
        estimate = w.norm();
        v = w;
    }
    estimate.sqrt()
}
