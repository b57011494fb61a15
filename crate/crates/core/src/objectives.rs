//! Smooth terms `f` and their evaluation counters.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::linops::{LinearMap, LinearOperator};

/// A continuously differentiable `f: R^n -> R`.
pub trait SmoothObjective: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Least-squares structure `f = |F(x)|^2 / 2`, when available.
    fn as_residual(&self) -> Option<&dyn ResidualStructure> {
        None
    }
}

pub trait ResidualStructure: Send + Sync {
    fn residual_dim(&self) -> usize;
    fn residual(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Jacobian of `F` at `x` as an operator.
    fn jacobian(&self, x: &DVector<f64>) -> LinearMap;
}

/// `|A x - b|^2 / 2`.
#[derive(Clone)]
pub struct LeastSquares {
    op: LinearMap,
    b: DVector<f64>,
}

impl LeastSquares {
    pub fn new(op: LinearMap, b: DVector<f64>) -> Self {
        assert_eq!(op.nrows(), b.len(), "rhs length must match operator rows");
        Self { op, b }
    }

    pub fn operator(&self) -> &LinearMap {
        &self.op
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.b
    }
}

impl SmoothObjective for LeastSquares {
    fn dim(&self) -> usize {
        self.op.ncols()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * ResidualStructure::residual(self, x).norm_squared()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.op.apply_adjoint(&ResidualStructure::residual(self, x))
    }

    fn as_residual(&self) -> Option<&dyn ResidualStructure> {
        Some(self)
    }
}

impl ResidualStructure for LeastSquares {
    fn residual_dim(&self) -> usize {
        self.b.len()
    }

    fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        self.op.apply(x) - &self.b
    }

    fn jacobian(&self, _x: &DVector<f64>) -> LinearMap {
        Arc::clone(&self.op)
    }
}

/// Nonlinear SVM loss `|1 - tanh(b .* (A x))|^2 / 2` with labels `b` in {-1, +1}.
#[derive(Debug, Clone)]
pub struct SvmLoss {
    features: DMatrix<f64>,
    labels: DVector<f64>,
}

impl SvmLoss {
    pub fn new(features: DMatrix<f64>, labels: DVector<f64>) -> Self {
        assert_eq!(features.nrows(), labels.len(), "one label per feature row");
        Self { features, labels }
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &DVector<f64> {
        &self.labels
    }

    fn margins(&self, x: &DVector<f64>) -> DVector<f64> {
        (&self.features * x).component_mul(&self.labels)
    }
}

impl SmoothObjective for SvmLoss {
    fn dim(&self) -> usize {
        self.features.ncols()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * self
            .margins(x)
            .iter()
            .map(|z| (1.0 - z.tanh()).powi(2))
            .sum::<f64>()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let z = self.margins(x);
        // d/dz (1 - tanh z)^2 / 2 = -(1 - tanh z)(1 - tanh^2 z)
        let dz = DVector::from_iterator(
            z.len(),
            z.iter().zip(self.labels.iter()).map(|(z, b)| {
                let t = z.tanh();
                -(1.0 - t) * (1.0 - t * t) * b
            }),
        );
        self.features.tr_mul(&dz)
    }
}

/// Robust data fit `sum_i log((A x - b)_i^2 + 1)`.
#[derive(Clone)]
pub struct LogCauchyLoss {
    op: LinearMap,
    b: DVector<f64>,
}

impl LogCauchyLoss {
    pub fn new(op: LinearMap, b: DVector<f64>) -> Self {
        assert_eq!(op.nrows(), b.len(), "data length must match operator rows");
        Self { op, b }
    }

    pub fn operator(&self) -> &LinearMap {
        &self.op
    }

    pub fn data(&self) -> &DVector<f64> {
        &self.b
    }
}

impl SmoothObjective for LogCauchyLoss {
    fn dim(&self) -> usize {
        self.op.ncols()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let r = self.op.apply(x) - &self.b;
        r.iter().map(|ri| (ri * ri).ln_1p()).sum()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let r = self.op.apply(x) - &self.b;
        let w = r.map(|ri| 2.0 * ri / (ri * ri + 1.0));
        self.op.apply_adjoint(&w)
    }
}

/// Shared tallies of oracle calls made during one solve.
#[derive(Debug, Default)]
pub struct Counters {
    f: AtomicUsize,
    grad: AtomicUsize,
    prox: AtomicUsize,
    jprod: AtomicUsize,
}

impl Counters {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn add_f(&self) {
        self.f.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add_grad(&self) {
        self.grad.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add_prox(&self, n: usize) {
        self.prox.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_jprod(&self) {
        self.jprod.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> EvalCounts {
        EvalCounts {
            f: self.f.load(Ordering::Relaxed),
            grad: self.grad.load(Ordering::Relaxed),
            prox: self.prox.load(Ordering::Relaxed),
            jprod: self.jprod.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounts {
    pub f: usize,
    pub grad: usize,
    pub prox: usize,
    /// Jacobian and adjoint products.
    pub jprod: usize,
}

/// Operator wrapper counting every forward and adjoint product.
pub struct CountingOperator {
    inner: LinearMap,
    counters: Arc<Counters>,
}

impl CountingOperator {
    pub fn wrap(inner: LinearMap, counters: Arc<Counters>) -> LinearMap {
        Arc::new(Self { inner, counters })
    }
}

impl LinearOperator for CountingOperator {
    fn nrows(&self) -> usize {
        self.inner.nrows()
    }
    fn ncols(&self) -> usize {
        self.inner.ncols()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.counters.add_jprod();
        self.inner.apply(x)
    }
    fn apply_adjoint(&self, y: &DVector<f64>) -> DVector<f64> {
        self.counters.add_jprod();
        self.inner.apply_adjoint(y)
    }
}

/// Central finite-difference check; returns `|g_fd - g| / max(|g|, 1)`.
pub fn gradient_check(obj: &dyn SmoothObjective, x: &DVector<f64>) -> f64 {
    let g = obj.gradient(x);
    let mut fd = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = 1e-6 * (1.0 + x[i].abs());
        let xi = x[i];
        xp[i] = xi + h;
        let fp = obj.value(&xp);
        xp[i] = xi - h;
        let fm = obj.value(&xp);
        xp[i] = xi;
        fd[i] = (fp - fm) / (2.0 * h);
    }
    (fd - &g).norm() / g.norm().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{blur_operator, DenseOperator, IdentityOperator};
    use crate::rng;

    #[test]
    fn least_squares_matches_residual_form() {
        let mut rng = rng::seeded(3);
        let a = rng::gaussian_matrix(&mut rng, 6, 4);
        let b = rng::gaussian_vector(&mut rng, 6);
        let ls = LeastSquares::new(Arc::new(DenseOperator::new(a)), b);
        let x = rng::gaussian_vector(&mut rng, 4);
        let r = ResidualStructure::residual(&ls, &x);
        assert!((ls.value(&x) - 0.5 * r.norm_squared()).abs() <= 1e-12 * ls.value(&x));
        let jtr = ls.jacobian(&x).apply_adjoint(&r);
        assert!((ls.gradient(&x) - jtr).norm() <= 1e-12 * (1.0 + ls.gradient(&x).norm()));
        assert!(gradient_check(&ls, &x) < 1e-6);
    }

    #[test]
    fn svm_single_sample_by_hand() {
        let loss = SvmLoss::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 1.0));
        assert_eq!(loss.value(&DVector::zeros(1)), 0.5);
    }

    #[test]
    fn svm_gradient_matches_finite_differences() {
        let mut rng = rng::seeded(11);
        let a = rng::gaussian_matrix(&mut rng, 30, 10);
        let labels = rng::gaussian_vector(&mut rng, 30).map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let loss = SvmLoss::new(a, labels);
        for _ in 0..5 {
            let x = rng::gaussian_vector(&mut rng, 10) * 0.3;
            assert!(gradient_check(&loss, &x) < 1e-5);
        }
    }

    #[test]
    fn log_cauchy_zero_at_data_and_fd_gradient() {
        let blur: LinearMap = Arc::new(blur_operator(8, 1, 1.0).unwrap());
        let mut rng = rng::seeded(2);
        let truth = rng::gaussian_vector(&mut rng, 64);
        let b = blur.apply(&truth);
        let loss = LogCauchyLoss::new(blur, b);
        assert_eq!(loss.value(&truth), 0.0);
        assert_eq!(loss.gradient(&truth).norm(), 0.0);
        for _ in 0..5 {
            let x = rng::gaussian_vector(&mut rng, 64);
            assert!(gradient_check(&loss, &x) < 1e-5);
        }
    }

    #[test]
    fn counting_operator_counts_both_directions() {
        let counters = Counters::new();
        let op = CountingOperator::wrap(Arc::new(IdentityOperator::new(3)), counters.clone());
        let v = DVector::from_element(3, 1.0);
        op.apply(&v);
        op.apply_adjoint(&v);
        op.apply(&v);
        assert_eq!(counters.snapshot().jprod, 3);
    }
}
