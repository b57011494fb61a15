//! Model Hessians `B_k`.
//!
//! All kinds are symmetric operators exposing `apply`, `update(s, y)` and a
//! norm estimate `beta` used for the step length `nu = theta1 / (beta + sigma)`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linops::LinearMap;
use crate::rng;

pub const CURVATURE_TOL: f64 = 1e-12;
pub const SPECTRAL_MIN: f64 = 1e-8;
pub const SPECTRAL_MAX: f64 = 1e8;
pub const DIAGONAL_BOUND: f64 = 1e8;
pub const NORM_ESTIMATE_STEPS: usize = 20;
const NORM_ESTIMATE_SEED: u64 = 0x5eed_b0b5;

/// Spectral-norm estimate of a symmetric operator from `iterations` Krylov steps.
///
/// Runs Lanczos with full reorthogonalization from a seeded start vector and
/// returns the largest absolute Ritz value, which never exceeds `|B|`. Each
/// step costs one `apply`, the same as a power-iteration step, and the Ritz
/// value dominates the power-iteration Rayleigh quotient.
pub fn lanczos_norm_estimate(
    n: usize,
    mut apply: impl FnMut(&DVector<f64>) -> DVector<f64>,
    iterations: usize,
    seed: u64,
) -> f64 {
    if n == 0 || iterations == 0 {
        return 0.0;
    }
    let mut rng = rng::seeded(seed);
    let start = rng::gaussian_vector(&mut rng, n);
    let mut basis: Vec<DVector<f64>> = vec![&start / start.norm()];
    let mut alpha = Vec::new();
    let mut beta = Vec::new();
    for _ in 0..iterations.min(n) {
        let v = basis.last().expect("nonempty basis");
        let mut w = apply(v);
        alpha.push(w.dot(v));
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&w);
                w.axpy(-c, q, 1.0);
            }
        }
        let b = w.norm();
        let scale = alpha.iter().chain(&beta).fold(0.0_f64, |m, x| m.max(x.abs()));
        if b <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        beta.push(b);
        basis.push(w / b);
    }
    let k = alpha.len();
    let tridiagonal = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    tridiagonal
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0, |m, x| m.max(x.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagonalUpdate {
    /// `tau I` with `tau = s'y / s's`.
    Spectral,
    /// Least Frobenius change satisfying the weak secant equation.
    Psb,
    /// Weak secant with a trace penalty.
    Andrei,
    /// Diagonal majorant of the BFGS rank-one term `y y' / s'y`.
    Dbfgs,
}

impl DiagonalUpdate {
    pub fn as_str(self) -> &'static str {
        match self {
            DiagonalUpdate::Spectral => "spectral",
            DiagonalUpdate::Psb => "psb",
            DiagonalUpdate::Andrei => "andrei",
            DiagonalUpdate::Dbfgs => "dbfgs",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalHessian {
    kind: DiagonalUpdate,
    d: DVector<f64>,
}

impl DiagonalHessian {
    /// Starts from the identity.
    pub fn new(kind: DiagonalUpdate, n: usize) -> Self {
        Self {
            kind,
            d: DVector::from_element(n, 1.0),
        }
    }

    pub fn with_diagonal(kind: DiagonalUpdate, d: DVector<f64>) -> Self {
        Self { kind, d }
    }

    pub fn kind(&self) -> DiagonalUpdate {
        self.kind
    }

    pub fn diagonal(&self) -> &DVector<f64> {
        &self.d
    }

    fn update(&mut self, s: &DVector<f64>, y: &DVector<f64>) {
        let sy = s.dot(y);
        match self.kind {
            DiagonalUpdate::Spectral => {
                let tau = (sy / s.norm_squared()).clamp(SPECTRAL_MIN, SPECTRAL_MAX);
                self.d.fill(if tau.is_nan() { 1.0 } else { tau });
            }
            DiagonalUpdate::Psb => {
                let s2 = s.component_mul(s);
                let quartic = s2.norm_squared();
                if quartic < 1e-30 {
                    return;
                }
                let sbs = s2.dot(&self.d);
                let mu = (sy - sbs) / quartic;
                self.d.axpy(mu, &s2, 1.0);
                self.clamp();
            }
            DiagonalUpdate::Andrei => {
                let scale = s.norm();
                let s = s / scale;
                let y = y / scale;
                let s2 = s.component_mul(&s);
                let quartic = s2.norm_squared();
                if quartic < 1e-30 {
                    return;
                }
                let mu = (s.dot(&y) + s.norm_squared() - s2.dot(&self.d)) / quartic;
                self.d.add_scalar_mut(-1.0);
                self.d.axpy(mu, &s2, 1.0);
                self.clamp();
            }
            DiagonalUpdate::Dbfgs => {
                if sy > CURVATURE_TOL {
                    let abs_y = y.abs();
                    let factor = abs_y.sum() / sy;
                    self.d = abs_y * factor;
                    self.d.apply(|v| *v = v.min(DIAGONAL_BOUND));
                }
            }
        }
    }

    fn clamp(&mut self) {
        self.d
            .apply(|v| *v = v.clamp(-DIAGONAL_BOUND, DIAGONAL_BOUND));
    }
}

/// Limited-memory BFGS in direct (Hessian) form.
///
/// `apply` uses the unrolled recursion
/// `B v = delta v + sum_i (b_i'v) b_i - (a_i'v) a_i` with
/// `delta = y'y / s'y` from the newest pair; `apply_inverse` is the two-loop
/// recursion for the matching inverse.
#[derive(Debug, Clone)]
pub struct Lbfgs {
    n: usize,
    memory: usize,
    pairs: VecDeque<(DVector<f64>, DVector<f64>)>,
    a: Vec<DVector<f64>>,
    b: Vec<DVector<f64>>,
    delta: f64,
}

impl Lbfgs {
    pub fn new(n: usize, memory: usize) -> Self {
        Self {
            n,
            memory: memory.max(1),
            pairs: VecDeque::new(),
            a: Vec::new(),
            b: Vec::new(),
            delta: 1.0,
        }
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&DVector<f64>, &DVector<f64>)> {
        self.pairs.iter().map(|(s, y)| (s, y))
    }

    /// Initial scaling `B_0 = delta I`.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Returns whether the pair was stored.
    pub fn push(&mut self, s: &DVector<f64>, y: &DVector<f64>) -> bool {
        let sy = s.dot(y);
        if !(sy > CURVATURE_TOL * s.norm() * y.norm()) {
            return false;
        }
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s.clone(), y.clone()));
        self.delta = y.norm_squared() / sy;
        self.rebuild();
        true
    }

    fn rebuild(&mut self) {
        self.a.clear();
        self.b.clear();
        for (s, y) in &self.pairs {
            let bs = self.apply_partial(s, self.a.len());
            let sbs = s.dot(&bs);
            self.b.push(y / y.dot(s).sqrt());
            self.a.push(bs / sbs.sqrt());
        }
    }

    fn apply_partial(&self, v: &DVector<f64>, upto: usize) -> DVector<f64> {
        let mut out = v * self.delta;
        for (a, b) in self.a.iter().zip(&self.b).take(upto) {
            out.axpy(b.dot(v), b, 1.0);
            out.axpy(-a.dot(v), a, 1.0);
        }
        out
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_partial(v, self.a.len())
    }

    /// Two-loop recursion: `H v` with `H = B^{-1}`.
    pub fn apply_inverse(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut q = v.clone();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y) in self.pairs.iter().rev() {
            let rho = 1.0 / y.dot(s);
            let alpha = rho * s.dot(&q);
            q.axpy(-alpha, y, 1.0);
            alphas.push((alpha, rho));
        }
        let mut r = q / self.delta;
        for ((s, y), (alpha, rho)) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let beta = rho * y.dot(&r);
            r.axpy(alpha - beta, s, 1.0);
        }
        r
    }
}

/// `J' J` for a Jacobian operator refreshed at each outer iterate.
#[derive(Clone)]
pub struct GaussNewton {
    jacobian: LinearMap,
}

impl GaussNewton {
    pub fn new(jacobian: LinearMap) -> Self {
        Self { jacobian }
    }

    pub fn jacobian(&self) -> &LinearMap {
        &self.jacobian
    }

    pub fn set_jacobian(&mut self, jacobian: LinearMap) {
        self.jacobian = jacobian;
    }
}

impl std::fmt::Debug for GaussNewton {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GaussNewton")
            .field("rows", &self.jacobian.nrows())
            .field("cols", &self.jacobian.ncols())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum HessianModel {
    Zero(usize),
    Diagonal(DiagonalHessian),
    Lbfgs(Lbfgs),
    GaussNewton(GaussNewton),
}

impl HessianModel {
    pub fn zero(n: usize) -> Self {
        HessianModel::Zero(n)
    }

    pub fn diagonal(kind: DiagonalUpdate, n: usize) -> Self {
        HessianModel::Diagonal(DiagonalHessian::new(kind, n))
    }

    pub fn spectral(tau: f64, n: usize) -> Self {
        HessianModel::Diagonal(DiagonalHessian::with_diagonal(
            DiagonalUpdate::Spectral,
            DVector::from_element(n, tau),
        ))
    }

    pub fn lbfgs(n: usize, memory: usize) -> Self {
        HessianModel::Lbfgs(Lbfgs::new(n, memory))
    }

    pub fn gauss_newton(jacobian: LinearMap) -> Self {
        HessianModel::GaussNewton(GaussNewton::new(jacobian))
    }

    pub fn dim(&self) -> usize {
        match self {
            HessianModel::Zero(n) => *n,
            HessianModel::Diagonal(d) => d.d.len(),
            HessianModel::Lbfgs(l) => l.n,
            HessianModel::GaussNewton(g) => g.jacobian.ncols(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            HessianModel::Zero(_) => "zero".into(),
            HessianModel::Diagonal(d) => d.kind.as_str().into(),
            HessianModel::Lbfgs(l) => format!("lbfgs({})", l.memory),
            HessianModel::GaussNewton(_) => "gauss_newton".into(),
        }
    }

    pub fn diagonal_view(&self) -> Option<&DVector<f64>> {
        match self {
            HessianModel::Diagonal(d) => Some(&d.d),
            _ => None,
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.dim();
        if v.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: v.len(),
            });
        }
        Ok(match self {
            HessianModel::Zero(n) => DVector::zeros(*n),
            HessianModel::Diagonal(d) => d.d.component_mul(v),
            HessianModel::Lbfgs(l) => l.apply(v),
            HessianModel::GaussNewton(g) => g.jacobian.apply_adjoint(&g.jacobian.apply(v)),
        })
    }

    /// Incorporates the pair `(s, y)`; a no-op for zero and Gauss-Newton.
    pub fn update(&mut self, s: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        let n = self.dim();
        for v in [s, y] {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: v.len(),
                });
            }
        }
        if s.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidUpdate("step s is zero".into()));
        }
        if !s.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("quasi-Newton update"));
        }
        match self {
            HessianModel::Diagonal(d) => d.update(s, y),
            HessianModel::Lbfgs(l) => {
                l.push(s, y);
            }
            HessianModel::Zero(_) | HessianModel::GaussNewton(_) => {}
        }
        Ok(())
    }

    /// `beta ~ |B|`: exact for zero and diagonal kinds, 20 Lanczos steps otherwise.
    pub fn norm_estimate(&self) -> f64 {
        match self {
            HessianModel::Zero(_) => 0.0,
            HessianModel::Diagonal(d) => d.d.iter().fold(0.0, |acc, v| acc.max(v.abs())),
            HessianModel::Lbfgs(l) if l.pairs.is_empty() => 1.0,
            HessianModel::Lbfgs(l) => lanczos_norm_estimate(l.n, |v| l.apply(v), NORM_ESTIMATE_STEPS, NORM_ESTIMATE_SEED),
            HessianModel::GaussNewton(g) => lanczos_norm_estimate(
                g.jacobian.ncols(),
                |v| g.jacobian.apply_adjoint(&g.jacobian.apply(v)),
                NORM_ESTIMATE_STEPS,
                NORM_ESTIMATE_SEED,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{random_orthonormal_rows, IdentityOperator};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn apply_examples() {
        assert_eq!(HessianModel::zero(3).apply(&v(&[1.0, 2.0, 3.0])).unwrap(), DVector::zeros(3));
        assert_eq!(
            HessianModel::spectral(2.0, 2).apply(&v(&[1.0, -1.0])).unwrap(),
            v(&[2.0, -2.0])
        );
        let gn = HessianModel::gauss_newton(Arc::new(IdentityOperator::new(3)));
        assert_eq!(gn.apply(&v(&[1.0, 5.0, -2.0])).unwrap(), v(&[1.0, 5.0, -2.0]));
        assert!(matches!(
            gn.apply(&v(&[1.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn update_examples() {
        let mut spec = HessianModel::diagonal(DiagonalUpdate::Spectral, 2);
        spec.update(&v(&[1.0, 0.0]), &v(&[2.0, 0.0])).unwrap();
        assert_eq!(spec.diagonal_view().unwrap(), &v(&[2.0, 2.0]));

        let mut dbfgs = HessianModel::diagonal(DiagonalUpdate::Dbfgs, 2);
        let (s, y) = (v(&[1.0, 1.0]), v(&[2.0, 2.0]));
        dbfgs.update(&s, &y).unwrap();
        let d = dbfgs.diagonal_view().unwrap().clone();
        assert_eq!(d, v(&[2.0, 2.0]));
        assert_eq!(s.dot(&d.component_mul(&s)), 4.0);

        let mut psb = HessianModel::diagonal(DiagonalUpdate::Psb, 2);
        let (s, y) = (v(&[1.0, 0.0]), v(&[3.0, 0.0]));
        psb.update(&s, &y).unwrap();
        let d = psb.diagonal_view().unwrap().clone();
        assert_eq!(d, v(&[3.0, 1.0]));
        assert_eq!(s.dot(&d.component_mul(&s)), 3.0);
    }

    #[test]
    fn update_rejects_zero_step() {
        let mut b = HessianModel::diagonal(DiagonalUpdate::Psb, 2);
        assert!(matches!(
            b.update(&DVector::zeros(2), &v(&[1.0, 1.0])),
            Err(Error::InvalidUpdate(_))
        ));
    }

    #[test]
    fn dbfgs_skips_nonpositive_curvature() {
        let mut b = HessianModel::diagonal(DiagonalUpdate::Dbfgs, 2);
        b.update(&v(&[1.0, 0.0]), &v(&[-1.0, 0.0])).unwrap();
        assert_eq!(b.diagonal_view().unwrap(), &v(&[1.0, 1.0]));
    }

    #[test]
    fn dbfgs_weak_secant_on_equal_magnitude_collinear_pairs() {
        // y = c s with |s_i| constant: the DBFGS diagonal is c I.
        let s = v(&[1.5, -1.5, 1.5, -1.5]);
        let y = &s * 2.5;
        let mut b = HessianModel::diagonal(DiagonalUpdate::Dbfgs, 4);
        b.update(&s, &y).unwrap();
        let d = b.diagonal_view().unwrap();
        let sbs = s.dot(&d.component_mul(&s));
        assert!((sbs - s.dot(&y)).abs() <= 1e-12 * s.dot(&y));
    }

    #[test]
    fn norm_estimates() {
        assert_eq!(HessianModel::spectral(2.0, 4).norm_estimate(), 2.0);
        assert_eq!(HessianModel::zero(4).norm_estimate(), 0.0);
        let a = random_orthonormal_rows(3, 8, 4).unwrap();
        let gn = HessianModel::gauss_newton(Arc::new(a));
        assert!((gn.norm_estimate() - 1.0).abs() < 1e-6);
        let d = HessianModel::Diagonal(DiagonalHessian::with_diagonal(
            DiagonalUpdate::Psb,
            v(&[1.0, -4.0, 2.0]),
        ));
        assert_eq!(d.norm_estimate(), 4.0);
    }

    fn dense_bfgs(lbfgs: &Lbfgs) -> DMatrix<f64> {
        let n = lbfgs.n;
        let mut b = DMatrix::<f64>::identity(n, n) * lbfgs.delta();
        for (s, y) in lbfgs.pairs() {
            let bs = &b * s;
            let sbs = s.dot(&bs);
            b = b - &bs * bs.transpose() / sbs + y * y.transpose() / y.dot(s);
        }
        b
    }

    fn random_pair(rng: &mut rng::SeededRng, n: usize) -> (DVector<f64>, DVector<f64>) {
        // y = M s with M symmetric positive definite keeps s'y > 0
        let s = rng::gaussian_vector(rng, n);
        let g = rng::gaussian_matrix(rng, n, n);
        let m = &g * g.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1;
        let y = m * &s;
        (s, y)
    }

    #[test]
    fn lbfgs_matches_dense_bfgs_and_inverse() {
        let mut rng = rng::seeded(99);
        for n in [2, 5, 12, 20] {
            for pairs in [1, 3, 7, 10] {
                let mut l = Lbfgs::new(n, 5);
                for _ in 0..pairs {
                    let (s, y) = random_pair(&mut rng, n);
                    assert!(l.push(&s, &y));
                }
                let dense = dense_bfgs(&l);
                let inverse = dense.clone().try_inverse().unwrap();
                for _ in 0..20 {
                    let x = rng::gaussian_vector(&mut rng, n);
                    let want = &dense * &x;
                    assert!((l.apply(&x) - &want).norm() <= 1e-8 * want.norm());
                    let want_inv = &inverse * &x;
                    assert!((l.apply_inverse(&x) - &want_inv).norm() <= 1e-8 * want_inv.norm());
                }
            }
        }
    }

    #[test]
    fn lbfgs_skips_bad_curvature_and_evicts() {
        let mut l = Lbfgs::new(3, 2);
        assert!(!l.push(&v(&[1.0, 0.0, 0.0]), &v(&[-1.0, 0.0, 0.0])));
        assert_eq!(l.num_pairs(), 0);
        for i in 0..4 {
            let s = v(&[1.0 + i as f64, 0.5, 0.0]);
            assert!(l.push(&s, &(&s * 2.0)));
        }
        assert_eq!(l.num_pairs(), 2);
        assert_eq!(l.pairs().next().unwrap().0, &v(&[3.0, 0.5, 0.0]));
    }

    #[test]
    fn norm_estimate_within_ten_percent_on_psd() {
        let mut rng = rng::seeded(5);
        for trial in 0..40 {
            let n = 2 + (trial % 49);
            let g = rng::gaussian_matrix(&mut rng, n, n);
            let m = &g * g.transpose();
            let exact = m.clone().symmetric_eigenvalues().max();
            let est = lanczos_norm_estimate(n, |x| &m * x, NORM_ESTIMATE_STEPS, NORM_ESTIMATE_SEED);
            let ratio = est / exact;
            assert!((0.9..=1.0 + 1e-12).contains(&ratio), "n = {n}, ratio = {ratio}");
        }
    }

    #[test]
    fn lbfgs_identity_before_first_pair() {
        let l = HessianModel::lbfgs(4, 5);
        let x = v(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(l.apply(&x).unwrap(), x);
        assert_eq!(l.norm_estimate(), 1.0);
    }

    proptest! {
        #[test]
        fn weak_secant_holds(
            seed in any::<u64>(),
            n in 2usize..50,
            which in 0usize..3,
        ) {
            let mut rng = rng::seeded(seed);
            let (s, y) = random_pair(&mut rng, n);
            let kind = [DiagonalUpdate::Spectral, DiagonalUpdate::Psb, DiagonalUpdate::Andrei][which];
            let mut b = HessianModel::diagonal(kind, n);
            b.update(&s, &y).unwrap();
            let sbs = s.dot(&b.apply(&s).unwrap());
            let sy = s.dot(&y);
            prop_assert!((sbs - sy).abs() <= 1e-9 * sy.abs());
        }

        #[test]
        fn symmetric_after_updates(seed in any::<u64>(), n in 2usize..15, updates in 1usize..8) {
            let mut rng = rng::seeded(seed);
            let mut models = vec![
                HessianModel::lbfgs(n, 3),
                HessianModel::diagonal(DiagonalUpdate::Psb, n),
                HessianModel::diagonal(DiagonalUpdate::Andrei, n),
                HessianModel::diagonal(DiagonalUpdate::Dbfgs, n),
                HessianModel::diagonal(DiagonalUpdate::Spectral, n),
            ];
            for _ in 0..updates {
                let s = rng::gaussian_vector(&mut rng, n);
                let y = rng::gaussian_vector(&mut rng, n);
                for m in models.iter_mut() {
                    m.update(&s, &y).unwrap();
                }
            }
            for m in &models {
                let u = rng::gaussian_vector(&mut rng, n);
                let w = rng::gaussian_vector(&mut rng, n);
                let lhs = m.apply(&u).unwrap().dot(&w);
                let rhs = u.dot(&m.apply(&w).unwrap());
                prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs().max(rhs.abs())));
                if let HessianModel::Lbfgs(_) = m {
                    prop_assert!(u.dot(&m.apply(&u).unwrap()) > 0.0);
                }
            }
        }
    }
}
