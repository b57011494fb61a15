//! Nonsmooth terms `h` and their proximal operators.
//!
//! [`NonsmoothTerm`] is the interface the solvers consume. [`Regularizer`]
//! implements it for the zero, l0, l1, nuclear-norm and rank penalties.
//! Matrix penalties act on column-major vectorized matrices.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A proper lower semi-continuous term with a computable prox.
pub trait NonsmoothTerm: Send + Sync {
    fn name(&self) -> String;

    /// Weight `lambda` multiplying the base penalty.
    fn weight(&self) -> f64;

    /// `h(x)`, possibly `+inf`.
    fn value(&self, x: &DVector<f64>) -> Result<f64>;

    /// A global minimizer of `h(y) + |y - q|^2 / (2 nu)`.
    ///
    /// Returns [`Error::ProxUnbounded`] when that problem has no minimizer
    /// because it is unbounded below.
    fn prox(&self, nu: f64, q: &DVector<f64>) -> Result<DVector<f64>>;

    fn is_separable(&self) -> bool {
        false
    }

    /// Coordinate-wise minimizer `s` of `g_i s_i + d_i s_i^2 / 2 + h_i(x_i + s_i)`.
    fn shifted_prox_separable(
        &self,
        _x: &DVector<f64>,
        _g: &DVector<f64>,
        _d: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        Err(Error::UnsupportedRegularizer(self.name()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularizerKind {
    Zero,
    L0,
    L1,
    Nuclear,
    Rank,
}

impl RegularizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RegularizerKind::Zero => "zero",
            RegularizerKind::L0 => "l0",
            RegularizerKind::L1 => "l1",
            RegularizerKind::Nuclear => "nuclear",
            RegularizerKind::Rank => "rank",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Vector(usize),
    Matrix { rows: usize, cols: usize },
}

impl Shape {
    pub fn len(self) -> usize {
        match self {
            Shape::Vector(n) => n,
            Shape::Matrix { rows, cols } => rows * cols,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regularizer {
    kind: RegularizerKind,
    lambda: f64,
    shape: Shape,
}

/// Singular values below this fraction of the largest do not count towards rank.
pub const RANK_RELATIVE_TOL: f64 = 1e-10;

impl Regularizer {
    pub fn new(kind: RegularizerKind, lambda: f64, shape: Shape) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "regularizer weight must be finite and nonnegative, got {lambda}"
            )));
        }
        let matrix_kind = matches!(kind, RegularizerKind::Nuclear | RegularizerKind::Rank);
        let matrix_shape = matches!(shape, Shape::Matrix { .. });
        if matrix_kind && !matrix_shape {
            return Err(Error::InvalidDimension(format!(
                "{} regularizer needs a matrix shape",
                kind.as_str()
            )));
        }
        Ok(Self {
            kind,
            lambda,
            shape,
        })
    }

    pub fn zero(n: usize) -> Self {
        Self::new(RegularizerKind::Zero, 0.0, Shape::Vector(n)).expect("valid zero regularizer")
    }

    pub fn l0(lambda: f64, n: usize) -> Result<Self> {
        Self::new(RegularizerKind::L0, lambda, Shape::Vector(n))
    }

    pub fn l1(lambda: f64, n: usize) -> Result<Self> {
        Self::new(RegularizerKind::L1, lambda, Shape::Vector(n))
    }

    pub fn nuclear(lambda: f64, rows: usize, cols: usize) -> Result<Self> {
        Self::new(RegularizerKind::Nuclear, lambda, Shape::Matrix { rows, cols })
    }

    pub fn rank(lambda: f64, rows: usize, cols: usize) -> Result<Self> {
        Self::new(RegularizerKind::Rank, lambda, Shape::Matrix { rows, cols })
    }

    pub fn kind(&self) -> RegularizerKind {
        self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    fn check_len(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.shape.len() {
            return Err(Error::DimensionMismatch {
                expected: self.shape.len(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn as_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self.shape {
            Shape::Matrix { rows, cols } => DMatrix::from_column_slice(rows, cols, x.as_slice()),
            Shape::Vector(n) => DMatrix::from_column_slice(n, 1, x.as_slice()),
        }
    }

    /// Unweighted penalty value, e.g. the number of nonzeros for l0.
    pub fn base_value(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_len(x)?;
        Ok(match self.kind {
            RegularizerKind::Zero => 0.0,
            RegularizerKind::L0 => x.iter().filter(|&&v| v != 0.0).count() as f64,
            RegularizerKind::L1 => x.iter().map(|v| v.abs()).sum(),
            RegularizerKind::Nuclear => self.as_matrix(x).singular_values().sum(),
            RegularizerKind::Rank => matrix_rank(&self.as_matrix(x)) as f64,
        })
    }

    fn apply_svd_threshold(&self, q: &DVector<f64>, threshold: impl Fn(f64) -> f64) -> DVector<f64> {
        let mut svd = self.as_matrix(q).svd(true, true);
        svd.singular_values.apply(|s| *s = threshold(*s));
        let out = svd.recompose().expect("both factors were requested");
        DVector::from_column_slice(out.as_slice())
    }
}

/// Number of singular values above `RANK_RELATIVE_TOL` times the largest one.
pub fn matrix_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.singular_values();
    let top = sv.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_RELATIVE_TOL * top).count()
}

/// `sign(q) max(|q| - t, 0)`.
pub fn soft_threshold(q: f64, t: f64) -> f64 {
    q.signum() * (q.abs() - t).max(0.0)
}

/// Keeps `q` iff `q^2 > threshold_sq`; the tie goes to zero.
pub fn hard_threshold(q: f64, threshold_sq: f64) -> f64 {
    if q * q > threshold_sq {
        q
    } else {
        0.0
    }
}

fn check_finite(v: &DVector<f64>, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_step(nu: f64) -> Result<()> {
    if nu > 0.0 && nu.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "prox step length must be positive and finite, got {nu}"
        )))
    }
}

impl NonsmoothTerm for Regularizer {
    fn name(&self) -> String {
        self.kind.as_str().to_string()
    }

    fn weight(&self) -> f64 {
        self.lambda
    }

    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.lambda * self.base_value(x)?)
    }

    fn prox(&self, nu: f64, q: &DVector<f64>) -> Result<DVector<f64>> {
        check_step(nu)?;
        self.check_len(q)?;
        check_finite(q, "prox")?;
        let t = nu * self.lambda;
        Ok(match self.kind {
            RegularizerKind::Zero => q.clone(),
            RegularizerKind::L1 => q.map(|v| soft_threshold(v, t)),
            RegularizerKind::L0 => q.map(|v| hard_threshold(v, 2.0 * t)),
            _ if t == 0.0 => q.clone(),
            RegularizerKind::Nuclear => self.apply_svd_threshold(q, |s| (s - t).max(0.0)),
            RegularizerKind::Rank => self.apply_svd_threshold(q, |s| hard_threshold(s, 2.0 * t)),
        })
    }

    fn is_separable(&self) -> bool {
        matches!(
            self.kind,
            RegularizerKind::Zero | RegularizerKind::L0 | RegularizerKind::L1
        )
    }

    fn shifted_prox_separable(
        &self,
        x: &DVector<f64>,
        g: &DVector<f64>,
        d: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if !self.is_separable() {
            return Err(Error::UnsupportedRegularizer(self.name()));
        }
        self.check_len(x)?;
        for v in [g, d] {
            if v.len() != x.len() {
                return Err(Error::DimensionMismatch {
                    expected: x.len(),
                    got: v.len(),
                });
            }
        }
        check_finite(x, "shifted prox")?;
        check_finite(g, "shifted prox")?;
        check_finite(d, "shifted prox")?;
        if let Some((index, &value)) = d.iter().enumerate().find(|(_, &v)| v <= 0.0) {
            return Err(Error::NonconvexCoordinate { index, value });
        }
        let lambda = self.lambda;
        let kind = self.kind;
        Ok(DVector::from_fn(x.len(), |i, _| {
            let q = x[i] - g[i] / d[i];
            let y = match kind {
                RegularizerKind::L1 => soft_threshold(q, lambda / d[i]),
                RegularizerKind::L0 => hard_threshold(q, 2.0 * lambda / d[i]),
                _ => q,
            };
            y - x[i]
        }))
    }
}
