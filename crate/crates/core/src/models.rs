//! Local models of `f + h` around an iterate `x`.
//!
//! ```text
//! phi(s)   = f(x) + g's + s'Bs / 2
//! m(s)     = phi(s) + sigma |s|^2 / 2 + h(x + s)
//! m_cp(s)  = f(x) + g's + |s|^2 / (2 nu) + h(x + s)
//! xi_cp    = f(x) + h(x) - (f(x) + g's_cp + h(x + s_cp))
//! ```
//!
//! The Cauchy step `s_cp` minimizes `m_cp`; it is one proximal-gradient step
//! of length `nu` from `x`.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::quasinewton::HessianModel;
use crate::regularizers::NonsmoothTerm;

/// Step length `theta1 / (beta + sigma)`.
pub fn step_length(theta1: f64, beta: f64, sigma: f64) -> f64 {
    theta1 / (beta + sigma)
}

/// `sqrt(xi_cp / nu)`, the nonsmooth analogue of the gradient norm.
pub fn stationarity_measure(xi_cp: f64, nu: f64) -> f64 {
    (xi_cp / nu).max(0.0).sqrt()
}

/// Snapshot of everything the models need at one iterate.
pub struct ModelContext<'a> {
    pub x: &'a DVector<f64>,
    pub fx: f64,
    pub hx: f64,
    pub gx: &'a DVector<f64>,
    pub hessian: &'a HessianModel,
    pub h: &'a dyn NonsmoothTerm,
    pub sigma: f64,
    pub nu: f64,
}

#[derive(Debug, Clone)]
pub struct CauchyStep {
    pub step: DVector<f64>,
    pub xi: f64,
    /// `h(x + s_cp)`.
    pub h_trial: f64,
}

impl<'a> ModelContext<'a> {
    /// Builds a context with `nu = theta1 / (beta + sigma)`, `beta` the Hessian norm estimate.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x: &'a DVector<f64>,
        fx: f64,
        gx: &'a DVector<f64>,
        hessian: &'a HessianModel,
        h: &'a dyn NonsmoothTerm,
        sigma: f64,
        theta1: f64,
    ) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
        }
        if !(theta1 > 0.0 && theta1 < 1.0) {
            return Err(Error::InvalidParameter(format!("theta1 must lie in (0, 1), got {theta1}")));
        }
        let nu = step_length(theta1, hessian.norm_estimate(), sigma);
        Self::with_step(x, fx, gx, hessian, h, sigma, nu)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_step(
        x: &'a DVector<f64>,
        fx: f64,
        gx: &'a DVector<f64>,
        hessian: &'a HessianModel,
        h: &'a dyn NonsmoothTerm,
        sigma: f64,
        nu: f64,
    ) -> Result<Self> {
        if gx.len() != x.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), got: gx.len() });
        }
        if hessian.dim() != x.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), got: hessian.dim() });
        }
        let hx = h.value(x)?;
        Ok(Self { x, fx, hx, gx, hessian, h, sigma, nu })
    }

    /// Like [`ModelContext::with_step`] with `h(x)` already known; dimensions are not rechecked.
    #[allow(clippy::too_many_arguments)]
    pub fn from_values(
        x: &'a DVector<f64>,
        fx: f64,
        hx: f64,
        gx: &'a DVector<f64>,
        hessian: &'a HessianModel,
        h: &'a dyn NonsmoothTerm,
        sigma: f64,
        nu: f64,
    ) -> Self {
        Self { x, fx, hx, gx, hessian, h, sigma, nu }
    }

    fn check(&self, s: &DVector<f64>) -> Result<()> {
        if s.len() != self.x.len() {
            return Err(Error::DimensionMismatch { expected: self.x.len(), got: s.len() });
        }
        Ok(())
    }

    /// `phi(s)` given a precomputed `B s`.
    pub fn phi_with(&self, s: &DVector<f64>, bs: &DVector<f64>) -> f64 {
        self.fx + self.gx.dot(s) + 0.5 * s.dot(bs)
    }

    pub fn phi_value(&self, s: &DVector<f64>) -> Result<f64> {
        self.check(s)?;
        let bs = self.hessian.apply(s)?;
        Ok(self.phi_with(s, &bs))
    }

    /// `m(s)` given `B s` and `h(x + s)`.
    pub fn model_with(&self, s: &DVector<f64>, bs: &DVector<f64>, h_trial: f64) -> f64 {
        self.phi_with(s, bs) + 0.5 * self.sigma * s.norm_squared() + h_trial
    }

    pub fn model_value(&self, s: &DVector<f64>) -> Result<f64> {
        self.check(s)?;
        let bs = self.hessian.apply(s)?;
        let h_trial = self.h.value(&(self.x + s))?;
        Ok(self.model_with(s, &bs, h_trial))
    }

    /// `m_cp(s)`.
    pub fn cauchy_model_value(&self, s: &DVector<f64>) -> Result<f64> {
        self.check(s)?;
        let h_trial = self.h.value(&(self.x + s))?;
        Ok(self.fx + self.gx.dot(s) + 0.5 * s.norm_squared() / self.nu + h_trial)
    }

    /// `f(x) + h(x) - (phi(s) + h(x + s))` given `B s` and `h(x + s)`.
    ///
    /// `f(x)` cancels analytically and is left out of the subtraction.
    pub fn xi_with(&self, s: &DVector<f64>, bs: &DVector<f64>, h_trial: f64) -> f64 {
        let decrease_h = self.hx - h_trial;
        let quad = self.gx.dot(s) + 0.5 * s.dot(bs);
        if decrease_h.is_nan() {
            // +inf - +inf: both points lie outside dom h
            return f64::NEG_INFINITY;
        }
        decrease_h - quad
    }

    pub fn xi_full(&self, s: &DVector<f64>) -> Result<f64> {
        self.check(s)?;
        let bs = self.hessian.apply(s)?;
        let h_trial = self.h.value(&(self.x + s))?;
        Ok(self.xi_with(s, &bs, h_trial))
    }

    /// Cauchy step `s_cp = prox_{nu h}(x - nu g) - x` and its decrease `xi_cp`.
    pub fn cauchy_step(&self) -> Result<CauchyStep> {
        let q = self.x - self.gx * self.nu;
        let y = self.h.prox(self.nu, &q)?;
        let h_trial = self.h.value(&y)?;
        let step = y - self.x;
        let xi = (self.hx - h_trial) - self.gx.dot(&step);
        let tol = 1e-12 * (1.0 + (self.fx + self.hx).abs());
        if !(xi >= -tol) {
            return Err(Error::NumericalInconsistency(format!(
                "negative Cauchy decrease xi_cp = {xi:e}"
            )));
        }
        Ok(CauchyStep { step, xi: xi.max(0.0), h_trial })
    }
}
