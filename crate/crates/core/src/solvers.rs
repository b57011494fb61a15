//! R2N and its instances R2, R2DH and LM.
//!
//! Every solver runs the same outer loop: estimate `beta ~ |B|`, take
//! `nu = theta1 / (beta + sigma)`, compute the Cauchy step, improve on it,
//! then accept or reject on the ratio of actual to predicted decrease.
//! Only the step computation differs:
//!
//! | solver | B              | step                                    |
//! |--------|----------------|-----------------------------------------|
//! | R2     | 0              | `s_cp`                                  |
//! | R2DH   | diagonal       | closed-form diagonal prox               |
//! | R2N    | any            | R2 or R2DH on the model, from `s_cp`    |
//! | LM     | `J'J`          | R2 or R2DH on the model, from `s_cp`    |

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linops::LinearMap;
use crate::models::{stationarity_measure, step_length, CauchyStep, ModelContext};
use crate::objectives::{Counters, CountingOperator, EvalCounts, ResidualStructure, SmoothObjective};
use crate::quasinewton::{DiagonalUpdate, HessianModel};
use crate::regularizers::NonsmoothTerm;

/// Relative tolerance of the runtime law monitors.
pub const MONITOR_RTOL: f64 = 1e-10;
/// Below `TINY_DECREASE * (1 + |f + h|)` both decreases count as zero.
pub const TINY_DECREASE: f64 = 1e-12;
const RAYLEIGH_PASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub theta1: f64,
    pub theta2: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub sigma0: f64,
    pub sigma_min: f64,
    pub eps_a: f64,
    pub eps_r: f64,
    pub max_iter: usize,
    pub max_time_s: f64,
    /// `q`; zero means monotone.
    pub nonmonotone_memory: usize,
    pub sigma_decrease_factor: f64,
    pub sigma_increase_factor: f64,
    /// Memory of the L-BFGS model built by [`Method::r2n_lbfgs`].
    pub lbfgs_memory: usize,
    /// Cap on inner iterations per outer iteration.
    pub inner_max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        let eps = f64::EPSILON;
        Self {
            theta1: 1.0 / (1.0 + eps.powf(0.2)),
            theta2: 1.0 / eps,
            eta1: eps.powf(0.25),
            eta2: 0.9,
            gamma1: 3.0,
            gamma2: 3.0,
            gamma3: 1.0 / 3.0,
            sigma0: eps.cbrt(),
            sigma_min: eps.powf(2.0 / 3.0),
            eps_a: eps.powf(0.3),
            eps_r: eps.powf(0.3),
            max_iter: 1000,
            max_time_s: 3600.0,
            nonmonotone_memory: 0,
            sigma_decrease_factor: 1.0 / 3.0,
            sigma_increase_factor: 3.0,
            lbfgs_memory: 5,
            inner_max_iter: 100,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        let all = [
            self.theta1,
            self.theta2,
            self.eta1,
            self.eta2,
            self.gamma1,
            self.gamma2,
            self.gamma3,
            self.sigma0,
            self.sigma_min,
            self.eps_a,
            self.eps_r,
            self.sigma_decrease_factor,
            self.sigma_increase_factor,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("options must be finite");
        }
        if !(0.0 < self.theta1 && self.theta1 < 1.0 && 1.0 < self.theta2) {
            return bad("need 0 < theta1 < 1 < theta2");
        }
        if !(0.0 < self.eta1 && self.eta1 <= self.eta2 && self.eta2 < 1.0) {
            return bad("need 0 < eta1 <= eta2 < 1");
        }
        if !(0.0 < self.gamma3 && self.gamma3 <= 1.0 && 1.0 < self.gamma1 && self.gamma1 <= self.gamma2) {
            return bad("need 0 < gamma3 <= 1 < gamma1 <= gamma2");
        }
        if !(self.gamma3 <= self.sigma_decrease_factor && self.sigma_decrease_factor <= 1.0) {
            return bad("sigma_decrease_factor must lie in [gamma3, 1]");
        }
        if !(self.gamma1 <= self.sigma_increase_factor && self.sigma_increase_factor <= self.gamma2) {
            return bad("sigma_increase_factor must lie in [gamma1, gamma2]");
        }
        if !(0.0 < self.sigma_min && self.sigma_min < self.sigma0) {
            return bad("need 0 < sigma_min < sigma0");
        }
        if self.eps_a < 0.0 || self.eps_r < 0.0 {
            return bad("tolerances must be nonnegative");
        }
        if self.max_time_s.is_nan() || self.max_time_s < 0.0 {
            return bad("max_time_s must be nonnegative");
        }
        if self.lbfgs_memory == 0 {
            return bad("lbfgs_memory must be positive");
        }
        Ok(())
    }
}

/// Inner solver applied to the model by R2N and LM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subsolver {
    R2,
    R2dh(DiagonalUpdate),
}

impl Subsolver {
    pub fn label(self) -> &'static str {
        match self {
            Subsolver::R2 => "R2",
            Subsolver::R2dh(_) => "R2DH",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Method {
    R2,
    R2dh(DiagonalUpdate),
    R2n { hessian: HessianModel, subsolver: Subsolver },
    Lm(Subsolver),
}

impl Method {
    /// R2N with an L-BFGS model of the given memory.
    pub fn r2n_lbfgs(n: usize, memory: usize, subsolver: Subsolver) -> Self {
        Method::R2n { hessian: HessianModel::lbfgs(n, memory), subsolver }
    }

    pub fn name(&self) -> String {
        match self {
            Method::R2 => "R2".into(),
            Method::R2dh(kind) => format!("R2DH-{}", diagonal_label(*kind)),
            Method::R2n { subsolver, .. } => format!("R2N-{}", subsolver.label()),
            Method::Lm(subsolver) => format!("LM-{}", subsolver.label()),
        }
    }
}

pub fn diagonal_label(kind: DiagonalUpdate) -> &'static str {
    match kind {
        DiagonalUpdate::Spectral => "Spec",
        DiagonalUpdate::Psb => "PSB",
        DiagonalUpdate::Andrei => "Andrei",
        DiagonalUpdate::Dbfgs => "DBFGS",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    FirstOrder,
    MaxIter,
    MaxTime,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::FirstOrder => "first_order",
            Status::MaxIter => "max_iter",
            Status::MaxTime => "max_time",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterationStatus {
    VerySuccessful,
    Successful,
    Unsuccessful,
}

impl IterationStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            IterationStatus::VerySuccessful => "very_successful",
            IterationStatus::Successful => "successful",
            IterationStatus::Unsuccessful => "unsuccessful",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "very_successful" => Some(IterationStatus::VerySuccessful),
            "successful" => Some(IterationStatus::Successful),
            "unsuccessful" => Some(IterationStatus::Unsuccessful),
            _ => None,
        }
    }

    pub fn accepted(self) -> bool {
        self != IterationStatus::Unsuccessful
    }
}

/// One outer iteration. `f_plus_h`, `sigma`, `nu` and `measure` refer to `x_k`.
///
/// `measure` is NaN when the prox was unbounded at this `nu`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub f_plus_h: f64,
    pub sigma: f64,
    pub nu: f64,
    pub measure: f64,
    pub rho: f64,
    pub status: IterationStatus,
}

/// Outcome of the runtime checks of the algorithm's guarantees.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MonitorReport {
    pub checks: usize,
    pub violations: Vec<String>,
}

impl MonitorReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    /// Records `lhs >= rhs` up to `MONITOR_RTOL` relative.
    fn at_least(&mut self, law: &str, k: usize, lhs: f64, rhs: f64) {
        self.checks += 1;
        let tol = MONITOR_RTOL * lhs.abs().max(rhs.abs());
        if !(lhs >= rhs - tol) {
            self.violations.push(format!("k={k}: {law}: {lhs:e} < {rhs:e}"));
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub solver: String,
    pub status: Status,
    pub x: DVector<f64>,
    pub f: f64,
    pub h: f64,
    pub lambda: f64,
    /// Last computed `sqrt(xi_cp / nu)`.
    pub measure: f64,
    /// Gap to the best `f + h` of a run set; NaN until set.
    pub delta: f64,
    pub counts: EvalCounts,
    /// Whether `num_grad_or_j` reports Jacobian products.
    pub counts_jacobian: bool,
    pub iterations: usize,
    pub successful: usize,
    pub unsuccessful: usize,
    pub inner_iterations: usize,
    pub time_s: f64,
    pub trace: Vec<TraceRow>,
    pub monitor: MonitorReport,
}

impl RunRecord {
    pub fn f_plus_h(&self) -> f64 {
        self.f + self.h
    }

    /// `h / lambda`, or `h` when `lambda = 0`.
    pub fn h_over_lambda(&self) -> f64 {
        if self.lambda > 0.0 {
            self.h / self.lambda
        } else {
            self.h
        }
    }

    pub fn num_grad_or_j(&self) -> usize {
        if self.counts_jacobian {
            self.counts.jprod
        } else {
            self.counts.grad
        }
    }
}

/// Inner stopping tolerance at outer iteration `k`.
pub fn subsolver_tolerance(xi_cp: f64, nu: f64, k: usize) -> f64 {
    if k == 0 {
        return 1e-3;
    }
    let r = (xi_cp / nu).max(0.0);
    r.powf(1.5).min(1e-3 * r.sqrt())
}

/// `(f + h)` at the most recent successful iterates.
#[derive(Debug, Clone)]
pub struct NonmonotoneHistory {
    capacity: usize,
    values: VecDeque<f64>,
}

impl NonmonotoneHistory {
    pub fn new(q: usize, initial: f64) -> Self {
        let capacity = q.max(1);
        let mut values = VecDeque::with_capacity(capacity);
        values.push_back(initial);
        Self { capacity, values }
    }

    pub fn push(&mut self, value: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied()
    }
}

/// `(f + h)_max`: the largest stored value.
pub fn nonmonotone_reference(history: &NonmonotoneHistory) -> f64 {
    history.values().fold(f64::NEG_INFINITY, f64::max)
}

/// Ratio of actual to predicted decrease in extended arithmetic.
///
/// Any infinite or NaN operand gives 0. When both decreases are below
/// `TINY_DECREASE * (1 + |f + h|)` the ratio is 1 if `ared >= 0` and 0 otherwise.
pub fn reduction_ratio(ared: f64, pred: f64, f_plus_h: f64) -> f64 {
    if !ared.is_finite() || !pred.is_finite() {
        return 0.0;
    }
    let tiny = TINY_DECREASE * (1.0 + f_plus_h.abs());
    if ared.abs() < tiny && pred.abs() < tiny {
        return if ared >= 0.0 { 1.0 } else { 0.0 };
    }
    if pred <= 0.0 {
        return 0.0;
    }
    ared / pred
}

pub fn r2_solve(
    prob: &dyn SmoothObjective,
    h: &dyn NonsmoothTerm,
    x0: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<RunRecord> {
    solve(&Method::R2, prob, h, x0, opts, None)
}

pub fn r2dh_solve(
    prob: &dyn SmoothObjective,
    h: &dyn NonsmoothTerm,
    x0: &DVector<f64>,
    kind: DiagonalUpdate,
    opts: &SolverOptions,
) -> Result<RunRecord> {
    solve(&Method::R2dh(kind), prob, h, x0, opts, None)
}

pub fn r2n_solve(
    prob: &dyn SmoothObjective,
    h: &dyn NonsmoothTerm,
    x0: &DVector<f64>,
    hessian: HessianModel,
    subsolver: Subsolver,
    opts: &SolverOptions,
) -> Result<RunRecord> {
    solve(&Method::R2n { hessian, subsolver }, prob, h, x0, opts, None)
}

pub fn lm_solve(
    prob: &dyn SmoothObjective,
    h: &dyn NonsmoothTerm,
    x0: &DVector<f64>,
    subsolver: Subsolver,
    opts: &SolverOptions,
) -> Result<RunRecord> {
    solve(&Method::Lm(subsolver), prob, h, x0, opts, None)
}

/// Runs `method`; `observer` sees every trace row as it is produced.
pub fn solve(
    method: &Method,
    prob: &dyn SmoothObjective,
    h: &dyn NonsmoothTerm,
    x0: &DVector<f64>,
    opts: &SolverOptions,
    observer: Option<&mut dyn FnMut(&TraceRow)>,
) -> Result<RunRecord> {
    opts.validate()?;
    let n = prob.dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x0.len() });
    }
    let check_diagonal = |kind: DiagonalUpdate| {
        if kind != DiagonalUpdate::Spectral && !h.is_separable() {
            Err(Error::UnsupportedRegularizer(h.name()))
        } else {
            Ok(())
        }
    };
    let counters = Counters::new();
    let start = Instant::now();
    let deadline = Duration::try_from_secs_f64(opts.max_time_s)
        .ok()
        .and_then(|d| start.checked_add(d));

    let (outcome, counts_jacobian) = match method {
        Method::Lm(sub) => {
            if let Subsolver::R2dh(kind) = sub {
                check_diagonal(*kind)?;
            }
            let residual = prob
                .as_residual()
                .ok_or_else(|| Error::InvalidParameter("LM needs a residual structure".into()))?;
            let mut oracle = ResidualOracle { res: residual, counters: Arc::clone(&counters), cache: None };
            let jac = oracle.jacobian(x0)?.expect("residual oracle exposes a Jacobian");
            let stage = Stage { opts, step: StepRule::Inner(*sub), sigma0: opts.sigma0, record: true, deadline };
            (run_loop(&stage, &mut oracle, h, x0.clone(), HessianModel::gauss_newton(jac), observer)?, true)
        }
        _ => {
            let (hessian, step, sigma0) = match method {
                // nu_0 = theta1 / sigma0 = 1
                Method::R2 => (HessianModel::zero(n), StepRule::Cauchy, opts.theta1),
                Method::R2dh(kind) => {
                    check_diagonal(*kind)?;
                    (HessianModel::diagonal(*kind, n), StepRule::Diagonal, opts.sigma0)
                }
                Method::R2n { hessian, subsolver } => {
                    if hessian.dim() != n {
                        return Err(Error::DimensionMismatch { expected: n, got: hessian.dim() });
                    }
                    if let Subsolver::R2dh(kind) = subsolver {
                        check_diagonal(*kind)?;
                    }
                    (hessian.clone(), StepRule::Inner(*subsolver), opts.sigma0)
                }
                Method::Lm(_) => unreachable!(),
            };
            let mut oracle = CountedOracle { obj: prob, counters: Arc::clone(&counters) };
            let stage = Stage { opts, step, sigma0, record: true, deadline };
            (run_loop(&stage, &mut oracle, h, x0.clone(), hessian, observer)?, false)
        }
    };
    counters.add_prox(outcome.prox);
    Ok(RunRecord {
        solver: method.name(),
        status: outcome.status,
        f: outcome.fx,
        h: outcome.hx,
        lambda: h.weight(),
        x: outcome.x,
        measure: outcome.measure,
        delta: f64::NAN,
        counts: counters.snapshot(),
        counts_jacobian,
        iterations: outcome.successful + outcome.unsuccessful,
        successful: outcome.successful,
        unsuccessful: outcome.unsuccessful,
        inner_iterations: outcome.inner_iterations,
        time_s: start.elapsed().as_secs_f64(),
        trace: outcome.trace,
        monitor: outcome.monitor,
    })
}

/// Smooth oracle seen by the loop.
trait Oracle {
    fn value(&mut self, x: &DVector<f64>) -> Result<f64>;
    fn gradient(&mut self, x: &DVector<f64>) -> Result<DVector<f64>>;
    /// Jacobian at `x` for Gauss-Newton models.
    fn jacobian(&mut self, _x: &DVector<f64>) -> Result<Option<LinearMap>> {
        Ok(None)
    }
}

struct CountedOracle<'a> {
    obj: &'a dyn SmoothObjective,
    counters: Arc<Counters>,
}

impl Oracle for CountedOracle<'_> {
    fn value(&mut self, x: &DVector<f64>) -> Result<f64> {
        self.counters.add_f();
        Ok(self.obj.value(x))
    }

    fn gradient(&mut self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.counters.add_grad();
        Ok(self.obj.gradient(x))
    }
}

/// `f = |F|^2 / 2`, `grad f = J'F` with every Jacobian product counted.
struct ResidualOracle<'a> {
    res: &'a dyn ResidualStructure,
    counters: Arc<Counters>,
    cache: Option<(DVector<f64>, DVector<f64>)>,
}

impl Oracle for ResidualOracle<'_> {
    fn value(&mut self, x: &DVector<f64>) -> Result<f64> {
        self.counters.add_f();
        let r = self.res.residual(x);
        let v = 0.5 * r.norm_squared();
        self.cache = Some((x.clone(), r));
        Ok(v)
    }

    fn gradient(&mut self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.counters.add_grad();
        let r = match &self.cache {
            Some((cx, r)) if cx == x => r.clone(),
            _ => self.res.residual(x),
        };
        let jac = self.jacobian(x)?.expect("residual oracle exposes a Jacobian");
        Ok(jac.apply_adjoint(&r))
    }

    fn jacobian(&mut self, x: &DVector<f64>) -> Result<Option<LinearMap>> {
        Ok(Some(CountingOperator::wrap(self.res.jacobian(x), Arc::clone(&self.counters))))
    }
}

/// The smooth part of the model, `s -> g's + s'(B + sigma I)s / 2`.
struct ModelOracle<'a> {
    g: &'a DVector<f64>,
    hessian: &'a HessianModel,
    sigma: f64,
    last: Option<(DVector<f64>, DVector<f64>)>,
}

impl ModelOracle<'_> {
    fn product(&mut self, s: &DVector<f64>) -> Result<DVector<f64>> {
        if let Some((ls, bs)) = &self.last {
            if ls == s {
                return Ok(bs.clone());
            }
        }
        let bs = self.hessian.apply(s)?;
        self.last = Some((s.clone(), bs.clone()));
        Ok(bs)
    }
}

impl Oracle for ModelOracle<'_> {
    fn value(&mut self, s: &DVector<f64>) -> Result<f64> {
        let bs = self.product(s)?;
        Ok(self.g.dot(s) + 0.5 * s.dot(&bs) + 0.5 * self.sigma * s.norm_squared())
    }

    fn gradient(&mut self, s: &DVector<f64>) -> Result<DVector<f64>> {
        let bs = self.product(s)?;
        Ok(self.g + bs + s * self.sigma)
    }
}

/// `s -> h(x + s)`.
struct ShiftedTerm<'a> {
    h: &'a dyn NonsmoothTerm,
    x: &'a DVector<f64>,
}

impl NonsmoothTerm for ShiftedTerm<'_> {
    fn name(&self) -> String {
        self.h.name()
    }

    fn weight(&self) -> f64 {
        self.h.weight()
    }

    fn value(&self, s: &DVector<f64>) -> Result<f64> {
        self.h.value(&(self.x + s))
    }

    fn prox(&self, nu: f64, q: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.h.prox(nu, &(self.x + q))? - self.x)
    }

    fn is_separable(&self) -> bool {
        self.h.is_separable()
    }

    fn shifted_prox_separable(
        &self,
        s: &DVector<f64>,
        g: &DVector<f64>,
        d: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.h.shifted_prox_separable(&(self.x + s), g, d)
    }
}

#[derive(Debug, Clone, Copy)]
enum StepRule {
    Cauchy,
    Diagonal,
    Inner(Subsolver),
}

struct Stage<'a> {
    opts: &'a SolverOptions,
    step: StepRule,
    sigma0: f64,
    /// Keep a trace and run the monitors.
    record: bool,
    deadline: Option<Instant>,
}

struct Outcome {
    status: Status,
    x: DVector<f64>,
    fx: f64,
    hx: f64,
    measure: f64,
    successful: usize,
    unsuccessful: usize,
    prox: usize,
    inner_iterations: usize,
    trace: Vec<TraceRow>,
    monitor: MonitorReport,
}

/// A trial step with `B s` and `h(x + s)`.
struct Trial {
    s: DVector<f64>,
    bs: DVector<f64>,
    h: f64,
}

impl Trial {
    fn cauchy(cp: &CauchyStep, bs_cp: &DVector<f64>) -> Self {
        Self { s: cp.step.clone(), bs: bs_cp.clone(), h: cp.h_trial }
    }
}

fn run_loop(
    stage: &Stage,
    oracle: &mut dyn Oracle,
    h: &dyn NonsmoothTerm,
    x0: DVector<f64>,
    mut hessian: HessianModel,
    mut observer: Option<&mut dyn FnMut(&TraceRow)>,
) -> Result<Outcome> {
    let o = stage.opts;
    let mut x = x0;
    let mut fx = oracle.value(&x)?;
    if !fx.is_finite() {
        return Err(Error::NonFinite("f at the starting point"));
    }
    let mut hx = h.value(&x)?;
    if !hx.is_finite() {
        return Err(Error::InvalidParameter("h must be finite at the starting point".into()));
    }
    let mut gx = oracle.gradient(&x)?;
    if !gx.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("gradient at the starting point"));
    }
    let rayleigh = matches!(hessian, HessianModel::Lbfgs(_) | HessianModel::GaussNewton(_));

    let mut sigma = stage.sigma0;
    let mut history = NonmonotoneHistory::new(o.nonmonotone_memory, fx + hx);
    let mut beta: Option<f64> = None;
    let mut target: Option<f64> = None;
    let mut out = Outcome {
        status: Status::MaxIter,
        x: DVector::zeros(0),
        fx: 0.0,
        hx: 0.0,
        measure: f64::NAN,
        successful: 0,
        unsuccessful: 0,
        prox: 0,
        inner_iterations: 0,
        trace: Vec::new(),
        monitor: MonitorReport::default(),
    };

    let mut k = 0;
    loop {
        if k >= o.max_iter {
            out.status = Status::MaxIter;
            break;
        }
        if stage.deadline.is_some_and(|d| Instant::now() >= d) {
            out.status = Status::MaxTime;
            break;
        }
        let phi0 = fx + hx;
        let mut b = match beta {
            Some(b) => b,
            None => {
                if let Some(jac) = oracle.jacobian(&x)? {
                    hessian = HessianModel::gauss_newton(jac);
                }
                hessian.norm_estimate()
            }
        };

        // Cauchy step; for L-BFGS and Gauss-Newton models beta is raised to the
        // Rayleigh quotient along s_cp whenever that quotient exceeds it.
        let mut nu = step_length(o.theta1, b, sigma);
        let mut passes = 0;
        let cauchy = loop {
            let ctx = ModelContext::from_values(&x, fx, hx, &gx, &hessian, h, sigma, nu);
            match ctx.cauchy_step() {
                Ok(cp) => {
                    out.prox += 1;
                    let bs = hessian.apply(&cp.step)?;
                    let ss = cp.step.norm_squared();
                    if rayleigh && passes < RAYLEIGH_PASSES && ss > 0.0 {
                        let r = cp.step.dot(&bs) / ss;
                        if r > b {
                            b = r;
                            nu = step_length(o.theta1, b, sigma);
                            passes += 1;
                            continue;
                        }
                    }
                    break Some((cp, bs));
                }
                Err(Error::ProxUnbounded { .. }) => {
                    out.prox += 1;
                    break None;
                }
                Err(e) => return Err(e),
            }
        };
        beta = Some(b);

        let Some((cp, bs_cp)) = cauchy else {
            // psi(s) = -inf: rho = 0 in extended arithmetic
            let next = sigma * o.sigma_increase_factor;
            let row = TraceRow {
                k,
                f_plus_h: phi0,
                sigma,
                nu,
                measure: f64::NAN,
                rho: 0.0,
                status: IterationStatus::Unsuccessful,
            };
            if stage.record {
                check_sigma_law(&mut out.monitor, o, &row, next);
            }
            sigma = next;
            out.unsuccessful += 1;
            emit(stage, &mut out, &mut observer, row);
            k += 1;
            continue;
        };

        let measure = stationarity_measure(cp.xi, nu);
        out.measure = measure;
        let tol = *target.get_or_insert(o.eps_a + o.eps_r * measure);
        if measure < tol {
            out.status = Status::FirstOrder;
            break;
        }

        let ctx = ModelContext::from_values(&x, fx, hx, &gx, &hessian, h, sigma, nu);
        let mut trial = match stage.step {
            StepRule::Cauchy => Trial::cauchy(&cp, &bs_cp),
            StepRule::Diagonal => diagonal_step(&ctx, &cp, &bs_cp, &mut out.prox)?,
            StepRule::Inner(sub) => {
                inner_step(sub, o, k, &ctx, &cp, &bs_cp, &mut out.prox, &mut out.inner_iterations)
                    .map_err(|e| Error::Solver(format!("subsolver failed at outer iteration {k}: {e}")))?
            }
        };
        let cp_norm = cp.step.norm();
        if trial.s.norm() > o.theta2 * cp_norm {
            trial = Trial::cauchy(&cp, &bs_cp);
        }

        let x_trial = &x + &trial.s;
        let f_trial = oracle.value(&x_trial)?;
        let xi = ctx.xi_with(&trial.s, &trial.bs, trial.h);
        let reference = nonmonotone_reference(&history);
        let ared = reference - (f_trial + trial.h);
        let pred = xi + (reference - phi0);
        let rho = reduction_ratio(ared, pred, phi0);

        let status = if rho >= o.eta2 {
            IterationStatus::VerySuccessful
        } else if rho >= o.eta1 {
            IterationStatus::Successful
        } else {
            IterationStatus::Unsuccessful
        };
        let next = match status {
            IterationStatus::VerySuccessful => (sigma * o.sigma_decrease_factor).max(o.sigma_min),
            IterationStatus::Successful => sigma,
            IterationStatus::Unsuccessful => sigma * o.sigma_increase_factor,
        };
        let row = TraceRow { k, f_plus_h: phi0, sigma, nu, measure, rho, status };

        if stage.record {
            let m = &mut out.monitor;
            let s_norm = trial.s.norm();
            m.at_least("cauchy decrease", k, xi, (1.0 - o.theta1) * cp.xi);
            m.at_least("xi_cp lower bound", k, cp.xi, 0.5 * cp_norm * cp_norm / nu);
            m.at_least(
                "step-size bound",
                k,
                cp.xi,
                s_norm * s_norm / (2.0 * o.theta2 * o.theta2 * nu),
            );
            m.at_least("step guard", k, o.theta2 * cp_norm, s_norm);
            check_sigma_law(m, o, &row, next);
        }

        if status.accepted() {
            let g_new = oracle.gradient(&x_trial)?;
            if !g_new.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("gradient at an accepted iterate"));
            }
            let y = &g_new - &gx;
            match hessian.update(&trial.s, &y) {
                Ok(()) | Err(Error::InvalidUpdate(_)) => {}
                Err(e) => return Err(e),
            }
            x = x_trial;
            fx = f_trial;
            hx = trial.h;
            gx = g_new;
            history.push(fx + hx);
            beta = None;
            out.successful += 1;
        } else {
            out.unsuccessful += 1;
        }
        sigma = next;
        emit(stage, &mut out, &mut observer, row);
        k += 1;
    }

    out.x = x;
    out.fx = fx;
    out.hx = hx;
    Ok(out)
}

fn emit(stage: &Stage, out: &mut Outcome, observer: &mut Option<&mut dyn FnMut(&TraceRow)>, row: TraceRow) {
    if let Some(cb) = observer.as_mut() {
        cb(&row);
    }
    if stage.record {
        out.trace.push(row);
    }
}

fn check_sigma_law(m: &mut MonitorReport, o: &SolverOptions, row: &TraceRow, next: f64) {
    let s = row.sigma;
    let (lo, hi) = match row.status {
        IterationStatus::VerySuccessful => (o.gamma3 * s, s),
        IterationStatus::Successful => (s, o.gamma1 * s),
        IterationStatus::Unsuccessful => (o.gamma1 * s, o.gamma2 * s),
    };
    m.at_least("sigma interval (lower)", row.k, next, lo);
    m.at_least("sigma interval (upper)", row.k, hi, next);
}

/// Closed-form minimizer of the model with diagonal `B`; falls back to `s_cp`
/// whenever it does not improve on it.
fn diagonal_step(
    ctx: &ModelContext,
    cp: &CauchyStep,
    bs_cp: &DVector<f64>,
    prox: &mut usize,
) -> Result<Trial> {
    let d = ctx.hessian.diagonal_view().expect("diagonal step needs a diagonal model");
    let shift = |di: f64| {
        let v = di + ctx.sigma;
        let floor = 1e-12 * (1.0 + di.abs());
        if v > floor {
            v
        } else {
            floor
        }
    };
    let step = if ctx.h.is_separable() {
        let dt = d.map(shift);
        ctx.h.shifted_prox_separable(ctx.x, ctx.gx, &dt)
    } else {
        // spectral: one prox with step 1 / (tau + sigma)
        let c = shift(d[0]);
        let q = ctx.x - ctx.gx / c;
        ctx.h.prox(1.0 / c, &q).map(|y| y - ctx.x)
    };
    *prox += 1;
    let s = match step {
        Ok(s) => s,
        Err(Error::ProxUnbounded { .. }) => return Ok(Trial::cauchy(cp, bs_cp)),
        Err(e) => return Err(e),
    };
    let bs = d.component_mul(&s);
    let h_s = ctx.h.value(&(ctx.x + &s))?;
    let m_s = ctx.model_with(&s, &bs, h_s);
    let m_cp = ctx.model_with(&cp.step, bs_cp, cp.h_trial);
    if !(m_s <= m_cp) {
        return Ok(Trial::cauchy(cp, bs_cp));
    }
    Ok(Trial { s, bs, h: h_s })
}

/// Runs R2 or R2DH on `s -> m(s)` from `s_cp` until its own measure drops below
/// the subsolver tolerance.
#[allow(clippy::too_many_arguments)]
fn inner_step(
    sub: Subsolver,
    o: &SolverOptions,
    k: usize,
    ctx: &ModelContext,
    cp: &CauchyStep,
    bs_cp: &DVector<f64>,
    prox: &mut usize,
    inner_iterations: &mut usize,
) -> Result<Trial> {
    let n = ctx.x.len();
    let inner_opts = SolverOptions {
        eps_a: subsolver_tolerance(cp.xi, ctx.nu, k),
        eps_r: 0.0,
        max_iter: o.inner_max_iter,
        max_time_s: f64::INFINITY,
        nonmonotone_memory: 0,
        ..o.clone()
    };
    // start with the outer nu: theta1 / (beta_hat + sigma_hat) = nu
    let (step, hessian, sigma0) = match sub {
        Subsolver::R2 => (StepRule::Cauchy, HessianModel::zero(n), o.theta1 / ctx.nu),
        Subsolver::R2dh(kind) => (StepRule::Diagonal, HessianModel::diagonal(kind, n), o.theta1 / ctx.nu - 1.0),
    };
    let stage = Stage {
        opts: &inner_opts,
        step,
        sigma0: sigma0.max(o.sigma_min),
        record: false,
        deadline: None,
    };
    let mut model = ModelOracle { g: ctx.gx, hessian: ctx.hessian, sigma: ctx.sigma, last: None };
    let shifted = ShiftedTerm { h: ctx.h, x: ctx.x };
    let res = run_loop(&stage, &mut model, &shifted, cp.step.clone(), hessian, None)?;
    *prox += res.prox;
    *inner_iterations += res.successful + res.unsuccessful;

    let s = res.x;
    let bs = model.product(&s)?;
    let m_s = ctx.model_with(&s, &bs, res.hx);
    let m_cp = ctx.model_with(&cp.step, bs_cp, cp.h_trial);
    if !(m_s <= m_cp) {
        return Ok(Trial::cauchy(cp, bs_cp));
    }
    Ok(Trial { s, bs, h: res.hx })
}
