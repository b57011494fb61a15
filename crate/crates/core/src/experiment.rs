//! Experiment configs, the solver roster, and table/trace output.
//!
//! A config is flat `key = value` text; `#` starts a comment. See the README
//! for the full grammar.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Error;
use crate::problems::{
    bpdn_generate, denoise_generate, mc_generate, svm_generate, BpdnParams, DenoiseParams, DenoiseSource, McParams,
    ProblemInstance, SignalKind, SvmParams, SvmSource,
};
use crate::quasinewton::DiagonalUpdate;
use crate::regularizers::RegularizerKind;
use crate::solvers::{solve, Method, RunRecord, SolverOptions, Subsolver, TraceRow};

/// Config keys of the solver roster, in display order.
pub const SOLVER_NAMES: [&str; 10] = [
    "r2",
    "r2dh-spec",
    "r2dh-spec-nm",
    "r2dh-psb",
    "r2dh-andrei",
    "r2dh-dbfgs",
    "r2n-r2",
    "r2n-r2dh",
    "lm-r2",
    "lm-r2dh",
];

/// Memory of the nonmonotone variant.
pub const NONMONOTONE_MEMORY: usize = 5;

pub const TABLE_COLUMNS: [&str; 9] = [
    "Solver",
    "f",
    "h/lambda",
    "Delta_f_plus_h",
    "sqrt_xi_over_nu",
    "num_f",
    "num_grad_or_J",
    "num_prox",
    "time_s",
];

pub const TRACE_COLUMNS: [&str; 7] = ["k", "f_plus_h", "sigma", "nu", "measure", "rho", "status"];

/// A config problem, always naming the key at fault.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("config key `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self { key: key.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSpec {
    Bpdn(BpdnParams),
    Mc(McParams),
    Svm(SvmParams),
    Denoise(DenoiseParams),
}

impl ProblemSpec {
    pub fn family(&self) -> &'static str {
        match self {
            ProblemSpec::Bpdn(_) => "bpdn",
            ProblemSpec::Mc(_) => "mc",
            ProblemSpec::Svm(_) => "svm",
            ProblemSpec::Denoise(_) => "denoise",
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ProblemSpec::Bpdn(p) => p.seed = seed,
            ProblemSpec::Mc(p) => p.seed = seed,
            ProblemSpec::Svm(p) => match &mut p.source {
                SvmSource::Synthetic { seed: s, .. } => *s = seed,
                SvmSource::File { .. } => {}
            },
            ProblemSpec::Denoise(p) => match &mut p.source {
                DenoiseSource::Synthetic { seed: s, .. } | DenoiseSource::File { seed: s, .. } => *s = seed,
            },
        }
    }

    pub fn generate(&self) -> crate::Result<ProblemInstance> {
        match self {
            ProblemSpec::Bpdn(p) => bpdn_generate(p),
            ProblemSpec::Mc(p) => mc_generate(p),
            ProblemSpec::Svm(p) => svm_generate(p),
            ProblemSpec::Denoise(p) => denoise_generate(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSpec {
    /// Roster key such as `r2dh-spec-nm`.
    pub name: String,
    pub options: SolverOptions,
}

impl SolverSpec {
    pub fn display_name(&self) -> &'static str {
        display_name(&self.name).expect("roster name checked at parse time")
    }

    pub fn method(&self, n: usize) -> Method {
        let lbfgs = |sub| Method::r2n_lbfgs(n, self.options.lbfgs_memory, sub);
        let spectral = Subsolver::R2dh(DiagonalUpdate::Spectral);
        match self.name.as_str() {
            "r2" => Method::R2,
            "r2dh-spec" | "r2dh-spec-nm" => Method::R2dh(DiagonalUpdate::Spectral),
            "r2dh-psb" => Method::R2dh(DiagonalUpdate::Psb),
            "r2dh-andrei" => Method::R2dh(DiagonalUpdate::Andrei),
            "r2dh-dbfgs" => Method::R2dh(DiagonalUpdate::Dbfgs),
            "r2n-r2" => lbfgs(Subsolver::R2),
            "r2n-r2dh" => lbfgs(spectral),
            "lm-r2" => Method::Lm(Subsolver::R2),
            "lm-r2dh" => Method::Lm(spectral),
            other => unreachable!("unknown solver {other}"),
        }
    }
}

pub fn display_name(key: &str) -> Option<&'static str> {
    Some(match key {
        "r2" => "R2",
        "r2dh-spec" => "R2DH-Spec",
        "r2dh-spec-nm" => "R2DH-Spec-NM",
        "r2dh-psb" => "R2DH-PSB",
        "r2dh-andrei" => "R2DH-Andrei",
        "r2dh-dbfgs" => "R2DH-DBFGS",
        "r2n-r2" => "R2N-R2",
        "r2n-r2dh" => "R2N-R2DH",
        "lm-r2" => "LM-R2",
        "lm-r2dh" => "LM-R2DH",
        _ => return None,
    })
}

/// Default options of a roster entry.
pub fn solver_defaults(key: &str) -> SolverOptions {
    let mut o = SolverOptions::default();
    if key == "r2dh-spec-nm" {
        o.nonmonotone_memory = NONMONOTONE_MEMORY;
    }
    o
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub solvers: Vec<SolverSpec>,
    pub out: Option<PathBuf>,
    pub trace: bool,
}

impl ExperimentConfig {
    pub fn set_seed(&mut self, seed: u64) {
        self.problem.set_seed(seed);
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new("config", format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

const OPTION_KEYS: [&str; 18] = [
    "theta1",
    "theta2",
    "eta1",
    "eta2",
    "gamma1",
    "gamma2",
    "gamma3",
    "sigma0",
    "sigma_min",
    "eps_a",
    "eps_r",
    "max_iter",
    "max_time_s",
    "nonmonotone_memory",
    "sigma_decrease_factor",
    "sigma_increase_factor",
    "lbfgs_memory",
    "inner_max_iter",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse::<T>()
        .map_err(|_| ConfigError::new(key, format!("cannot parse `{value}` as {}", std::any::type_name::<T>())))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::new(key, format!("expected true or false, got `{value}`"))),
    }
}

fn set_option(o: &mut SolverOptions, key: &str, name: &str, value: &str) -> Result<(), ConfigError> {
    let f = |v: &mut f64| -> Result<(), ConfigError> {
        *v = parse_num(key, value)?;
        Ok(())
    };
    match name {
        "theta1" => f(&mut o.theta1),
        "theta2" => f(&mut o.theta2),
        "eta1" => f(&mut o.eta1),
        "eta2" => f(&mut o.eta2),
        "gamma1" => f(&mut o.gamma1),
        "gamma2" => f(&mut o.gamma2),
        "gamma3" => f(&mut o.gamma3),
        "sigma0" => f(&mut o.sigma0),
        "sigma_min" => f(&mut o.sigma_min),
        "eps_a" => f(&mut o.eps_a),
        "eps_r" => f(&mut o.eps_r),
        "max_time_s" => f(&mut o.max_time_s),
        "sigma_decrease_factor" => f(&mut o.sigma_decrease_factor),
        "sigma_increase_factor" => f(&mut o.sigma_increase_factor),
        "max_iter" => {
            o.max_iter = parse_num(key, value)?;
            Ok(())
        }
        "nonmonotone_memory" => {
            o.nonmonotone_memory = parse_num(key, value)?;
            Ok(())
        }
        "lbfgs_memory" => {
            o.lbfgs_memory = parse_num(key, value)?;
            Ok(())
        }
        "inner_max_iter" => {
            o.inner_max_iter = parse_num(key, value)?;
            Ok(())
        }
        _ => Err(ConfigError::new(
            key,
            format!("unknown solver option `{name}`; expected one of {}", OPTION_KEYS.join(", ")),
        )),
    }
}

/// Parses config text. Later assignments override earlier ones.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut entries: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::new(line, format!("line {}: expected `key = value`", lineno + 1)));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::new("", format!("line {}: empty key", lineno + 1)));
        }
        entries.push((key.to_string(), value.trim().to_string()));
    }
    let lookup = |k: &str| entries.iter().rev().find(|(key, _)| key == k).map(|(_, v)| v.as_str());

    let family = lookup("problem").ok_or_else(|| ConfigError::new("problem", "missing; expected bpdn, mc, svm or denoise"))?;
    let mut problem = match family {
        "bpdn" => ProblemSpec::Bpdn(BpdnParams::default()),
        "mc" => ProblemSpec::Mc(McParams::default()),
        "svm" => ProblemSpec::Svm(SvmParams::default()),
        "denoise" => ProblemSpec::Denoise(DenoiseParams::default()),
        other => return Err(ConfigError::new("problem", format!("unknown problem `{other}`; expected bpdn, mc, svm or denoise"))),
    };

    let solver_list = lookup("solvers").ok_or_else(|| ConfigError::new("solvers", "missing solver list"))?;
    let mut solvers: Vec<SolverSpec> = Vec::new();
    for name in solver_list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if display_name(name).is_none() {
            return Err(ConfigError::new(
                "solvers",
                format!("unknown solver `{name}`; expected one of {}", SOLVER_NAMES.join(", ")),
            ));
        }
        if solvers.iter().any(|s| s.name == name) {
            return Err(ConfigError::new("solvers", format!("solver `{name}` listed twice")));
        }
        solvers.push(SolverSpec { name: name.to_string(), options: solver_defaults(name) });
    }
    if solvers.is_empty() {
        return Err(ConfigError::new("solvers", "empty solver list"));
    }

    let mut out = None;
    let mut trace = false;
    let mut seed = None;
    let mut svm_files: (Option<PathBuf>, Option<PathBuf>) = (None, None);
    let mut svm_shape = (200usize, 50usize);
    let mut denoise_side = 16usize;
    let mut denoise_image: Option<PathBuf> = None;

    // global options first so per-solver keys win regardless of order
    for (key, value) in &entries {
        if let Some(name) = key.strip_prefix("options.") {
            for s in &mut solvers {
                set_option(&mut s.options, key, name, value)?;
            }
        }
    }

    for (key, value) in &entries {
        let key = key.as_str();
        let value = value.as_str();
        match key {
            "problem" | "solvers" => continue,
            "seed" => {
                seed = Some(parse_num::<u64>(key, value)?);
                continue;
            }
            "out" => {
                out = Some(PathBuf::from(value));
                continue;
            }
            "trace" => {
                trace = parse_bool(key, value)?;
                continue;
            }
            _ => {}
        }
        if key.starts_with("options.") {
            continue;
        }
        let Some((prefix, name)) = key.split_once('.') else {
            return Err(ConfigError::new(key, "unknown key"));
        };
        if display_name(prefix).is_some() {
            let Some(spec) = solvers.iter_mut().find(|s| s.name == prefix) else {
                return Err(ConfigError::new(key, format!("solver `{prefix}` is not in the solver list")));
            };
            set_option(&mut spec.options, key, name, value)?;
            continue;
        }
        if prefix != problem.family() {
            if ["bpdn", "mc", "svm", "denoise"].contains(&prefix) {
                return Err(ConfigError::new(key, format!("does not apply to problem `{}`", problem.family())));
            }
            return Err(ConfigError::new(key, "unknown key"));
        }
        match &mut problem {
            ProblemSpec::Bpdn(p) => match name {
                "m" => p.m = parse_num(key, value)?,
                "n" => p.n = parse_num(key, value)?,
                "k_sparse" => p.k_sparse = parse_num(key, value)?,
                "noise_std" => p.noise_std = parse_num(key, value)?,
                "signal" => {
                    p.signal = match value {
                        "sign" => SignalKind::Sign,
                        "gaussian" => SignalKind::Gaussian,
                        _ => return Err(ConfigError::new(key, format!("expected sign or gaussian, got `{value}`"))),
                    }
                }
                _ => return Err(ConfigError::new(key, "unknown key")),
            },
            ProblemSpec::Mc(p) => match name {
                "n" => p.n = parse_num(key, value)?,
                "rank" => p.rank = parse_num(key, value)?,
                "c" => p.c = parse_num(key, value)?,
                "sigma_a" => p.sigma_a = parse_num(key, value)?,
                "sigma_b" => p.sigma_b = parse_num(key, value)?,
                "obs_fraction" => p.obs_fraction = parse_num(key, value)?,
                "lambda" => p.lambda = parse_num(key, value)?,
                "regularizer" => {
                    p.kind = match value {
                        "nuclear" => RegularizerKind::Nuclear,
                        "rank" => RegularizerKind::Rank,
                        _ => return Err(ConfigError::new(key, format!("expected nuclear or rank, got `{value}`"))),
                    }
                }
                _ => return Err(ConfigError::new(key, "unknown key")),
            },
            ProblemSpec::Svm(p) => match name {
                "m" => svm_shape.0 = parse_num(key, value)?,
                "n" => svm_shape.1 = parse_num(key, value)?,
                "lambda" => p.lambda = parse_num(key, value)?,
                "features" => svm_files.0 = Some(PathBuf::from(value)),
                "labels" => svm_files.1 = Some(PathBuf::from(value)),
                _ => return Err(ConfigError::new(key, "unknown key")),
            },
            ProblemSpec::Denoise(p) => match name {
                "side" => denoise_side = parse_num(key, value)?,
                "lambda" => p.lambda = parse_num(key, value)?,
                "kernel_radius" => p.kernel_radius = parse_num(key, value)?,
                "kernel_sigma" => p.kernel_sigma = parse_num(key, value)?,
                "noise_std" => p.noise_std = parse_num(key, value)?,
                "image" => denoise_image = Some(PathBuf::from(value)),
                _ => return Err(ConfigError::new(key, "unknown key")),
            },
        }
    }

    match &mut problem {
        ProblemSpec::Svm(p) => {
            p.source = match svm_files {
                (None, None) => SvmSource::Synthetic { m: svm_shape.0, n: svm_shape.1, seed: 1 },
                (Some(features), Some(labels)) => SvmSource::File { features, labels },
                (Some(_), None) => return Err(ConfigError::new("svm.labels", "required with svm.features")),
                (None, Some(_)) => return Err(ConfigError::new("svm.features", "required with svm.labels")),
            }
        }
        ProblemSpec::Denoise(p) => {
            p.source = match denoise_image {
                None => DenoiseSource::Synthetic { side: denoise_side, seed: 1 },
                Some(path) => DenoiseSource::File { path, seed: 1 },
            }
        }
        _ => {}
    }
    if let Some(seed) = seed {
        problem.set_seed(seed);
    }
    for s in &solvers {
        s.options
            .validate()
            .map_err(|e| ConfigError::new(format!("{}.*", s.name), e.to_string()))?;
    }
    Ok(ExperimentConfig { problem, solvers, out, trace })
}

/// One roster entry's outcome.
#[derive(Debug, Clone)]
pub struct SolverRun {
    pub solver: String,
    pub result: Result<RunRecord, Error>,
}

/// Generates the instance once and runs every solver from the same `x0`.
///
/// `observer` receives each solver's display name with every trace row.
pub fn run_experiment(
    config: &ExperimentConfig,
    mut observer: Option<&mut dyn FnMut(&str, &TraceRow)>,
) -> Vec<SolverRun> {
    let instance = match config.problem.generate() {
        Ok(inst) => inst,
        Err(e) => {
            return config
                .solvers
                .iter()
                .map(|s| SolverRun { solver: s.display_name().to_string(), result: Err(e.clone()) })
                .collect()
        }
    };
    let n = instance.x0.len();
    let mut runs: Vec<SolverRun> = config
        .solvers
        .iter()
        .map(|spec| {
            let name = spec.display_name();
            let x0 = instance.x0.clone();
            let result = match observer.as_mut() {
                Some(cb) => {
                    let mut forward = |row: &TraceRow| cb(name, row);
                    solve(&spec.method(n), instance.objective.as_ref(), &instance.regularizer, &x0, &spec.options, Some(&mut forward))
                }
                None => solve(&spec.method(n), instance.objective.as_ref(), &instance.regularizer, &x0, &spec.options, None),
            };
            let result = result.map(|mut rec| {
                rec.solver = name.to_string();
                if !config.trace {
                    rec.trace.clear();
                }
                rec
            });
            SolverRun { solver: name.to_string(), result }
        })
        .collect();
    let best = runs
        .iter()
        .filter_map(|r| r.result.as_ref().ok())
        .map(RunRecord::f_plus_h)
        .fold(f64::INFINITY, f64::min);
    for run in &mut runs {
        if let Ok(rec) = &mut run.result {
            rec.delta = rec.f_plus_h() - best;
        }
    }
    runs
}

/// Scientific notation with three significant digits and a two-digit exponent: `9.22e-02`.
pub fn sci(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "Inf".into() } else { "-Inf".into() };
    }
    let s = format!("{x:.2e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

fn table_cells(r: &RunRecord) -> [String; 9] {
    [
        r.solver.clone(),
        sci(r.f),
        sci(r.h_over_lambda()),
        sci(r.delta),
        sci(r.measure),
        r.counts.f.to_string(),
        r.num_grad_or_j().to_string(),
        r.counts.prox.to_string(),
        sci(r.time_s),
    ]
}

/// Statistics table, one row per record in order.
pub fn emit_table(records: &[RunRecord], format: TableFormat) -> crate::Result<String> {
    if records.is_empty() {
        return Err(Error::InvalidParameter("no records to tabulate".into()));
    }
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str(&TABLE_COLUMNS.join(","));
            out.push('\n');
            for r in records {
                out.push_str(&table_cells(r).join(","));
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            let _ = writeln!(out, "| {} |", TABLE_COLUMNS.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(TABLE_COLUMNS.len()));
            for r in records {
                let _ = writeln!(out, "| {} |", table_cells(r).join(" | "));
            }
        }
    }
    Ok(out)
}

/// Per-iteration CSV; errors when the record carries no trace.
pub fn emit_trace(record: &RunRecord) -> crate::Result<String> {
    if record.trace.len() != record.iterations {
        return Err(Error::InvalidParameter(format!("no trace recorded for {}", record.solver)));
    }
    let mut out = TRACE_COLUMNS.join(",");
    out.push('\n');
    for row in &record.trace {
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{}",
            row.k,
            row.f_plus_h,
            row.sigma,
            row.nu,
            row.measure,
            row.rho,
            row.status.as_str()
        );
    }
    Ok(out)
}

/// File-name-safe form of a display name: `R2DH-Spec-NM` -> `r2dh-spec-nm`.
pub fn file_stem(display: &str) -> String {
    display.to_ascii_lowercase()
}
