//! Generators for the benchmark families: sparse recovery (BPDN), matrix
//! completion, a nonlinear SVM and robust image deblurring.
//!
//! Every generator is a pure function of its parameters and seed.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linops::{blur_operator, entry_mask, random_orthonormal_rows, LinearMap, LinearOperator};
use crate::objectives::{LeastSquares, LogCauchyLoss, SmoothObjective, SvmLoss};
use crate::regularizers::{NonsmoothTerm, Regularizer, RegularizerKind};
use crate::rng;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metadata {
    pub family: &'static str,
    pub m: usize,
    pub n: usize,
    pub sparsity: Option<usize>,
    pub rank: Option<usize>,
    pub lambda: f64,
    pub seed: Option<u64>,
}

#[derive(Clone)]
pub struct ProblemInstance {
    pub objective: Arc<dyn SmoothObjective>,
    pub regularizer: Regularizer,
    pub x0: DVector<f64>,
    pub ground_truth: Option<DVector<f64>>,
    pub metadata: Metadata,
}

impl std::fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("regularizer", &self.regularizer)
            .field("metadata", &self.metadata)
            .finish()
    }
}

impl ProblemInstance {
    fn checked(self) -> Result<Self> {
        if self.x0.len() != self.objective.dim() {
            return Err(Error::DimensionMismatch { expected: self.objective.dim(), got: self.x0.len() });
        }
        if !self.regularizer.value(&self.x0)?.is_finite() {
            return Err(Error::InvalidParameter("h must be finite at x0".into()));
        }
        Ok(self)
    }
}

/// Magnitudes of the planted BPDN nonzeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalKind {
    /// Standard normal values.
    Gaussian,
    /// Random signs, unit magnitude.
    Sign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpdnParams {
    pub m: usize,
    pub n: usize,
    pub k_sparse: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub signal: SignalKind,
}

impl Default for BpdnParams {
    fn default() -> Self {
        Self { m: 200, n: 512, k_sparse: 10, noise_std: 0.1, seed: 1, signal: SignalKind::Sign }
    }
}

/// `|A x - b|^2 / 2 + lambda |x|_0` with `A A' = I`, `b = A x_true + noise`
/// and `lambda = 0.1 |A'b|_inf`.
pub fn bpdn_generate(p: &BpdnParams) -> Result<ProblemInstance> {
    if p.k_sparse > p.n {
        return Err(Error::InvalidDimension(format!("k_sparse = {} exceeds n = {}", p.k_sparse, p.n)));
    }
    if !(p.noise_std >= 0.0 && p.noise_std.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise_std must be >= 0, got {}", p.noise_std)));
    }
    let a = random_orthonormal_rows(p.m, p.n, p.seed)?;
    let mut rng = rng::seeded(p.seed.wrapping_add(1));

    let mut support = sample(&mut rng, p.n, p.k_sparse).into_vec();
    support.sort_unstable();
    let mut x_true = DVector::zeros(p.n);
    for &i in &support {
        x_true[i] = match p.signal {
            SignalKind::Gaussian => rng::normal(&mut rng),
            SignalKind::Sign => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        };
    }
    let noise = rng::gaussian_vector(&mut rng, p.m) * p.noise_std;
    let b = a.apply(&x_true) + noise;
    let lambda = 0.1 * a.apply_adjoint(&b).amax();
    let x0 = rng::gaussian_vector(&mut rng, p.n);

    let op: LinearMap = Arc::new(a);
    ProblemInstance {
        objective: Arc::new(LeastSquares::new(op, b)),
        regularizer: Regularizer::l0(lambda, p.n)?,
        x0,
        ground_truth: Some(x_true),
        metadata: Metadata {
            family: "bpdn",
            m: p.m,
            n: p.n,
            sparsity: Some(p.k_sparse),
            rank: None,
            lambda,
            seed: Some(p.seed),
        },
    }
    .checked()
}

#[derive(Debug, Clone, PartialEq)]
pub struct McParams {
    pub n: usize,
    pub rank: usize,
    pub c: f64,
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub obs_fraction: f64,
    pub kind: RegularizerKind,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for McParams {
    fn default() -> Self {
        Self {
            n: 24,
            rank: 4,
            c: 0.1,
            sigma_a: 0.1,
            sigma_b: 1.0,
            obs_fraction: 0.5,
            kind: RegularizerKind::Nuclear,
            lambda: 0.1,
            seed: 1,
        }
    }
}

/// `|P_omega(X - M)|_F^2 / 2 + lambda h(X)` with `h` the rank or nuclear norm.
///
/// `X_r = U V'` with `U, V` Gaussian scaled by `rank^(-1/4)`, and
/// `M = (1 - c)(X_r + N(0, sigma_a^2)) + c (X_r + N(0, sigma_b^2))` entrywise.
pub fn mc_generate(p: &McParams) -> Result<ProblemInstance> {
    if p.n == 0 || p.rank == 0 || p.rank > p.n {
        return Err(Error::InvalidDimension(format!("need 1 <= rank <= n, got rank = {}, n = {}", p.rank, p.n)));
    }
    if !(0.0..=1.0).contains(&p.c) {
        return Err(Error::InvalidParameter(format!("c must lie in [0, 1], got {}", p.c)));
    }
    if !(p.obs_fraction > 0.0 && p.obs_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!("obs_fraction must lie in (0, 1], got {}", p.obs_fraction)));
    }
    if !(p.sigma_a >= 0.0 && p.sigma_b >= 0.0) {
        return Err(Error::InvalidParameter("noise levels must be nonnegative".into()));
    }
    if !matches!(p.kind, RegularizerKind::Rank | RegularizerKind::Nuclear) {
        return Err(Error::UnsupportedRegularizer(p.kind.as_str().into()));
    }
    let n = p.n;
    let mut rng = rng::seeded(p.seed);
    let scale = (p.rank as f64).powf(-0.25);
    let u = rng::gaussian_matrix(&mut rng, n, p.rank) * scale;
    let v = rng::gaussian_matrix(&mut rng, n, p.rank) * scale;
    let xr = &u * v.transpose();
    let noise_a = rng::gaussian_matrix(&mut rng, n, n) * p.sigma_a;
    let noise_b = rng::gaussian_matrix(&mut rng, n, n) * p.sigma_b;
    let m = &xr + noise_a * (1.0 - p.c) + noise_b * p.c;

    let count = ((p.obs_fraction * (n * n) as f64).ceil() as usize).min(n * n);
    let omega = sample(&mut rng, n * n, count).into_iter().map(|idx| (idx % n, idx / n));
    let mask = entry_mask(n, n, omega)?;
    let b = mask.apply(&DVector::from_column_slice(m.as_slice()));
    let x0 = DVector::from_column_slice(rng::gaussian_matrix(&mut rng, n, n).as_slice());

    ProblemInstance {
        objective: Arc::new(LeastSquares::new(Arc::new(mask), b)),
        regularizer: Regularizer::new(p.kind, p.lambda, crate::regularizers::Shape::Matrix { rows: n, cols: n })?,
        x0,
        ground_truth: Some(DVector::from_column_slice(xr.as_slice())),
        metadata: Metadata {
            family: "mc",
            m: count,
            n: n * n,
            sparsity: None,
            rank: Some(p.rank),
            lambda: p.lambda,
            seed: Some(p.seed),
        },
    }
    .checked()
}

#[derive(Debug, Clone, PartialEq)]
pub enum SvmSource {
    Synthetic { m: usize, n: usize, seed: u64 },
    /// Features CSV (`m` rows, `n` columns) and labels CSV (`m` values in {-1, 1}).
    File { features: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmParams {
    pub lambda: f64,
    pub source: SvmSource,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self { lambda: 0.1, source: SvmSource::Synthetic { m: 200, n: 50, seed: 1 } }
    }
}

/// `|1 - tanh(b .* (A x))|^2 / 2 + lambda |x|_0`, starting from `x0 = 0`.
///
/// The synthetic source draws `A` Gaussian scaled by `n^(-1/2)`, a separator
/// with `max(1, n / 10)` Gaussian nonzeros, labels `sign(A w)` and flips 5%
/// of them.
pub fn svm_generate(p: &SvmParams) -> Result<ProblemInstance> {
    let (features, labels, truth, seed) = match &p.source {
        SvmSource::Synthetic { m, n, seed } => {
            let (m, n) = (*m, *n);
            if m == 0 || n == 0 {
                return Err(Error::InvalidDimension(format!("need m, n >= 1, got m = {m}, n = {n}")));
            }
            let mut rng = rng::seeded(*seed);
            let a = rng::gaussian_matrix(&mut rng, m, n) / (n as f64).sqrt();
            let k = (n / 10).max(1);
            let mut w = DVector::zeros(n);
            for i in sample(&mut rng, n, k) {
                w[i] = rng::normal(&mut rng);
            }
            let mut labels = (&a * &w).map(|z| if z >= 0.0 { 1.0 } else { -1.0 });
            let flips = (0.05 * m as f64).round() as usize;
            for i in sample(&mut rng, m, flips) {
                labels[i] = -labels[i];
            }
            (a, labels, Some(w), Some(*seed))
        }
        SvmSource::File { features, labels } => {
            let a = read_csv_matrix(features)?;
            let b = read_csv_matrix(labels)?;
            if b.ncols() != 1 || b.nrows() != a.nrows() {
                return Err(Error::Data(format!(
                    "{}: expected {} labels in one column, got {}x{}",
                    labels.display(),
                    a.nrows(),
                    b.nrows(),
                    b.ncols()
                )));
            }
            if let Some(bad) = b.iter().find(|&&v| v != 1.0 && v != -1.0) {
                return Err(Error::Data(format!("{}: label {bad} is not -1 or 1", labels.display())));
            }
            (a, b.column(0).into_owned(), None, None)
        }
    };
    let (m, n) = features.shape();
    ProblemInstance {
        objective: Arc::new(SvmLoss::new(features, labels)),
        regularizer: Regularizer::l0(p.lambda, n)?,
        x0: DVector::zeros(n),
        ground_truth: truth,
        metadata: Metadata {
            family: "svm",
            m,
            n,
            sparsity: None,
            rank: None,
            lambda: p.lambda,
            seed,
        },
    }
    .checked()
}

#[derive(Debug, Clone, PartialEq)]
pub enum DenoiseSource {
    Synthetic { side: usize, seed: u64 },
    /// Square grayscale image, PGM or CSV.
    File { path: PathBuf, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseParams {
    pub lambda: f64,
    pub kernel_radius: usize,
    pub kernel_sigma: f64,
    pub noise_std: f64,
    pub source: DenoiseSource,
}

impl Default for DenoiseParams {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            kernel_radius: 2,
            kernel_sigma: 1.0,
            noise_std: 0.01,
            source: DenoiseSource::Synthetic { side: 16, seed: 1 },
        }
    }
}

/// `sum log((A x - b)_i^2 + 1) + lambda |x|_1` with `A` a Gaussian blur,
/// `b = A x* + noise`, starting from `x0 = 0`.
pub fn denoise_generate(p: &DenoiseParams) -> Result<ProblemInstance> {
    if !(p.noise_std >= 0.0 && p.noise_std.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise_std must be >= 0, got {}", p.noise_std)));
    }
    let (image, side, seed) = match &p.source {
        DenoiseSource::Synthetic { side, seed } => {
            if *side < 2 {
                return Err(Error::InvalidDimension(format!("side must be >= 2, got {side}")));
            }
            (synthetic_image(*side, *seed), *side, *seed)
        }
        DenoiseSource::File { path, seed } => {
            let (img, side) = read_image(path)?;
            if side < 2 {
                return Err(Error::Data(format!("{}: image side must be >= 2", path.display())));
            }
            (img, side, *seed)
        }
    };
    let blur: LinearMap = Arc::new(blur_operator(side, p.kernel_radius, p.kernel_sigma)?);
    let mut rng = rng::seeded(seed.wrapping_add(1));
    let b = blur.apply(&image) + rng::gaussian_vector(&mut rng, side * side) * p.noise_std;
    let n = side * side;
    ProblemInstance {
        objective: Arc::new(LogCauchyLoss::new(blur, b)),
        regularizer: Regularizer::l1(p.lambda, n)?,
        x0: DVector::zeros(n),
        ground_truth: Some(image),
        metadata: Metadata {
            family: "denoise",
            m: n,
            n,
            sparsity: None,
            rank: None,
            lambda: p.lambda,
            seed: Some(seed),
        },
    }
    .checked()
}

/// Piecewise-constant test image: background 0.1 plus four seeded rectangles.
pub fn synthetic_image(side: usize, seed: u64) -> DVector<f64> {
    let mut rng = rng::seeded(seed);
    let mut img = DMatrix::from_element(side, side, 0.1);
    for _ in 0..4 {
        let r0 = rng.random_range(0..side);
        let c0 = rng.random_range(0..side);
        let h = rng.random_range(1..=side.div_ceil(2));
        let w = rng.random_range(1..=side.div_ceil(2));
        let level: f64 = rng.random_range(0.3..1.0);
        for c in c0..(c0 + w).min(side) {
            for r in r0..(r0 + h).min(side) {
                img[(r, c)] = level;
            }
        }
    }
    DVector::from_column_slice(img.as_slice())
}

/// Reads a headerless numeric CSV into a matrix.
pub fn read_csv_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::Data(format!("{}: line {}: `{field}` is not a finite number", path.display(), i + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        return Err(Error::Data(format!("{}: no data", path.display())));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Loads a square grayscale image as a column-major vector with values in [0, 1].
///
/// `.pgm` files go through the PNM decoder; anything else is read as a CSV
/// of `side^2` values in row-major order.
pub fn read_image(path: &Path) -> Result<(DVector<f64>, usize)> {
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let (values, rows, cols) = if is_pgm {
        let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let gray = img.to_luma16();
        let (w, h) = gray.dimensions();
        let v: Vec<f64> = gray.pixels().map(|p| p.0[0] as f64 / u16::MAX as f64).collect();
        (v, h as usize, w as usize)
    } else {
        let m = read_csv_matrix(path)?;
        let v: Vec<f64> = m.transpose().iter().copied().collect();
        if let Some(bad) = v.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("{}: pixel value {bad} outside [0, 1]", path.display())));
        }
        let side = (v.len() as f64).sqrt().round() as usize;
        (v, side, side)
    };
    if rows != cols || rows * cols != values.len() {
        return Err(Error::Data(format!("{}: image must be square, got {} values", path.display(), values.len())));
    }
    let side = rows;
    // row-major reading order to column-major storage
    let img = DMatrix::from_row_slice(side, side, &values);
    Ok((DVector::from_column_slice(img.as_slice()), side))
}
