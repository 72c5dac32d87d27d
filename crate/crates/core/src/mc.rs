//! Monte Carlo experiments: convergence rates, exact identities, matched
//! RRR/OLS comparisons and agreement with the limit samplers.
//!
//! Every replication `r` simulates with seed `seed ^ r`; all estimators see
//! the same sample. Replications run on the rayon pool and are collected in
//! index order, so results do not depend on the number of threads.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asymptotics::{correction_projectors, limit_sampler, AsymptoticsError, LimitConfig, LimitSample, ZCovariance};
use crate::covest::{sample_moment, KernelConfig};
use crate::dgp::{
    canonical_form, detrend, make_anderson_var1, make_cy_positive_spec, make_johansen_vecm, make_stationary_spec, CanonicalForm, DgpError,
    DgpSpec, NoiseKind, Preprocessing, Sample, Simulator,
};
use crate::estimators::{
    fm_ols, fm_rrr, ols, project_out, rrr, rrr_geneig, rrr_with_factor, Estimate, EstimatorError, Method, RegressionSample,
};
use crate::linalg::{max_abs, GramFactor};
use crate::series::SeriesMatrix;

/// Share of failed replications per cell that aborts an experiment.
pub const FAILURE_BUDGET: f64 = 0.05;
pub const MIN_REPS: usize = 50;
pub const TOL_BETA_U: f64 = 1e-10;
pub const TOL_ROUTES: f64 = 1e-8;
pub const TOL_FACTOR: f64 = 1e-9;
pub const TOL_FULL_RANK: f64 = 1e-10;
/// Required shrinkage of matched statistics per doubling of `T`.
pub const RATIO_PER_DOUBLING: f64 = 0.8;
/// Limit-draw coordinates whose spread is below this share of the block's
/// largest value are degenerate and skipped by the KS comparison.
const DEGENERATE_SHARE: f64 = 1e-10;
const LIMIT_STREAM: u64 = 0x2545_f491_4f6c_dd1d;

/// A config value that failed validation, with its key path.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{path}: {message}")]
pub struct ValidationError {
    pub path: String,
    pub message: String,
}

impl ValidationError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }

    fn nested(self, prefix: &str) -> Self {
        Self { path: format!("{prefix}.{}", self.path), message: self.message }
    }
}

#[derive(Debug, Error)]
pub enum McError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("{estimator} at T = {t}: {failures} of {reps} replications failed ({first})")]
    FailureBudget { estimator: &'static str, t: usize, failures: usize, reps: usize, first: String },
    #[error(transparent)]
    Dgp(#[from] DgpError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Asymptotics(#[from] AsymptoticsError),
}

/// Row-major matrix as nested arrays.
pub type Rows = Vec<Vec<f64>>;

fn matrix_from_rows(rows: &Rows, path: &str) -> Result<DMatrix<f64>, ValidationError> {
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
        return Err(ValidationError::new(format!("{path}[{i}]"), format!("row has {} entries, expected {ncols}", rows[i].len())));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(ValidationError::new(path, "entries must be finite"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Like [`matrix_from_rows`] with a required shape; `[]` stands for any
/// matrix with a zero dimension.
fn shaped(rows: &Rows, nrows: usize, ncols: usize, path: &str) -> Result<DMatrix<f64>, ValidationError> {
    if rows.is_empty() && (nrows == 0 || ncols == 0) {
        return Ok(DMatrix::zeros(nrows, ncols));
    }
    let m = matrix_from_rows(rows, path)?;
    if m.shape() != (nrows, ncols) {
        return Err(ValidationError::new(path, format!("matrix is {}x{}, expected {nrows}x{ncols}", m.nrows(), m.ncols())));
    }
    Ok(m)
}

pub fn rows_of(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Every field of [`DgpSpec`], matrices row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitSpec {
    pub s: usize,
    pub m_r: usize,
    pub m_u: usize,
    pub k: usize,
    pub c_r: usize,
    pub c_u: usize,
    pub n: usize,
    pub lambda: Rows,
    pub sigma: Rows,
    pub b_r: Rows,
    pub b_u: Rows,
    pub h_r: Rows,
    pub h_u: Rows,
    #[serde(default)]
    pub ar_coeffs: Vec<Rows>,
    pub ma_coeffs: Vec<Rows>,
    #[serde(default)]
    pub noise: NoiseKind,
    #[serde(default)]
    pub burn_in: usize,
}

impl ExplicitSpec {
    fn build(&self) -> Result<DgpSpec<f64>, ValidationError> {
        let d = self.m_r + self.m_u;
        let mats = |v: &[Rows], cols: usize, name: &str| -> Result<Vec<DMatrix<f64>>, ValidationError> {
            v.iter().enumerate().map(|(i, m)| shaped(m, d, cols, &format!("{name}[{i}]"))).collect()
        };
        Ok(DgpSpec {
            s: self.s,
            m_r: self.m_r,
            m_u: self.m_u,
            k: self.k,
            c_r: self.c_r,
            c_u: self.c_u,
            n: self.n,
            lambda: shaped(&self.lambda, self.s, self.k, "lambda")?,
            sigma: shaped(&self.sigma, self.k, self.k, "sigma")?,
            b_r: shaped(&self.b_r, self.s, self.m_r, "b_r")?,
            b_u: shaped(&self.b_u, self.s, self.m_u, "b_u")?,
            h_r: shaped(&self.h_r, self.m_r, self.m_r, "h_r")?,
            h_u: shaped(&self.h_u, self.m_u, self.m_u, "h_u")?,
            ar_coeffs: mats(&self.ar_coeffs, d, "ar_coeffs")?,
            ma_coeffs: mats(&self.ma_coeffs, self.k, "ma_coeffs")?,
            noise: self.noise,
            burn_in: self.burn_in,
        })
    }
}

impl From<&DgpSpec<f64>> for ExplicitSpec {
    fn from(spec: &DgpSpec<f64>) -> Self {
        Self {
            s: spec.s,
            m_r: spec.m_r,
            m_u: spec.m_u,
            k: spec.k,
            c_r: spec.c_r,
            c_u: spec.c_u,
            n: spec.n,
            lambda: rows_of(&spec.lambda),
            sigma: rows_of(&spec.sigma),
            b_r: rows_of(&spec.b_r),
            b_u: rows_of(&spec.b_u),
            h_r: rows_of(&spec.h_r),
            h_u: rows_of(&spec.h_u),
            ar_coeffs: spec.ar_coeffs.iter().map(rows_of).collect(),
            ma_coeffs: spec.ma_coeffs.iter().map(rows_of).collect(),
            noise: spec.noise,
            burn_in: spec.burn_in,
        }
    }
}

/// Data-generating process, either spelled out or through one of the builders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpecConfig {
    Stationary {
        s: usize,
        m_r: usize,
        m_u: usize,
        n: usize,
        seed: u64,
    },
    CyPositive {
        s: usize,
        m_r: usize,
        m_u: usize,
        c_r: usize,
        c_u: usize,
        n: usize,
        c_y: usize,
        seed: u64,
    },
    AndersonVar1 {
        upsilon22: Rows,
        sigma_w: Rows,
        integrated_dim: usize,
    },
    JohansenVecm {
        alpha: Rows,
        beta: Rows,
        #[serde(default)]
        lag_coeffs: Vec<Rows>,
        sigma: Rows,
    },
    Explicit(ExplicitSpec),
}

impl SpecConfig {
    /// Builds and validates the DGP; error paths are relative to the `spec` key.
    pub fn build(&self) -> Result<DgpSpec<f64>, ValidationError> {
        let dgp_err = |e: DgpError| ValidationError::new("kind", e.to_string());
        match self {
            SpecConfig::Stationary { s, m_r, m_u, n, seed } => make_stationary_spec(*s, *m_r, *m_u, *n, *seed).map_err(dgp_err),
            SpecConfig::CyPositive { s, m_r, m_u, c_r, c_u, n, c_y, seed } => {
                make_cy_positive_spec(*s, *m_r, *m_u, *c_r, *c_u, *n, *c_y, *seed).map_err(dgp_err)
            }
            SpecConfig::AndersonVar1 { upsilon22, sigma_w, integrated_dim } => {
                make_anderson_var1(&matrix_from_rows(upsilon22, "upsilon22")?, &matrix_from_rows(sigma_w, "sigma_w")?, *integrated_dim)
                    .map_err(dgp_err)
            }
            SpecConfig::JohansenVecm { alpha, beta, lag_coeffs, sigma } => {
                let lags = lag_coeffs
                    .iter()
                    .enumerate()
                    .map(|(i, g)| matrix_from_rows(g, &format!("lag_coeffs[{i}]")))
                    .collect::<Result<Vec<_>, _>>()?;
                make_johansen_vecm(
                    &matrix_from_rows(alpha, "alpha")?,
                    &matrix_from_rows(beta, "beta")?,
                    &lags,
                    &matrix_from_rows(sigma, "sigma")?,
                )
                .map_err(dgp_err)
            }
            SpecConfig::Explicit(e) => {
                let spec = e.build()?;
                spec.validate().map_err(dgp_err)?;
                Ok(spec)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Rate,
    Identity,
    Matched,
    Dist,
}

fn default_limit_grid() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub kind: ExperimentKind,
    pub spec: SpecConfig,
    pub estimators: Vec<Method>,
    /// Rank used by the restricted estimators; the DGP rank when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(rename = "T_grid")]
    pub t_grid: Vec<usize>,
    #[serde(rename = "R")]
    pub reps: usize,
    pub seed: u64,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub preprocessing: Preprocessing,
    #[serde(rename = "limit_grid_N", default = "default_limit_grid")]
    pub limit_grid_n: usize,
}

/// A validated config together with the objects every experiment needs.
pub struct Setup {
    pub cfg: ExperimentConfig,
    pub spec: DgpSpec<f64>,
    pub canon: CanonicalForm<f64>,
    pub sim: Simulator<f64>,
    pub n: usize,
    t_zr_inv: DMatrix<f64>,
    t_zu_inv: DMatrix<f64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<Setup, ValidationError> {
        if self.id.is_empty() || self.id.contains(['/', '\\', ',', '"']) {
            return Err(ValidationError::new("id", "must be nonempty and free of / \\ , \""));
        }
        if !(self.kernel.b > 0.25 && self.kernel.b < 2.0 / 3.0) {
            return Err(ValidationError::new("kernel.b", format!("b = {} outside (1/4, 2/3)", self.kernel.b)));
        }
        if let Err(e) = self.kernel.validate() {
            return Err(ValidationError::new("kernel.c", e.to_string()));
        }
        if self.reps < MIN_REPS {
            return Err(ValidationError::new("R", format!("R = {} below {MIN_REPS}", self.reps)));
        }
        if self.limit_grid_n < 10 {
            return Err(ValidationError::new("limit_grid_N", "must be at least 10"));
        }
        if self.t_grid.is_empty() {
            return Err(ValidationError::new("T_grid", "must not be empty"));
        }
        if let Some(i) = (1..self.t_grid.len()).find(|&i| self.t_grid[i] <= self.t_grid[i - 1]) {
            return Err(ValidationError::new(format!("T_grid[{i}]"), "T_grid must be strictly increasing"));
        }
        if matches!(self.kind, ExperimentKind::Rate | ExperimentKind::Matched) && self.t_grid.len() < 2 {
            return Err(ValidationError::new("T_grid", "rate and matched experiments need at least two values"));
        }
        if self.estimators.is_empty() {
            return Err(ValidationError::new("estimators", "must not be empty"));
        }
        if let Some(i) = (1..self.estimators.len()).find(|&i| self.estimators[..i].contains(&self.estimators[i])) {
            return Err(ValidationError::new(format!("estimators[{i}]"), "duplicate estimator"));
        }
        if self.kind == ExperimentKind::Matched && !(self.estimators.contains(&Method::Ols) && self.estimators.contains(&Method::Rrr)) {
            return Err(ValidationError::new("estimators", "matched comparison needs OLS and RRR"));
        }
        let spec = self.spec.build().map_err(|e| e.nested("spec"))?;
        let canon = canonical_form(&spec).map_err(|e| ValidationError::new("spec", e.to_string()))?;
        let n = self.n.unwrap_or(spec.n);
        if n == 0 || n > spec.s.min(spec.m_r) {
            return Err(ValidationError::new("n", format!("rank {n} outside 1..={}", spec.s.min(spec.m_r))));
        }
        let min_t = spec.m_r + spec.m_u + 3;
        if let Some(i) = self.t_grid.iter().position(|&t| t < min_t) {
            return Err(ValidationError::new(format!("T_grid[{i}]"), format!("sample length must be at least {min_t}")));
        }
        let sim = Simulator::new(&spec).map_err(|e| ValidationError::new("spec", e.to_string()))?;
        Ok(Setup { t_zr_inv: canon.t_zr_inv(), t_zu_inv: canon.t_zu_inv(), cfg: self.clone(), spec, canon, sim, n })
    }
}

/// Canonical column blocks of the coefficient error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    ZrNonstationary,
    ZrStationary,
    ZuNonstationary,
    ZuStationary,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::ZrNonstationary, Block::ZrStationary, Block::ZuNonstationary, Block::ZuStationary];

    pub fn label(self) -> &'static str {
        match self {
            Block::ZrNonstationary => "zr_nonstationary_cols",
            Block::ZrStationary => "zr_stationary_cols",
            Block::ZuNonstationary => "zu_nonstationary_cols",
            Block::ZuStationary => "zu_stationary_cols",
        }
    }

    pub fn is_nonstationary(self) -> bool {
        matches!(self, Block::ZrNonstationary | Block::ZuNonstationary)
    }

    /// Column range inside the `z^r` or `z^u` error.
    fn columns(self, spec: &DgpSpec<f64>) -> (usize, usize) {
        match self {
            Block::ZrNonstationary => (0, spec.c_r),
            Block::ZrStationary => (spec.c_r, spec.m_r - spec.c_r),
            Block::ZuNonstationary => (0, spec.c_u),
            Block::ZuStationary => (spec.c_u, spec.m_u - spec.c_u),
        }
    }

    /// Multiplier turning an unscaled error into its `D_z^{-1}`-scaled version.
    fn scale(self, t: usize) -> f64 {
        if self.is_nonstationary() {
            t as f64
        } else {
            (t as f64).sqrt()
        }
    }
}

/// `T_y(β̂ - b)T_z^{-1}`, split into the `z^r` and `z^u` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalError {
    pub r: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

impl CanonicalError {
    pub fn block(&self, block: Block, spec: &DgpSpec<f64>) -> DMatrix<f64> {
        let (start, len) = block.columns(spec);
        match block {
            Block::ZrNonstationary | Block::ZrStationary => self.r.columns(start, len).into_owned(),
            Block::ZuNonstationary | Block::ZuStationary => self.u.columns(start, len).into_owned(),
        }
    }
}

impl Setup {
    pub fn canonical_error(&self, est: &Estimate<f64>) -> CanonicalError {
        CanonicalError {
            r: &self.canon.t_y * (&est.beta_r - &self.spec.b_r) * &self.t_zr_inv,
            u: &self.canon.t_y * (&est.beta_u - &self.spec.b_u) * &self.t_zu_inv,
        }
    }

    pub fn simulate(&self, t: usize, r: usize) -> Result<Sample<f64>, DgpError> {
        self.sim.run(t, self.cfg.seed ^ r as u64)
    }

    pub fn regression_sample(&self, sample: &Sample<f64>) -> Result<RegressionSample<f64>, EstimatorError> {
        RegressionSample::new(sample.y.clone(), sample.z_r.clone(), sample.z_u.clone(), self.cfg.preprocessing)
    }

    pub fn estimate(&self, method: Method, rs: &RegressionSample<f64>) -> Result<Estimate<f64>, EstimatorError> {
        estimate(method, rs, self.n, &self.cfg.kernel)
    }

    fn blocks(&self) -> Vec<Block> {
        Block::ALL.into_iter().filter(|b| b.columns(&self.spec).1 > 0).collect()
    }

    fn limit_config(&self, z_cov: ZCovariance) -> LimitConfig {
        LimitConfig {
            grid: self.cfg.limit_grid_n,
            draws: self.cfg.reps,
            seed: self.cfg.seed ^ LIMIT_STREAM,
            preprocessing: self.cfg.preprocessing,
            xi_sign: Default::default(),
            z_cov,
        }
    }
}

pub fn estimate(method: Method, rs: &RegressionSample<f64>, n: usize, kernel: &KernelConfig) -> Result<Estimate<f64>, EstimatorError> {
    match method {
        Method::Ols => ols(rs),
        Method::Rrr => rrr(rs, n),
        Method::FmOls => fm_ols(rs, kernel),
        Method::FmRrr => fm_rrr(rs, n, kernel),
    }
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    best
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Least-squares slope and its standard error; `None` unless every point is
/// finite and there are at least two distinct abscissae.
pub fn fit_slope(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|v| !v.is_finite()) {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let se = if x.len() > 2 {
        let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Some((slope, se))
}

/// One line of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub experiment_id: String,
    pub estimator: String,
    pub t: Option<usize>,
    pub block: String,
    pub statistic: String,
    pub value: f64,
    pub reps: usize,
    pub failures: usize,
}

pub const CSV_HEADER: &str = "experiment_id,estimator,T,block,statistic,value,reps,failures";

impl ResultRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.experiment_id,
            self.estimator,
            self.t.map(|t| t.to_string()).unwrap_or_default(),
            self.block,
            self.statistic,
            self.value,
            self.reps,
            self.failures
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub estimator: String,
    pub t: usize,
    pub block: Block,
    pub median_norm: f64,
    /// Median norm of the `D_z^{-1}`-scaled error (`T·err` or `√T·err`).
    pub median_scaled_norm: f64,
    pub reps: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeReport {
    pub estimator: String,
    pub block: Block,
    /// `nonstationary` or `stationary`.
    pub label: &'static str,
    /// Error columns are grouped by canonical regressor direction.
    pub direction: &'static str,
    pub slope: Option<f64>,
    pub std_err: Option<f64>,
    /// `(log T, log median norm)`.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityReport {
    pub check: String,
    pub max_residual: Option<f64>,
    pub threshold: f64,
    pub skipped: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioReport {
    pub statistic: String,
    pub t_grid: Vec<usize>,
    pub medians: Vec<f64>,
    /// `median(T_{i+1}) / median(T_i)`.
    pub ratios: Vec<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KsReport {
    pub comparison: String,
    pub estimator: String,
    pub t: usize,
    pub block: Block,
    /// Largest coordinate-wise distance; `None` when every coordinate is degenerate.
    pub max_ks: Option<f64>,
    pub per_coordinate: Vec<f64>,
    pub skipped_coordinates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovReport {
    pub estimator: String,
    pub t: usize,
    pub relative_frobenius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McResult {
    pub experiment_id: String,
    pub kind: ExperimentKind,
    pub cells: Vec<CellSummary>,
    pub slopes: Vec<SlopeReport>,
    pub identities: Vec<IdentityReport>,
    pub ratios: Vec<RatioReport>,
    pub ks: Vec<KsReport>,
    pub covariance: Vec<CovReport>,
    /// Identity checks above their thresholds; any entry is a hard failure.
    pub violations: Vec<String>,
    /// Statistics that are undefined for this configuration.
    pub flags: Vec<String>,
    pub resamples: usize,
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub rows: Vec<ResultRow>,
}

impl McResult {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            experiment_id: cfg.id.clone(),
            kind: cfg.kind,
            cells: Vec::new(),
            slopes: Vec::new(),
            identities: Vec::new(),
            ratios: Vec::new(),
            ks: Vec::new(),
            covariance: Vec::new(),
            violations: Vec::new(),
            flags: Vec::new(),
            resamples: 0,
            wall_clock_secs: 0.0,
            rows: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn row(&mut self, estimator: &str, t: Option<usize>, block: &str, statistic: &str, value: f64, reps: usize, failures: usize) {
        self.rows.push(ResultRow {
            experiment_id: self.experiment_id.clone(),
            estimator: estimator.to_string(),
            t,
            block: block.to_string(),
            statistic: statistic.to_string(),
            value,
            reps,
            failures,
        });
    }

    pub fn csv_lines(&self) -> Vec<String> {
        self.rows.iter().map(ResultRow::to_csv).collect()
    }

    /// `(file name, contents)` of two-column `log T  log median-norm` files.
    pub fn plot_data(&self) -> Vec<(String, String)> {
        self.slopes
            .iter()
            .map(|s| {
                let mut body = String::from("# log_T log_median_norm\n");
                for (x, y) in &s.points {
                    body.push_str(&format!("{x} {y}\n"));
                }
                (format!("{}_{}_{}.dat", self.experiment_id, s.estimator, s.block.label()), body)
            })
            .collect()
    }
}

pub fn results_csv(results: &[McResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        for line in r.csv_lines() {
            out.push_str(&line);
            out.push('\n');
        }
    }
    out
}

/// One replication: the sample and every requested estimate.
struct Replication<X = ()> {
    estimates: Vec<Result<Estimate<f64>, EstimatorError>>,
    /// Per-sample statistic computed before the sample is dropped.
    extra: X,
}

fn replicate(setup: &Setup, t: usize, methods: &[Method]) -> Result<Vec<Replication>, McError> {
    replicate_with(setup, t, methods, |_, _| Ok(()))
}

fn replicate_with<X, F>(setup: &Setup, t: usize, methods: &[Method], post: F) -> Result<Vec<Replication<X>>, McError>
where
    X: Send,
    F: Fn(&Sample<f64>, &[Result<Estimate<f64>, EstimatorError>]) -> Result<X, McError> + Sync,
{
    (0..setup.cfg.reps)
        .into_par_iter()
        .map(|r| {
            let sample = setup.simulate(t, r)?;
            let estimates: Vec<_> = match setup.regression_sample(&sample) {
                Ok(rs) => methods.iter().map(|&m| setup.estimate(m, &rs)).collect(),
                Err(e) => methods.iter().map(|_| Err(e.clone())).collect(),
            };
            let extra = post(&sample, &estimates)?;
            Ok(Replication { estimates, extra })
        })
        .collect()
}

/// Successful estimates of method slot `k`, or a budget error.
fn successes<X>(reps: &[Replication<X>], k: usize, method: Method, t: usize) -> Result<(Vec<&Estimate<f64>>, usize), McError> {
    let ok: Vec<&Estimate<f64>> = reps.iter().filter_map(|r| r.estimates[k].as_ref().ok()).collect();
    let failures = reps.len() - ok.len();
    if failures as f64 >= FAILURE_BUDGET * reps.len() as f64 && failures > 0 {
        let first = reps.iter().find_map(|r| r.estimates[k].as_ref().err()).map(|e| e.to_string()).unwrap_or_default();
        return Err(McError::FailureBudget { estimator: method.label(), t, failures, reps: reps.len(), first });
    }
    Ok((ok, failures))
}

/// Median canonical-error norms per block over `T_grid` and log-log slopes.
pub fn run_rate_experiment(cfg: &ExperimentConfig) -> Result<McResult, McError> {
    let start = Instant::now();
    let setup = cfg.validate()?;
    let mut res = McResult::new(cfg);
    let blocks = setup.blocks();
    let methods = &cfg.estimators;
    let mut medians = vec![vec![Vec::new(); blocks.len()]; methods.len()];
    for &t in &cfg.t_grid {
        let reps = replicate(&setup, t, methods)?;
        for (k, &m) in methods.iter().enumerate() {
            let (ok, failures) = successes(&reps, k, m, t)?;
            let errs: Vec<CanonicalError> = ok.iter().map(|e| setup.canonical_error(e)).collect();
            for (bi, &b) in blocks.iter().enumerate() {
                let norms: Vec<f64> = errs.iter().map(|e| e.block(b, &setup.spec).norm()).collect();
                let med = median(&norms);
                let scaled = med * b.scale(t);
                medians[k][bi].push(med);
                res.row(m.label(), Some(t), b.label(), "median_norm", med, cfg.reps, failures);
                res.row(m.label(), Some(t), b.label(), "median_scaled_norm", scaled, cfg.reps, failures);
                res.cells.push(CellSummary {
                    estimator: m.label().into(),
                    t,
                    block: b,
                    median_norm: med,
                    median_scaled_norm: scaled,
                    reps: cfg.reps,
                    failures,
                });
            }
        }
    }
    let log_t: Vec<f64> = cfg.t_grid.iter().map(|&t| (t as f64).ln()).collect();
    for (k, &m) in methods.iter().enumerate() {
        for (bi, &b) in blocks.iter().enumerate() {
            let log_med: Vec<f64> = medians[k][bi].iter().map(|v| v.ln()).collect();
            let fit = fit_slope(&log_t, &log_med);
            match fit {
                Some((slope, se)) => {
                    res.row(m.label(), None, b.label(), "slope", slope, cfg.reps, 0);
                    res.row(m.label(), None, b.label(), "slope_se", se, cfg.reps, 0);
                }
                None => res.flags.push(format!("{} {}: slope undefined (zero or non-finite medians)", m.label(), b.label())),
            }
            res.slopes.push(SlopeReport {
                estimator: m.label().into(),
                block: b,
                label: if b.is_nonstationary() { "nonstationary" } else { "stationary" },
                direction: "column",
                slope: fit.map(|f| f.0),
                std_err: fit.map(|f| f.1),
                points: log_t.iter().copied().zip(log_med.iter().copied()).collect(),
            });
        }
    }
    res.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(res)
}

/// Residuals of the exact identities in one replication.
#[derive(Debug, Clone, Default)]
struct IdentityResiduals {
    beta_u: Option<f64>,
    routes: f64,
    factor: f64,
    full_rank: f64,
    fm_beta_u: Option<f64>,
    fm_full_rank: Option<f64>,
}

fn beta_u_identity(setup: &Setup, sample: &Sample<f64>, est: &Estimate<f64>) -> Result<f64, EstimatorError> {
    let prep = setup.cfg.preprocessing;
    let z_r = detrend(&sample.z_r, prep)?;
    let z_u = detrend(&sample.z_u, prep)?;
    let noise = detrend(&sample.eps.transform(&setup.spec.lambda), prep)?;
    let guu_inv = crate::linalg::inverse(&sample_moment(&z_u, &z_u)?)?;
    let implied = &setup.spec.b_u + (sample_moment(&noise, &z_u)? + (&setup.spec.b_r - &est.beta_r) * sample_moment(&z_r, &z_u)?) * guu_inv;
    Ok(max_abs(&(&est.beta_u - implied)))
}

fn identity_residuals(setup: &Setup, sample: &Sample<f64>, with_fm: bool) -> Result<IdentityResiduals, EstimatorError> {
    let rs = setup.regression_sample(sample)?;
    let n = setup.n;
    let ols_est = ols(&rs)?;
    let rrr_est = rrr(&rs, n)?;
    let full = setup.spec.s.min(setup.spec.m_r);
    let diff = |a: &Estimate<f64>, b: &Estimate<f64>| max_abs(&(a.beta() - b.beta()));
    let mut out = IdentityResiduals {
        routes: diff(&rrr_est, &rrr_geneig(&rs, n)?),
        factor: diff(&rrr_est, &rrr_with_factor(&rs, n, GramFactor::Triangular)?),
        full_rank: diff(&rrr(&rs, full)?, &ols_est),
        ..Default::default()
    };
    if setup.spec.m_u > 0 {
        out.beta_u = Some(beta_u_identity(setup, sample, &ols_est)?.max(beta_u_identity(setup, sample, &rrr_est)?));
    }
    if with_fm {
        let kernel = &setup.cfg.kernel;
        let fo = fm_ols(&rs, kernel)?;
        let fr = fm_rrr(&rs, n, kernel)?;
        out.fm_full_rank = Some(diff(&fm_rrr(&rs, full, kernel)?, &fo));
        if setup.spec.m_u > 0 {
            let z_r = detrend(&sample.z_r, setup.cfg.preprocessing)?;
            let z_u = detrend(&sample.z_u, setup.cfg.preprocessing)?;
            let link = sample_moment(&z_r, &z_u)? * crate::linalg::inverse(&sample_moment(&z_u, &z_u)?)?;
            let implied = &fo.beta_u + (&fo.beta_r - &fr.beta_r) * link;
            out.fm_beta_u = Some(max_abs(&(&fr.beta_u - implied)));
        }
    }
    Ok(out)
}

/// Exact finite-sample identities on every replication of every `T`.
pub fn run_identity_checks(cfg: &ExperimentConfig) -> Result<McResult, McError> {
    let start = Instant::now();
    let setup = cfg.validate()?;
    let mut res = McResult::new(cfg);
    let with_fm = cfg.estimators.iter().any(|m| matches!(m, Method::FmOls | Method::FmRrr));
    let mut all = Vec::new();
    let mut failures = 0;
    let mut first_err = None;
    for &t in &cfg.t_grid {
        let per_rep: Vec<Result<IdentityResiduals, EstimatorError>> = (0..cfg.reps)
            .into_par_iter()
            .map(|r| {
                let sample = setup.simulate(t, r).map_err(EstimatorError::from)?;
                identity_residuals(&setup, &sample, with_fm)
            })
            .collect();
        for r in per_rep {
            match r {
                Ok(v) => all.push(v),
                Err(e) => {
                    failures += 1;
                    first_err.get_or_insert(e);
                }
            }
        }
    }
    let total = cfg.reps * cfg.t_grid.len();
    if failures as f64 >= FAILURE_BUDGET * total as f64 && failures > 0 {
        return Err(McError::FailureBudget {
            estimator: "identity",
            t: *cfg.t_grid.last().unwrap(),
            failures,
            reps: total,
            first: first_err.map(|e| e.to_string()).unwrap_or_default(),
        });
    }
    let fold = |f: &dyn Fn(&IdentityResiduals) -> Option<f64>| -> Option<f64> { all.iter().filter_map(f).reduce(f64::max) };
    let checks: Vec<(&str, Option<f64>, f64, bool)> = vec![
        ("beta_u_identity", fold(&|r| r.beta_u), TOL_BETA_U, setup.spec.m_u == 0),
        ("rrr_svd_vs_geneig", fold(&|r| Some(r.routes)), TOL_ROUTES, false),
        ("factor_invariance", fold(&|r| Some(r.factor)), TOL_FACTOR, false),
        ("full_rank_rrr_equals_ols", fold(&|r| Some(r.full_rank)), TOL_FULL_RANK, false),
        ("fm_beta_u_identity", fold(&|r| r.fm_beta_u), TOL_BETA_U, !with_fm || setup.spec.m_u == 0),
        ("full_rank_fm_rrr_equals_fm_ols", fold(&|r| r.fm_full_rank), TOL_FULL_RANK, !with_fm),
    ];
    for (name, value, tol, skipped) in checks {
        let passed = skipped || value.is_some_and(|v| v <= tol);
        if skipped {
            res.flags.push(format!("{name}: skipped"));
        } else {
            res.row("all", None, "identity", name, value.unwrap_or(f64::NAN), total, failures);
            if !passed {
                res.violations.push(format!("{name}: max residual {:e} above {tol:e}", value.unwrap_or(f64::NAN)));
            }
        }
        res.identities.push(IdentityReport {
            check: name.into(),
            max_residual: if skipped { None } else { value },
            threshold: tol,
            skipped,
            passed,
        });
    }
    res.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(res)
}

/// Canonical stationary regressors `z̃₃^π` of a sample after preprocessing.
fn z3_projected(setup: &Setup, sample: &Sample<f64>) -> Result<SeriesMatrix<f64>, EstimatorError> {
    let spec = &setup.spec;
    let prep = setup.cfg.preprocessing;
    let zr = detrend(&sample.z_r.transform(&setup.canon.t_zr), prep)?;
    let zu = detrend(&sample.z_u.transform(&setup.canon.t_zu), prep)?;
    project_out(&zr.rows(spec.c_r, spec.m_r - spec.c_r), &zu)
}

/// Matched statistics `(A_T, B_T)` from one replication; `None` for empty blocks.
fn matched_stats(
    setup: &Setup,
    sample: &Sample<f64>,
    ols_est: &Estimate<f64>,
    rrr_est: &Estimate<f64>,
    o2_dagger: &DMatrix<f64>,
    t: usize,
) -> Result<(Option<f64>, Option<f64>), EstimatorError> {
    let spec = &setup.spec;
    let (c_y, c_r) = (setup.canon.c_y, spec.c_r);
    let m3 = spec.m_r - c_r;
    if m3 == 0 || spec.s == c_y {
        return Ok((None, None));
    }
    let diff = &setup.canon.t_y * (&rrr_est.beta_r - &ols_est.beta_r) * &setup.t_zr_inv;
    let lower = diff.view((c_y, c_r), (spec.s - c_y, m3)).into_owned() * (t as f64).sqrt();
    let a = (o2_dagger.nrows() > 0).then(|| (o2_dagger * &lower).norm());
    let b = if setup.canon.gamma32.ncols() > 0 {
        let z3 = z3_projected(setup, sample)?;
        Some((&lower * sample_moment(&z3, &z3)? * &setup.canon.gamma32).norm())
    } else {
        None
    };
    Ok((a, b))
}

/// Coordinate-wise KS between two equally shaped sets of matrices, skipping
/// coordinates where the limit draws `support` are degenerate.
fn ks_block(emp: &[DMatrix<f64>], reference: &[DMatrix<f64>], support: &[DMatrix<f64>]) -> (Option<f64>, Vec<f64>, usize) {
    let (Some(first), false) = (support.first(), reference.is_empty()) else {
        return (None, Vec::new(), 0);
    };
    let (rows, cols) = first.shape();
    let scale = support.iter().map(max_abs).fold(0.0, f64::max);
    let mut per = Vec::new();
    let mut skipped = 0;
    for i in 0..rows {
        for j in 0..cols {
            let lim = support.iter().map(|m| m[(i, j)]);
            let lo = lim.clone().fold(f64::INFINITY, f64::min);
            let hi = lim.fold(f64::NEG_INFINITY, f64::max);
            if !(hi - lo > DEGENERATE_SHARE * scale) {
                skipped += 1;
                continue;
            }
            let e: Vec<f64> = emp.iter().map(|m| m[(i, j)]).collect();
            let refs: Vec<f64> = reference.iter().map(|m| m[(i, j)]).collect();
            per.push(ks_distance(&e, &refs));
        }
    }
    let max = per.iter().copied().reduce(f64::max);
    (max, per, skipped)
}

#[allow(clippy::too_many_arguments)]
fn push_ks(
    res: &mut McResult,
    comparison: &str,
    estimator: &str,
    t: usize,
    block: Block,
    ks: (Option<f64>, Vec<f64>, usize),
    reps: usize,
    failures: usize,
) {
    let (max_ks, per, skipped) = ks;
    match max_ks {
        Some(v) => res.row(estimator, Some(t), block.label(), &format!("ks_max_{comparison}"), v, reps, failures),
        None => res.flags.push(format!("{estimator} {comparison} T={t}: KS undefined (degenerate draws)")),
    }
    res.ks.push(KsReport {
        comparison: comparison.into(),
        estimator: estimator.into(),
        t,
        block,
        max_ks,
        per_coordinate: per,
        skipped_coordinates: skipped,
    });
}

/// `T·err` in the nonstationary `z^r` columns.
fn scaled_nonstationary(setup: &Setup, est: &Estimate<f64>, t: usize) -> DMatrix<f64> {
    setup.canonical_error(est).block(Block::ZrNonstationary, &setup.spec) * t as f64
}

/// Median norms of the projected RRR–OLS differences along `T_grid`, and for
/// FM estimators a KS comparison with RRR in the nonstationary columns.
pub fn run_matched_comparison(cfg: &ExperimentConfig) -> Result<McResult, McError> {
    let start = Instant::now();
    let setup = cfg.validate()?;
    let mut res = McResult::new(cfg);
    let proj = correction_projectors(&setup.spec, &setup.canon)?;
    let methods = &cfg.estimators;
    let k_ols = methods.iter().position(|&m| m == Method::Ols).unwrap();
    let k_rrr = methods.iter().position(|&m| m == Method::Rrr).unwrap();
    let fm: Vec<(usize, Method)> =
        methods.iter().enumerate().filter(|(_, m)| matches!(m, Method::FmOls | Method::FmRrr)).map(|(k, &m)| (k, m)).collect();
    let limit = if !fm.is_empty() && setup.spec.c_r > 0 {
        let ls = limit_sampler(&setup.spec, &setup.canon, &setup.limit_config(ZCovariance::ClosedForm))?;
        res.resamples += ls.resamples;
        Some(ls)
    } else {
        None
    };
    let mut med_a = Vec::new();
    let mut med_b = Vec::new();
    for &t in &cfg.t_grid {
        let reps = replicate_with(&setup, t, methods, |sample, est| match (&est[k_ols], &est[k_rrr]) {
            (Ok(o), Ok(q)) => Ok(Some(matched_stats(&setup, sample, o, q, &proj.o2_dagger, t)?)),
            _ => Ok(None),
        })?;
        let pairs: Vec<(&Replication<_>, &Estimate<f64>, &Estimate<f64>)> =
            reps.iter().filter_map(|r| Some((r, r.estimates[k_ols].as_ref().ok()?, r.estimates[k_rrr].as_ref().ok()?))).collect();
        let failures = reps.len() - pairs.len();
        successes(&reps, k_ols, Method::Ols, t)?;
        successes(&reps, k_rrr, Method::Rrr, t)?;
        let stats: Vec<(Option<f64>, Option<f64>)> = pairs.iter().filter_map(|(r, _, _)| r.extra).collect();
        let a: Vec<f64> = stats.iter().filter_map(|s| s.0).collect();
        let b: Vec<f64> = stats.iter().filter_map(|s| s.1).collect();
        for (name, vals, store) in [("A_T", a, &mut med_a), ("B_T", b, &mut med_b)] {
            if !vals.is_empty() {
                let m = median(&vals);
                store.push(m);
                res.row("RRR-OLS", Some(t), name, "median_norm", m, cfg.reps, failures);
            }
        }

        if let Some(ls) = &limit {
            let rrr_scaled: Vec<DMatrix<f64>> = pairs.iter().map(|(_, _, q)| scaled_nonstationary(&setup, q, t)).collect();
            let rrr_limit: Vec<DMatrix<f64>> = ls.draws.iter().map(|d| d.rrr_nonstationary()).collect();
            push_ks(&mut res, "limit", "RRR", t, Block::ZrNonstationary, ks_block(&rrr_scaled, &rrr_limit, &rrr_limit), cfg.reps, failures);
            for &(k, m) in &fm {
                let (ok, fails) = successes(&reps, k, m, t)?;
                let scaled: Vec<DMatrix<f64>> = ok.iter().map(|e| scaled_nonstationary(&setup, e, t)).collect();
                push_ks(
                    &mut res,
                    "vs_RRR",
                    m.label(),
                    t,
                    Block::ZrNonstationary,
                    ks_block(&scaled, &rrr_scaled, &rrr_limit),
                    cfg.reps,
                    fails,
                );
                let lim: Vec<DMatrix<f64>> = ls
                    .draws
                    .iter()
                    .map(|d| match m {
                        Method::FmRrr => &d.m_r_plus + &d.correction_plus,
                        _ => d.m_r_plus.clone(),
                    })
                    .collect();
                push_ks(&mut res, "limit", m.label(), t, Block::ZrNonstationary, ks_block(&scaled, &lim, &lim), cfg.reps, fails);
            }
        }
    }
    for (name, meds) in [("A_T", med_a), ("B_T", med_b)] {
        if meds.len() != cfg.t_grid.len() {
            res.flags.push(format!("{name}: empty block for this spec"));
            continue;
        }
        if meds.iter().all(|&m| m == 0.0) {
            res.flags.push(format!("{name}: identically zero"));
        }
        let mut ratios = Vec::new();
        let mut passed = true;
        for i in 1..meds.len() {
            let ratio = meds[i] / meds[i - 1];
            let doublings = (cfg.t_grid[i] as f64 / cfg.t_grid[i - 1] as f64).log2();
            passed &= ratio <= RATIO_PER_DOUBLING.powf(doublings);
            res.row("RRR-OLS", Some(cfg.t_grid[i]), name, "ratio", ratio, cfg.reps, 0);
            ratios.push(ratio);
        }
        res.ratios.push(RatioReport { statistic: name.into(), t_grid: cfg.t_grid.clone(), medians: meds, ratios, passed });
    }
    res.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(res)
}

/// `(E z z')^{-1} ⊗ ΛΣΛ'` for an all-stationary spec, in raw coordinates.
pub fn stationary_kronecker_target(spec: &DgpSpec<f64>) -> Result<DMatrix<f64>, McError> {
    let gamma0 = spec.nu_moments()?.gamma0;
    let d = spec.m_r + spec.m_u;
    let mut h = DMatrix::zeros(d, d);
    h.view_mut((0, 0), (spec.m_r, spec.m_r)).copy_from(&spec.h_r);
    h.view_mut((spec.m_r, spec.m_r), (spec.m_u, spec.m_u)).copy_from(&spec.h_u);
    let ezz = &h * gamma0 * h.transpose();
    let inv = crate::linalg::inverse(&ezz).map_err(|_| AsymptoticsError::SingularMoment("E z z'"))?;
    Ok(inv.kronecker(&(&spec.lambda * &spec.sigma * spec.lambda.transpose())))
}

fn empirical_cov(vs: &[DVector<f64>]) -> DMatrix<f64> {
    let dim = vs[0].len();
    let n = vs.len() as f64;
    let mean = vs.iter().fold(DVector::zeros(dim), |acc, v| acc + v) / n;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in vs {
        let d = v - &mean;
        cov += &d * d.transpose();
    }
    cov / (n - 1.0)
}

/// Limit matrix matching `block` of `method`'s scaled error, when known.
fn limit_block(ls: &LimitSample<f64>, method: Method, block: Block) -> Option<Vec<DMatrix<f64>>> {
    let p = &ls.projectors;
    let pick = |f: &dyn Fn(&crate::asymptotics::LimitDraw<f64>) -> DMatrix<f64>| Some(ls.draws.iter().map(f).collect());
    match (method, block) {
        (Method::Ols, Block::ZrNonstationary) => pick(&|d| d.m_r.clone()),
        (Method::Ols, Block::ZrStationary) => pick(&|d| d.z_r.clone()),
        (Method::Ols, Block::ZuNonstationary) => pick(&|d| &d.m_u - &d.m_r * &d.n_r),
        (Method::Ols, Block::ZuStationary) => pick(&|d| &d.z_u - &d.z_r * &p.ez3_zu),
        (Method::Rrr, Block::ZrNonstationary) => pick(&|d| d.rrr_nonstationary()),
        (Method::FmOls, Block::ZrNonstationary) => pick(&|d| d.m_r_plus.clone()),
        (Method::FmRrr, Block::ZrNonstationary) => pick(&|d| &d.m_r_plus + &d.correction_plus),
        _ => None,
    }
}

/// Stationary specs: empirical covariance of `vec √T(β̂ - b)` against the
/// Kronecker formula. Integrated specs: coordinate-wise KS between scaled
/// canonical errors and limit draws, per block.
pub fn run_dist_experiment(cfg: &ExperimentConfig) -> Result<McResult, McError> {
    let start = Instant::now();
    let setup = cfg.validate()?;
    let mut res = McResult::new(cfg);
    let spec = &setup.spec;
    let methods = &cfg.estimators;
    let stationary = spec.c_r == 0 && spec.c_u == 0;
    let target = if stationary { Some(stationary_kronecker_target(spec)?) } else { None };
    let limit = if stationary {
        None
    } else {
        let ls = limit_sampler(spec, &setup.canon, &setup.limit_config(ZCovariance::Auto))?;
        res.resamples += ls.resamples;
        Some(ls)
    };
    for &t in &cfg.t_grid {
        let reps = replicate(&setup, t, methods)?;
        for (k, &m) in methods.iter().enumerate() {
            let (ok, failures) = successes(&reps, k, m, t)?;
            if let Some(target) = &target {
                let b = spec.b_r.columns(0, spec.m_r).into_owned();
                let truth =
                    DMatrix::from_fn(
                        spec.s,
                        spec.m_r + spec.m_u,
                        |i, j| {
                            if j < spec.m_r {
                                b[(i, j)]
                            } else {
                                spec.b_u[(i, j - spec.m_r)]
                            }
                        },
                    );
                let vs: Vec<DVector<f64>> =
                    ok.iter().map(|e| DVector::from_column_slice((&(e.beta() - &truth) * (t as f64).sqrt()).as_slice())).collect();
                let rel = (empirical_cov(&vs) - target).norm() / target.norm();
                res.row(m.label(), Some(t), "all", "cov_rel_frobenius", rel, cfg.reps, failures);
                res.covariance.push(CovReport { estimator: m.label().into(), t, relative_frobenius: rel });
            }
            if let Some(ls) = &limit {
                let errs: Vec<CanonicalError> = ok.iter().map(|e| setup.canonical_error(e)).collect();
                for b in setup.blocks() {
                    let Some(lim) = limit_block(ls, m, b) else {
                        continue;
                    };
                    let emp: Vec<DMatrix<f64>> = errs.iter().map(|e| e.block(b, spec) * b.scale(t)).collect();
                    push_ks(&mut res, "limit", m.label(), t, b, ks_block(&emp, &lim, &lim), cfg.reps, failures);
                }
            }
        }
    }
    res.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(res)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<McResult, McError> {
    match cfg.kind {
        ExperimentKind::Rate => run_rate_experiment(cfg),
        ExperimentKind::Identity => run_identity_checks(cfg),
        ExperimentKind::Matched => run_matched_comparison(cfg),
        ExperimentKind::Dist => run_dist_experiment(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::ks_brute;

    fn walk() -> ExplicitSpec {
        ExplicitSpec {
            s: 1,
            m_r: 1,
            m_u: 0,
            k: 1,
            c_r: 1,
            c_u: 0,
            n: 1,
            lambda: vec![vec![1.0]],
            sigma: vec![vec![1.0]],
            b_r: vec![vec![0.5]],
            b_u: vec![],
            h_r: vec![vec![1.0]],
            h_u: vec![],
            ar_coeffs: vec![],
            ma_coeffs: vec![vec![vec![1.0]]],
            noise: NoiseKind::Gaussian,
            burn_in: 0,
        }
    }

    fn config(kind: ExperimentKind, spec: SpecConfig, estimators: Vec<Method>, t_grid: Vec<usize>, reps: usize) -> ExperimentConfig {
        ExperimentConfig {
            id: "test".into(),
            kind,
            spec,
            estimators,
            n: None,
            t_grid,
            reps,
            seed: 11,
            kernel: KernelConfig::default(),
            preprocessing: Preprocessing::None,
            limit_grid_n: 500,
        }
    }

    fn stationary() -> SpecConfig {
        SpecConfig::Stationary { s: 3, m_r: 3, m_u: 1, n: 1, seed: 2 }
    }

    fn cy_positive() -> SpecConfig {
        SpecConfig::CyPositive { s: 3, m_r: 3, m_u: 1, c_r: 2, c_u: 0, n: 2, c_y: 1, seed: 1 }
    }

    #[test]
    fn ks_distance_matches_brute_force() {
        let a: Vec<f64> = (0..57).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let b: Vec<f64> = (0..43).map(|i| ((i * 53) % 89) as f64 / 6.0).collect();
        assert!((ks_distance(&a, &b) - ks_brute(&a, &b)).abs() < 1e-15);
        assert_eq!(ks_distance(&a, &a), 0.0);
        assert_eq!(ks_distance(&[0.0, 1.0], &[2.0, 3.0]), 1.0);
        // ties across samples
        assert!((ks_distance(&[1.0, 1.0, 2.0], &[1.0, 2.0, 2.0]) - ks_brute(&[1.0, 1.0, 2.0], &[1.0, 2.0, 2.0])).abs() < 1e-15);
    }

    #[test]
    fn slope_and_median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let x: Vec<f64> = [200.0f64, 400.0, 800.0].iter().map(|t| t.ln()).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 0.5 * v).collect();
        let (s, se) = fit_slope(&x, &y).unwrap();
        assert!((s + 0.5).abs() < 1e-12 && se < 1e-12);
        // zero medians, as for a noiseless process, leave the slope undefined
        let zeros: Vec<f64> = [0.0f64; 3].iter().map(|v| v.ln()).collect();
        assert!(fit_slope(&x, &zeros).is_none());
    }

    #[test]
    fn validation_names_key_paths() {
        let mut cfg = config(ExperimentKind::Rate, stationary(), vec![Method::Ols], vec![100, 200], 50);
        cfg.kernel.b = 0.9;
        let err = cfg.validate().err().unwrap();
        assert_eq!(err.path, "kernel.b");
        cfg.kernel.b = 0.3;
        cfg.t_grid = vec![200, 100];
        assert_eq!(cfg.validate().err().unwrap().path, "T_grid[1]");
        cfg.t_grid = vec![100, 200];
        cfg.reps = 10;
        assert_eq!(cfg.validate().err().unwrap().path, "R");
        cfg.reps = 50;
        let mut e = walk();
        e.lambda = vec![vec![1.0, 2.0]];
        cfg.spec = SpecConfig::Explicit(e);
        assert_eq!(cfg.validate().err().unwrap().path, "spec.lambda");
        let mut e = walk();
        e.ma_coeffs = vec![vec![vec![1.0], vec![1.0, 2.0]]];
        cfg.spec = SpecConfig::Explicit(e);
        assert_eq!(cfg.validate().err().unwrap().path, "spec.ma_coeffs[0][1]");
        cfg.spec = stationary();
        cfg.n = Some(4);
        assert_eq!(cfg.validate().err().unwrap().path, "n");
        cfg.n = None;
        cfg.kind = ExperimentKind::Matched;
        assert_eq!(cfg.validate().err().unwrap().path, "estimators");
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = config(ExperimentKind::Dist, SpecConfig::Explicit(walk()), vec![Method::Ols, Method::FmOls], vec![100], 50);
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert!(text.contains("\"T_grid\"") && text.contains("\"limit_grid_N\"") && text.contains("\"FM_OLS\""));
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let spec = cfg.spec.build().unwrap();
        assert_eq!(SpecConfig::Explicit(ExplicitSpec::from(&spec)).build().unwrap(), spec);
        let bad = text.replace("\"seed\"", "\"sede\"");
        assert!(serde_json::from_str::<ExperimentConfig>(&bad).is_err());
    }

    #[test]
    fn identity_checks_pass_on_cy_positive_and_johansen() {
        let mut cfg =
            config(ExperimentKind::Identity, cy_positive(), vec![Method::Ols, Method::Rrr, Method::FmOls, Method::FmRrr], vec![400], 50);
        let res = run_identity_checks(&cfg).unwrap();
        assert!(res.violations.is_empty(), "{:?}", res.identities);
        assert_eq!(res.identities.len(), 6);
        assert!(res.identities.iter().all(|r| !r.skipped));
        cfg.spec = SpecConfig::JohansenVecm {
            alpha: vec![vec![-0.3], vec![0.2], vec![0.0]],
            beta: vec![vec![1.0], vec![-1.0], vec![0.5]],
            lag_coeffs: vec![vec![vec![0.2, 0.0, 0.0], vec![0.0, 0.1, 0.0], vec![0.0, 0.0, 0.1]]],
            sigma: vec![vec![1.0, 0.3, 0.0], vec![0.3, 1.0, 0.2], vec![0.0, 0.2, 1.0]],
        };
        cfg.estimators = vec![Method::Ols, Method::Rrr];
        let res = run_identity_checks(&cfg).unwrap();
        assert!(res.violations.is_empty(), "{:?}", res.identities);
    }

    #[test]
    fn identity_beta_u_is_skipped_without_z_u() {
        let cfg = config(ExperimentKind::Identity, SpecConfig::Explicit(walk()), vec![Method::Ols, Method::Rrr], vec![100], 50);
        let res = run_identity_checks(&cfg).unwrap();
        let bu = res.identities.iter().find(|r| r.check == "beta_u_identity").unwrap();
        assert!(bu.skipped && bu.passed && bu.max_residual.is_none());
        assert!(res.violations.is_empty());
    }

    #[test]
    fn rate_experiment_on_stationary_spec() {
        let cfg = config(ExperimentKind::Rate, stationary(), vec![Method::Ols], vec![200, 800, 3200], 100);
        let res = run_rate_experiment(&cfg).unwrap();
        assert_eq!(res.slopes.len(), 2);
        for s in &res.slopes {
            let slope = s.slope.unwrap();
            assert!((-0.62..=-0.38).contains(&slope), "{} {slope}", s.block.label());
            assert_eq!(s.label, "stationary");
        }
        assert_eq!(res.plot_data().len(), 2);
    }

    #[test]
    fn matched_difference_vanishes_at_full_rank() {
        let mut cfg = config(ExperimentKind::Matched, stationary(), vec![Method::Ols, Method::Rrr], vec![100, 200], 50);
        cfg.n = Some(3);
        let res = run_matched_comparison(&cfg).unwrap();
        for r in &res.ratios {
            assert!(r.medians.iter().all(|&m| m < 1e-9), "{r:?}");
        }
    }

    #[test]
    fn random_walk_ols_matches_limit_sampler() {
        let mut cfg = config(ExperimentKind::Dist, SpecConfig::Explicit(walk()), vec![Method::Ols], vec![1000], 1000);
        cfg.limit_grid_n = 1000;
        let res = run_dist_experiment(&cfg).unwrap();
        let ks = res.ks.iter().find(|k| k.block == Block::ZrNonstationary).unwrap();
        assert!(ks.max_ks.unwrap() < 0.08, "{ks:?}");
    }

    #[test]
    fn results_are_thread_independent() {
        let cfg = config(ExperimentKind::Rate, cy_positive(), vec![Method::Ols, Method::Rrr], vec![100, 200], 50);
        let a = run_rate_experiment(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_rate_experiment(&cfg).unwrap());
        assert_eq!(results_csv(&[a]), results_csv(&[b]));
    }
}
