//! Sample moments, zero-padded lagged covariances and kernel long-run
//! covariance estimates.
//!
//! `Γ̂_{a,b}(j) = T⁻¹ Σ_t a_t b_{t-j}'` with observations outside `1..=T`
//! treated as zero; `Ω̂ = Σ_{|j|<T} w(j/K) Γ̂(j)` and `Δ̂ = Σ_{0≤j<T} w(j/K) Γ̂(j)`.
//! Only lags with `|j| < K` carry nonzero weight, so the sums stop there.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::series::{check_len, SeriesError, SeriesMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovError {
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error("lag {lag} outside ±{max}")]
    LagOutOfRange { lag: i64, max: usize },
    #[error("invalid kernel configuration: {0}")]
    InvalidKernel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `(1 - x²)²` on `[-1, 1]`.
    #[default]
    Quartic,
    /// Classical Parzen window. Its boundary constant `lim w(x)/(1-|x|)²` is 0.
    Parzen,
}

/// Kernel and bandwidth rule `K = round(c · T^b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(default)]
    pub kernel: Kernel,
    #[serde(default = "default_exponent")]
    pub b: f64,
    #[serde(default = "default_scale")]
    pub c: f64,
}

fn default_exponent() -> f64 {
    1.0 / 3.0
}

fn default_scale() -> f64 {
    1.0
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { kernel: Kernel::Quartic, b: default_exponent(), c: default_scale() }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<(), CovError> {
        if !(self.b > 0.25 && self.b < 2.0 / 3.0) {
            return Err(CovError::InvalidKernel(format!("b = {} outside (1/4, 2/3)", self.b)));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(CovError::InvalidKernel(format!("c = {} must be positive", self.c)));
        }
        Ok(())
    }
}

pub fn kernel_weight<T: Real>(x: T, kernel: Kernel) -> T {
    let ax = x.abs();
    if ax >= T::one() {
        return T::zero();
    }
    match kernel {
        Kernel::Quartic => {
            let s = T::one() - ax * ax;
            s * s
        }
        Kernel::Parzen => {
            if ax <= T::lit(0.5) {
                T::one() - T::lit(6.0) * ax * ax + T::lit(6.0) * ax * ax * ax
            } else {
                let s = T::one() - ax;
                T::lit(2.0) * s * s * s
            }
        }
    }
}

/// `K = max(1, round(c T^b))`, clipped to `T - 1`.
pub fn bandwidth(len: usize, cfg: &KernelConfig) -> usize {
    let raw = (cfg.c * (len as f64).powf(cfg.b)).round();
    let k = if raw.is_finite() && raw >= 1.0 { raw as usize } else { 1 };
    k.min(len.saturating_sub(1)).max(1)
}

/// `⟨a, b⟩ = T⁻¹ Σ a_t b_t'`.
pub fn sample_moment<T: Real>(a: &SeriesMatrix<T>, b: &SeriesMatrix<T>) -> Result<DMatrix<T>, CovError> {
    check_len(a, b)?;
    Ok(cross_sum(a.values(), b.values(), 0, 0, a.len()) / T::from_count(a.len()))
}

/// `Σ_{i<count} a_{a0+i} b_{b0+i}'`, accumulated in time order.
fn cross_sum<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, a0: usize, b0: usize, count: usize) -> DMatrix<T> {
    let mut out = DMatrix::zeros(a.nrows(), b.nrows());
    for i in 0..count {
        let ca = a.column(a0 + i);
        let cb = b.column(b0 + i);
        for k in 0..b.nrows() {
            let bk = cb[k];
            for r in 0..a.nrows() {
                out[(r, k)] += ca[r] * bk;
            }
        }
    }
    out
}

/// `Γ̂_{a,b}(j)`; out-of-sample observations count as zero.
pub fn lagged_cov<T: Real>(a: &SeriesMatrix<T>, b: &SeriesMatrix<T>, lag: i64) -> Result<DMatrix<T>, CovError> {
    check_len(a, b)?;
    let len = a.len();
    if lag.unsigned_abs() as usize >= len {
        return Err(CovError::LagOutOfRange { lag, max: len - 1 });
    }
    let j = lag.unsigned_abs() as usize;
    let sum = if lag >= 0 { cross_sum(a.values(), b.values(), j, 0, len - j) } else { cross_sum(a.values(), b.values(), 0, j, len - j) };
    Ok(sum / T::from_count(len))
}

/// Kernel estimates `Ω̂_{a,b}` and `Δ̂_{a,b}` at a given bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct LongRunSet<T: Real> {
    pub omega: DMatrix<T>,
    pub delta: DMatrix<T>,
    pub k_used: usize,
}

pub fn long_run<T: Real>(a: &SeriesMatrix<T>, b: &SeriesMatrix<T>, cfg: &KernelConfig) -> Result<LongRunSet<T>, CovError> {
    long_run_with_bandwidth(a, b, cfg.kernel, bandwidth(a.len(), cfg))
}

pub fn long_run_with_bandwidth<T: Real>(
    a: &SeriesMatrix<T>,
    b: &SeriesMatrix<T>,
    kernel: Kernel,
    k: usize,
) -> Result<LongRunSet<T>, CovError> {
    check_len(a, b)?;
    if k == 0 {
        return Err(CovError::InvalidKernel("bandwidth must be at least 1".into()));
    }
    let len = a.len();
    let max_lag = k.min(len);
    let kk = T::from_count(k);
    let mut omega = DMatrix::zeros(a.dim(), b.dim());
    let mut delta = DMatrix::zeros(a.dim(), b.dim());
    for j in 0..max_lag {
        let w = kernel_weight(T::from_count(j) / kk, kernel);
        if w == T::zero() {
            continue;
        }
        let forward = lagged_cov(a, b, j as i64)? * w;
        delta += &forward;
        omega += forward;
        if j > 0 {
            omega += lagged_cov(a, b, -(j as i64))? * w;
        }
    }
    Ok(LongRunSet { omega, delta, k_used: k })
}
