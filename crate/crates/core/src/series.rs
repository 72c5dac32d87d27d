//! The multivariate observation container used by every module.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeriesError {
    #[error("series must contain at least one time point")]
    Empty,
    #[error("non-finite value at variable {var}, time {time}")]
    NonFinite { var: usize, time: usize },
    #[error("series lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("malformed CSV at line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

/// A `dim × T` block of observations; column `t` holds the value at time
/// `t + 1`. Zero-dimensional series are allowed (an absent regressor block).
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesMatrix<T: Real> {
    values: DMatrix<T>,
}

impl<T: Real> SeriesMatrix<T> {
    pub fn new(values: DMatrix<T>) -> Result<Self, SeriesError> {
        if values.ncols() == 0 {
            return Err(SeriesError::Empty);
        }
        for t in 0..values.ncols() {
            for v in 0..values.nrows() {
                if !values[(v, t)].is_finite() {
                    return Err(SeriesError::NonFinite { var: v, time: t + 1 });
                }
            }
        }
        Ok(Self { values })
    }

    pub(crate) fn from_raw(values: DMatrix<T>) -> Self {
        debug_assert!(values.ncols() > 0);
        Self { values }
    }

    pub fn zeros(dim: usize, len: usize) -> Self {
        assert!(len > 0, "series length must be positive");
        Self { values: DMatrix::zeros(dim, len) }
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn values(&self) -> &DMatrix<T> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<T> {
        self.values
    }

    /// First `len` time points.
    pub fn prefix(&self, len: usize) -> Self {
        Self::from_raw(self.values.columns(0, len).into_owned())
    }

    /// Rows `start..start + count`.
    pub fn rows(&self, start: usize, count: usize) -> Self {
        Self::from_raw(self.values.rows(start, count).into_owned())
    }

    /// `M a_t` for every `t`.
    pub fn transform(&self, m: &DMatrix<T>) -> Self {
        Self::from_raw(m * &self.values)
    }

    /// `Δa_t = a_t - a_{t-1}` with `a_0 = 0`.
    pub fn diff(&self) -> Self {
        let mut out = self.values.clone();
        for t in (1..self.len()).rev() {
            for v in 0..self.dim() {
                out[(v, t)] = self.values[(v, t)] - self.values[(v, t - 1)];
            }
        }
        Self::from_raw(out)
    }

    /// Stacks blocks vertically; all must share the same length.
    pub fn stack(blocks: &[&Self]) -> Result<Self, SeriesError> {
        let len = blocks.first().map(|b| b.len()).ok_or(SeriesError::Empty)?;
        for b in blocks {
            if b.len() != len {
                return Err(SeriesError::LengthMismatch { left: len, right: b.len() });
            }
        }
        let dim: usize = blocks.iter().map(|b| b.dim()).sum();
        let mut out = DMatrix::zeros(dim, len);
        let mut row = 0;
        for b in blocks {
            out.rows_mut(row, b.dim()).copy_from(&b.values);
            row += b.dim();
        }
        Ok(Self::from_raw(out))
    }

    pub fn sub(&self, other: &Self) -> Result<Self, SeriesError> {
        check_len(self, other)?;
        Ok(Self::from_raw(&self.values - &other.values))
    }

    /// CSV with one line per variable: `var_<i>` followed by the values for
    /// `t = 1..T`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for v in 0..self.dim() {
            let _ = write!(out, "var_{}", v + 1);
            for t in 0..self.len() {
                let _ = write!(out, ",{}", self.values[(v, t)].as_f64());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, SeriesError> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (idx, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut fields = line.split(',');
            let label = fields.next().unwrap_or_default().trim();
            let expected = format!("var_{}", rows.len() + 1);
            if label != expected {
                return Err(SeriesError::Csv { line: idx + 1, reason: format!("expected label {expected}, found {label:?}") });
            }
            let vals = fields
                .map(|f| f.trim().parse::<f64>().map_err(|e| SeriesError::Csv { line: idx + 1, reason: e.to_string() }))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(first) = rows.first() {
                if first.len() != vals.len() {
                    return Err(SeriesError::LengthMismatch { left: first.len(), right: vals.len() });
                }
            }
            rows.push(vals);
        }
        let len = rows.first().map(|r| r.len()).unwrap_or(0);
        let values = DMatrix::from_fn(rows.len(), len, |v, t| T::lit(rows[v][t]));
        Self::new(values)
    }
}

pub(crate) fn check_len<T: Real>(a: &SeriesMatrix<T>, b: &SeriesMatrix<T>) -> Result<(), SeriesError> {
    if a.len() != b.len() {
        return Err(SeriesError::LengthMismatch { left: a.len(), right: b.len() });
    }
    Ok(())
}
