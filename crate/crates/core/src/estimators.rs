//! OLS, reduced-rank regression (SVD and generalized-eigenvalue routes),
//! fully modified OLS and fully modified RRR.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covest::{long_run, sample_moment, CovError, KernelConfig};
use crate::dgp::{detrend, DgpError, Preprocessing};
use crate::linalg::{
    condition_number, gen_eig_sym, gram_factor, inverse, singular_values, sym_inv_sqrt, sym_sqrt, symmetrize, truncated_svd, GramFactor,
    LinalgError, COND_LIMIT,
};
use crate::scalar::Real;
use crate::series::{SeriesError, SeriesMatrix};

/// Condition-number ceiling for the factor selector `S_p' Γ`.
pub const SELECTOR_COND_LIMIT: f64 = 1e10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("Gram matrix {which} is singular (condition {cond:e})")]
    SingularGram { which: &'static str, cond: f64 },
    #[error("requested rank {requested} outside 1..={max}")]
    RankTooLarge { requested: usize, max: usize },
    #[error("long-run covariance of the regressor differences is singular (condition {cond:e})")]
    SingularLongRun { cond: f64 },
    #[error("FM-RRR weight matrix is not positive definite")]
    WffNotPositiveDefinite,
    #[error("no choice of {n} rows gives a selector with condition below 1e10")]
    SelectorSingular { n: usize },
    #[error("sample length {len} must exceed the number of regressors {regressors}")]
    TooFewObservations { len: usize, regressors: usize },
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error(transparent)]
    Cov(#[from] CovError),
    #[error(transparent)]
    Dgp(#[from] DgpError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "OLS")]
    Ols,
    #[serde(rename = "RRR")]
    Rrr,
    #[serde(rename = "FM_OLS")]
    FmOls,
    #[serde(rename = "FM_RRR")]
    FmRrr,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Ols => "OLS",
            Method::Rrr => "RRR",
            Method::FmOls => "FM_OLS",
            Method::FmRrr => "FM_RRR",
        }
    }

    pub fn is_rank_restricted(self) -> bool {
        matches!(self, Method::Rrr | Method::FmRrr)
    }
}

/// Observations `(y, z^r, z^u)` and the preprocessing applied before any
/// estimator sees them.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSample<T: Real> {
    pub y: SeriesMatrix<T>,
    pub z_r: SeriesMatrix<T>,
    pub z_u: SeriesMatrix<T>,
    pub preprocessing: Preprocessing,
}

/// Estimator output; `beta_r = o_hat · gamma_hat'` for the rank-restricted
/// methods, empty factors otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate<T: Real> {
    pub method: Method,
    pub beta_r: DMatrix<T>,
    pub beta_u: DMatrix<T>,
    pub o_hat: DMatrix<T>,
    pub gamma_hat: DMatrix<T>,
    /// Full singular spectrum of the weighted matrix that was truncated
    /// (empty for OLS and FM-OLS).
    pub singvals: DVector<T>,
    pub n: usize,
    /// The `n`-th and `(n+1)`-th singular values nearly coincide.
    pub degenerate: bool,
}

impl<T: Real> Estimate<T> {
    fn unrestricted(method: Method, beta_r: DMatrix<T>, beta_u: DMatrix<T>) -> Self {
        let (s, m_r) = beta_r.shape();
        Self {
            method,
            n: s.min(m_r),
            o_hat: DMatrix::zeros(s, 0),
            gamma_hat: DMatrix::zeros(m_r, 0),
            singvals: DVector::zeros(0),
            degenerate: false,
            beta_r,
            beta_u,
        }
    }

    /// `[β_r, β_u]`.
    pub fn beta(&self) -> DMatrix<T> {
        hcat(&self.beta_r, &self.beta_u)
    }
}

fn hcat<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Moment matrices of the preprocessed sample.
struct Prepared<T: Real> {
    y: SeriesMatrix<T>,
    z_r: SeriesMatrix<T>,
    z_u: SeriesMatrix<T>,
}

impl<T: Real> RegressionSample<T> {
    pub fn new(
        y: SeriesMatrix<T>,
        z_r: SeriesMatrix<T>,
        z_u: SeriesMatrix<T>,
        preprocessing: Preprocessing,
    ) -> Result<Self, EstimatorError> {
        for b in [&z_r, &z_u] {
            if b.len() != y.len() {
                return Err(SeriesError::LengthMismatch { left: y.len(), right: b.len() }.into());
            }
        }
        let regressors = z_r.dim() + z_u.dim();
        if y.len() <= regressors {
            return Err(EstimatorError::TooFewObservations { len: y.len(), regressors });
        }
        Ok(Self { y, z_r, z_u, preprocessing })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.len() == 0
    }

    fn prepared(&self) -> Result<Prepared<T>, EstimatorError> {
        Ok(Prepared {
            y: detrend(&self.y, self.preprocessing)?,
            z_r: detrend(&self.z_r, self.preprocessing)?,
            z_u: detrend(&self.z_u, self.preprocessing)?,
        })
    }
}

fn gram_inverse<T: Real>(g: &DMatrix<T>, which: &'static str) -> Result<DMatrix<T>, EstimatorError> {
    let cond = condition_number(g);
    if !(cond < COND_LIMIT) {
        return Err(EstimatorError::SingularGram { which, cond });
    }
    inverse(g).map_err(|_| EstimatorError::SingularGram { which, cond })
}

/// `⟨a, b⟩⟨b, b⟩^{-1}`; zero columns when `b` is empty.
fn regression_coef<T: Real>(a: &SeriesMatrix<T>, b: &SeriesMatrix<T>, which: &'static str) -> Result<DMatrix<T>, EstimatorError> {
    if b.is_empty() {
        return Ok(DMatrix::zeros(a.dim(), 0));
    }
    let gbb = sample_moment(b, b)?;
    Ok(sample_moment(a, b)? * gram_inverse(&gbb, which)?)
}

pub fn ols<T: Real>(sample: &RegressionSample<T>) -> Result<Estimate<T>, EstimatorError> {
    let p = sample.prepared()?;
    let z = SeriesMatrix::stack(&[&p.z_r, &p.z_u])?;
    let beta = regression_coef(&p.y, &z, "<z,z>")?;
    let m_r = p.z_r.dim();
    Ok(Estimate::unrestricted(Method::Ols, beta.columns(0, m_r).into_owned(), beta.columns(m_r, p.z_u.dim()).into_owned()))
}

/// `a^π = a - ⟨a,b⟩⟨b,b⟩^{-1} b`; identity when `b` is empty.
pub fn project_out<T: Real>(a: &SeriesMatrix<T>, b: &SeriesMatrix<T>) -> Result<SeriesMatrix<T>, EstimatorError> {
    if b.is_empty() {
        return Ok(a.clone());
    }
    let coef = regression_coef(a, b, "<b,b>")?;
    Ok(a.sub(&b.transform(&coef))?)
}

fn check_rank(n: usize, s: usize, m_r: usize) -> Result<(), EstimatorError> {
    let max = s.min(m_r);
    if n == 0 || n > max {
        return Err(EstimatorError::RankTooLarge { requested: n, max });
    }
    Ok(())
}

/// `⟨y - β_r z^r, z^u⟩⟨z^u, z^u⟩^{-1}`.
fn beta_u_given_r<T: Real>(p: &Prepared<T>, beta_r: &DMatrix<T>) -> Result<DMatrix<T>, EstimatorError> {
    let resid = p.y.sub(&p.z_r.transform(beta_r))?;
    regression_coef(&resid, &p.z_u, "<z_u,z_u>")
}

pub fn rrr<T: Real>(sample: &RegressionSample<T>, n: usize) -> Result<Estimate<T>, EstimatorError> {
    rrr_with_factor(sample, n, GramFactor::Symmetric)
}

/// RRR with a chosen factor `Ŵf` of `⟨y^π, y^π⟩^{-1}`.
///
/// The left weight is `Ŵf'`: with `Ŵf Ŵf' = ⟨y^π,y^π⟩^{-1}` every admissible
/// factor is `⟨y^π,y^π⟩^{-1/2} Q` for orthogonal `Q`, and `Q'` then cancels
/// from the truncated product. For the symmetric root `Ŵf' = Ŵf`.
pub fn rrr_with_factor<T: Real>(sample: &RegressionSample<T>, n: usize, factor: GramFactor) -> Result<Estimate<T>, EstimatorError> {
    let p = sample.prepared()?;
    check_rank(n, p.y.dim(), p.z_r.dim())?;
    let y_pi = project_out(&p.y, &p.z_u)?;
    let z_pi = project_out(&p.z_r, &p.z_u)?;
    let syy = sample_moment(&y_pi, &y_pi)?;
    let szz = sample_moment(&z_pi, &z_pi)?;
    let beta_ols_r = sample_moment(&y_pi, &z_pi)? * gram_inverse(&szz, "<z^pi,z^pi>")?;
    let wf = gram_factor(&syy, factor).map_err(|_| EstimatorError::SingularGram { which: "<y^pi,y^pi>", cond: condition_number(&syy) })?;
    let wp = sym_sqrt(&szz).map_err(|_| EstimatorError::SingularGram { which: "<z^pi,z^pi>", cond: condition_number(&szz) })?;
    let left = wf.transpose();
    let tsvd = truncated_svd(&(&left * &beta_ols_r * &wp), n)?;
    let o_hat = inverse(&left)? * &tsvd.u * tsvd.s_matrix();
    let gamma_hat = inverse(&wp)? * &tsvd.v;
    let beta_r = &o_hat * gamma_hat.transpose();
    let beta_u = beta_u_given_r(&p, &beta_r)?;
    Ok(Estimate { method: Method::Rrr, beta_r, beta_u, o_hat, gamma_hat, singvals: tsvd.spectrum, n, degenerate: tsvd.degenerate })
}

/// RRR through `⟨z^π,z^π⟩ K S² = ⟨z^π,y^π⟩⟨y^π,y^π⟩^{-1}⟨y^π,z^π⟩ K`;
/// `Ô = ⟨y^π, z^π⟩ K̂` is the regression of `y^π` on `K̂' z^π`.
pub fn rrr_geneig<T: Real>(sample: &RegressionSample<T>, n: usize) -> Result<Estimate<T>, EstimatorError> {
    let p = sample.prepared()?;
    check_rank(n, p.y.dim(), p.z_r.dim())?;
    let y_pi = project_out(&p.y, &p.z_u)?;
    let z_pi = project_out(&p.z_r, &p.z_u)?;
    let syy = sample_moment(&y_pi, &y_pi)?;
    let szz = sample_moment(&z_pi, &z_pi)?;
    let syz = sample_moment(&y_pi, &z_pi)?;
    let q = symmetrize(&(syz.transpose() * gram_inverse(&syy, "<y^pi,y^pi>")? * &syz));
    let eig = gen_eig_sym(&q, &symmetrize(&szz), n).map_err(|e| match e {
        LinalgError::NotPositiveDefinite { .. } => EstimatorError::SingularGram { which: "<z^pi,z^pi>", cond: condition_number(&szz) },
        other => other.into(),
    })?;
    let gamma_hat = eig.vectors;
    let o_hat = &syz * &gamma_hat;
    let beta_r = &o_hat * gamma_hat.transpose();
    let beta_u = beta_u_given_r(&p, &beta_r)?;
    let singvals = eig.values.map(|x| x.max(T::zero()).sqrt());
    Ok(Estimate { method: Method::Rrr, beta_r, beta_u, o_hat, gamma_hat, singvals, n, degenerate: false })
}

/// Pieces shared by FM-OLS and FM-RRR.
struct FmParts<T: Real> {
    beta_plus: DMatrix<T>,
    omega_uz: DMatrix<T>,
    omega_zz_inv: DMatrix<T>,
    dz: SeriesMatrix<T>,
}

fn fm_parts<T: Real>(p: &Prepared<T>, cfg: &KernelConfig) -> Result<FmParts<T>, EstimatorError> {
    cfg.validate()?;
    let z = SeriesMatrix::stack(&[&p.z_r, &p.z_u])?;
    let gzz_inv = gram_inverse(&sample_moment(&z, &z)?, "<z,z>")?;
    let beta_ols = sample_moment(&p.y, &z)? * &gzz_inv;
    let u_hat = p.y.sub(&z.transform(&beta_ols))?;
    let dz = z.diff();
    let lr_uz = long_run(&u_hat, &dz, cfg)?;
    let lr_zz = long_run(&dz, &dz, cfg)?;
    let cond = condition_number(&lr_zz.omega);
    if !(cond < COND_LIMIT) {
        return Err(EstimatorError::SingularLongRun { cond });
    }
    let omega_zz_inv = inverse(&lr_zz.omega).map_err(|_| EstimatorError::SingularLongRun { cond })?;
    let correction = &lr_uz.omega * &omega_zz_inv * (sample_moment(&dz, &z)? - &lr_zz.delta);
    let beta_plus = (sample_moment(&p.y, &z)? - &lr_uz.delta - correction) * gzz_inv;
    Ok(FmParts { beta_plus, omega_uz: lr_uz.omega, omega_zz_inv, dz })
}

pub fn fm_ols<T: Real>(sample: &RegressionSample<T>, cfg: &KernelConfig) -> Result<Estimate<T>, EstimatorError> {
    let p = sample.prepared()?;
    let parts = fm_parts(&p, cfg)?;
    let m_r = p.z_r.dim();
    Ok(Estimate::unrestricted(
        Method::FmOls,
        parts.beta_plus.columns(0, m_r).into_owned(),
        parts.beta_plus.columns(m_r, p.z_u.dim()).into_owned(),
    ))
}

/// FM-RRR: truncates `Ŵff β⁺_r ⟨z^r,z^r⟩^{1/2}` at rank `n`, with the inner
/// matrix of `Ŵff` symmetrized before its inverse square root.
pub fn fm_rrr<T: Real>(sample: &RegressionSample<T>, n: usize, cfg: &KernelConfig) -> Result<Estimate<T>, EstimatorError> {
    let p = sample.prepared()?;
    check_rank(n, p.y.dim(), p.z_r.dim())?;
    let parts = fm_parts(&p, cfg)?;
    let m_r = p.z_r.dim();
    let plus_r = parts.beta_plus.columns(0, m_r).into_owned();
    let plus_u = parts.beta_plus.columns(m_r, p.z_u.dim()).into_owned();

    let y_pi = project_out(&p.y, &p.z_u)?;
    let dy_pi = y_pi.diff();
    let lr_zy = long_run(&parts.dz, &dy_pi, cfg)?;
    let gain = &parts.omega_uz * &parts.omega_zz_inv;
    // the transposed term reuses Δ̂_{Δz,Δy^π}; the one-sided Δ̂_{Δy^π,Δz} does not vanish
    let corr = &gain * (sample_moment(&parts.dz, &y_pi)? - lr_zy.delta);
    let inner = sample_moment(&y_pi, &y_pi)? - &corr - corr.transpose();
    let wff = sym_inv_sqrt(&symmetrize(&inner)).map_err(|_| EstimatorError::WffNotPositiveDefinite)?;

    let szz_r = sample_moment(&p.z_r, &p.z_r)?;
    let root = sym_sqrt(&szz_r).map_err(|_| EstimatorError::SingularGram { which: "<z_r,z_r>", cond: condition_number(&szz_r) })?;
    let tsvd = truncated_svd(&(&wff * &plus_r * &root), n)?;
    let o_hat = inverse(&wff)? * &tsvd.u * tsvd.s_matrix();
    let gamma_hat = inverse(&root)? * &tsvd.v;
    let beta_r = &o_hat * gamma_hat.transpose();
    let beta_u = if p.z_u.is_empty() {
        plus_u
    } else {
        let link = sample_moment(&p.z_r, &p.z_u)? * gram_inverse(&sample_moment(&p.z_u, &p.z_u)?, "<z_u,z_u>")?;
        plus_u + (&plus_r - &beta_r) * link
    };
    Ok(Estimate { method: Method::FmRrr, beta_r, beta_u, o_hat, gamma_hat, singvals: tsvd.spectrum, n, degenerate: tsvd.degenerate })
}

/// Factors rescaled so that `Γ' S_p = I_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFactors<T: Real> {
    pub o: DMatrix<T>,
    pub gamma: DMatrix<T>,
    /// Rows of `Γ` picked by `S_p`, ascending.
    pub selector: Vec<usize>,
}

impl<T: Real> NormalizedFactors<T> {
    /// `S_p` as an `m × n` matrix of identity columns.
    pub fn selector_matrix(&self) -> DMatrix<T> {
        let mut s = DMatrix::zeros(self.gamma.nrows(), self.selector.len());
        for (c, &r) in self.selector.iter().enumerate() {
            s[(r, c)] = T::one();
        }
        s
    }
}

/// Picks `n` rows of `Γ` by Gaussian elimination with row pivoting and
/// returns `Γ(S_p'Γ)^{-1}` and `O(S_p'Γ)'`, leaving `OΓ'` unchanged.
pub fn normalize_factors<T: Real>(o: &DMatrix<T>, gamma: &DMatrix<T>) -> Result<NormalizedFactors<T>, EstimatorError> {
    let (m, n) = gamma.shape();
    if o.ncols() != n || n > m {
        return Err(LinalgError::DimensionMismatch(format!("factors {}x{} and {}x{} do not match", o.nrows(), o.ncols(), m, n)).into());
    }
    let mut work = gamma.clone();
    let mut used = vec![false; m];
    let mut picked = Vec::with_capacity(n);
    for col in 0..n {
        let mut best: Option<(usize, T)> = None;
        for (r, &taken) in used.iter().enumerate() {
            if taken {
                continue;
            }
            let v = work[(r, col)].abs();
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((r, v));
            }
        }
        let (pivot, mag) = best.ok_or(EstimatorError::SelectorSingular { n })?;
        if mag <= T::zero() {
            return Err(EstimatorError::SelectorSingular { n });
        }
        used[pivot] = true;
        picked.push(pivot);
        for r in 0..m {
            if used[r] {
                continue;
            }
            let factor = work[(r, col)] / work[(pivot, col)];
            for c in col..n {
                let sub = factor * work[(pivot, c)];
                work[(r, c)] -= sub;
            }
        }
    }
    picked.sort_unstable();
    let g = gamma.select_rows(picked.iter());
    if !(condition_number(&g) < SELECTOR_COND_LIMIT) {
        return Err(EstimatorError::SelectorSingular { n });
    }
    let g_inv = inverse(&g)?;
    Ok(NormalizedFactors { o: o * g.transpose(), gamma: gamma * g_inv, selector: picked })
}

/// Rank of `beta` at relative tolerance `rel`.
pub fn numerical_rank<T: Real>(beta: &DMatrix<T>, rel: f64) -> usize {
    let s = singular_values(beta);
    if s.is_empty() || s[0] <= T::zero() {
        return 0;
    }
    s.iter().filter(|&&x| x > T::lit(rel) * s[0]).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covest::{kernel_weight, long_run_with_bandwidth, Kernel};
    use crate::dgp::{make_cy_positive_spec, simulate};
    use crate::linalg::{max_abs, svd_sorted};
    use crate::testing::random_matrix;

    fn series(m: DMatrix<f64>) -> SeriesMatrix<f64> {
        SeriesMatrix::new(m).unwrap()
    }

    fn sample(y: DMatrix<f64>, z_r: DMatrix<f64>, z_u: DMatrix<f64>) -> RegressionSample<f64> {
        RegressionSample::new(series(y), series(z_r), series(z_u), Preprocessing::None).unwrap()
    }

    fn random_sample(s: usize, m_r: usize, m_u: usize, len: usize, seed: u64) -> RegressionSample<f64> {
        let z_r = random_matrix(m_r, len, seed);
        let z_u = random_matrix(m_u, len, seed + 1) + DMatrix::from_fn(m_u, len, |i, t| 0.3 * z_r[(i % m_r, t)]);
        let b_r = random_matrix(s, m_r, seed + 2);
        let b_u = random_matrix(s, m_u, seed + 3);
        let y = &b_r * &z_r + &b_u * &z_u + random_matrix(s, len, seed + 4);
        sample(y, z_r, z_u)
    }

    fn integrated_sample(len: usize, seed: u64) -> RegressionSample<f64> {
        let spec = make_cy_positive_spec(3, 3, 1, 2, 0, 2, 1, 4).unwrap();
        let sim = simulate(&spec, len, seed).unwrap();
        RegressionSample::new(sim.y, sim.z_r, sim.z_u, Preprocessing::None).unwrap()
    }

    /// Normal-equation oracle with an explicitly inverted Gram matrix.
    fn normal_equations(y: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
        let zz = z * z.transpose();
        y * z.transpose() * zz.try_inverse().unwrap()
    }

    fn weighted_objective(s: &RegressionSample<f64>, beta_r: &DMatrix<f64>, beta_u: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
        let resid = s.y.values() - beta_r * s.z_r.values() - beta_u * s.z_u.values();
        let m = w * &resid * resid.transpose() * w.transpose();
        m.trace()
    }

    fn wf_of(s: &RegressionSample<f64>) -> DMatrix<f64> {
        let y_pi = project_out(&s.y, &s.z_u).unwrap();
        sym_inv_sqrt(&sample_moment(&y_pi, &y_pi).unwrap()).unwrap()
    }

    #[test]
    fn ols_examples() {
        let z = random_matrix(1, 20, 1);
        let s = sample(&z * 2.0, z.clone(), DMatrix::zeros(0, 20));
        assert!((ols(&s).unwrap().beta_r[(0, 0)] - 2.0).abs() < 1e-12);
        let z = random_matrix(3, 20, 2);
        let s = sample(z.clone(), z, DMatrix::zeros(0, 20));
        assert!(max_abs(&(ols(&s).unwrap().beta_r - DMatrix::identity(3, 3))) < 1e-12);
        let s = random_sample(2, 3, 2, 40, 3);
        let est = ols(&s).unwrap();
        let z = SeriesMatrix::stack(&[&s.z_r, &s.z_u]).unwrap();
        let oracle = normal_equations(s.y.values(), z.values());
        assert!(max_abs(&(est.beta() - oracle)) < 1e-9);
        assert_eq!(est.n, 2);
        assert_eq!(est.o_hat.ncols(), 0);
    }

    #[test]
    fn singular_gram_is_reported() {
        let z = DMatrix::from_fn(2, 10, |_, t| t as f64);
        let s = sample(random_matrix(1, 10, 1), z, DMatrix::zeros(0, 10));
        assert!(matches!(ols(&s), Err(EstimatorError::SingularGram { .. })));
        assert!(RegressionSample::new(
            series(random_matrix(1, 3, 1)),
            series(random_matrix(3, 3, 2)),
            series(DMatrix::zeros(0, 3)),
            Preprocessing::None
        )
        .is_err());
    }

    #[test]
    fn project_out_examples() {
        let a = series(random_matrix(2, 30, 4));
        let empty = SeriesMatrix::<f64>::zeros(0, 30);
        assert_eq!(project_out(&a, &empty).unwrap(), a);
        assert!(max_abs(project_out(&a, &a).unwrap().values()) < 1e-12);
        let b = series(random_matrix(3, 30, 5));
        let r = project_out(&a, &b).unwrap();
        assert!(max_abs(&sample_moment(&r, &b).unwrap()) < 1e-10);
    }

    #[test]
    fn full_rank_rrr_equals_ols() {
        let s = random_sample(2, 3, 1, 50, 10);
        let o = ols(&s).unwrap();
        for est in [rrr(&s, 2).unwrap(), rrr_geneig(&s, 2).unwrap()] {
            assert!(max_abs(&(&est.beta_r - &o.beta_r)) < 1e-10);
            assert!(max_abs(&(&est.beta_u - &o.beta_u)) < 1e-10);
        }
        assert!(matches!(rrr(&s, 3), Err(EstimatorError::RankTooLarge { .. })));
        assert!(matches!(rrr(&s, 0), Err(EstimatorError::RankTooLarge { .. })));
    }

    #[test]
    fn exact_low_rank_fit() {
        let o = random_matrix(3, 1, 20);
        let g = random_matrix(4, 1, 21);
        let z = random_matrix(4, 60, 22);
        let b = &o * g.transpose();
        // small noise keeps ⟨y,y⟩ invertible; the fit moves by O(noise)
        let s = sample(&b * &z + random_matrix(3, 60, 23) * 1e-5, z, DMatrix::zeros(0, 60));
        let est = rrr(&s, 1).unwrap();
        assert!(max_abs(&(&est.beta_r - &b)) < 1e-4);
        assert!(max_abs(&(&est.o_hat * est.gamma_hat.transpose() - &est.beta_r)) < 1e-12);
    }

    #[test]
    fn rrr_beats_alternating_least_squares_oracle() {
        let s = random_sample(3, 3, 0, 80, 30);
        let est = rrr(&s, 1).unwrap();
        let w = wf_of(&s);
        let best = weighted_objective(&s, &est.beta_r, &est.beta_u, &w);
        let y = s.y.values();
        let z = s.z_r.values();
        let zz_inv = (z * z.transpose()).try_inverse().unwrap();
        for start in 0..100u64 {
            // ALS over rank-1 factorizations β = a g' under the weight W
            let mut g = random_matrix(3, 1, 1000 + start);
            let mut a = DMatrix::zeros(3, 1);
            for _ in 0..50 {
                let f = g.transpose() * z;
                let ff = (&f * f.transpose())[(0, 0)];
                a = y * f.transpose() / ff;
                let wa = &w * &a;
                let aa = (wa.transpose() * &wa)[(0, 0)];
                g = (zz_inv.clone() * z * y.transpose() * w.transpose() * &wa / aa).into_owned();
            }
            let candidate = &a * g.transpose();
            let value = weighted_objective(&s, &candidate, &DMatrix::zeros(3, 0), &w);
            assert!(best <= value + 1e-9 * value.abs(), "start {start}: {best} > {value}");
        }
    }

    #[test]
    fn routes_agree_and_factor_choice_is_irrelevant() {
        for seed in 0..5 {
            let s = random_sample(3, 4, 2, 70, 40 + seed);
            let svd_route = rrr(&s, 2).unwrap();
            let eig_route = rrr_geneig(&s, 2).unwrap();
            assert!(max_abs(&(&svd_route.beta_r - &eig_route.beta_r)) < 1e-8);
            assert!(max_abs(&(&svd_route.beta_u - &eig_route.beta_u)) < 1e-8);
            let tri = rrr_with_factor(&s, 2, GramFactor::Triangular).unwrap();
            assert!(max_abs(&(&svd_route.beta_r - &tri.beta_r)) < 1e-9);
        }
        let s = integrated_sample(400, 3);
        let a = rrr(&s, 2).unwrap();
        let b = rrr_geneig(&s, 2).unwrap();
        assert!(max_abs(&(&a.beta_r - &b.beta_r)) < 1e-8);
    }

    #[test]
    fn beta_u_correction_identity() {
        for s in [random_sample(3, 3, 2, 60, 50), integrated_sample(300, 1)] {
            let o = ols(&s).unwrap();
            let r = rrr(&s, 1).unwrap();
            let zr_zu = sample_moment(&s.z_r, &s.z_u).unwrap();
            let zu_inv = sample_moment(&s.z_u, &s.z_u).unwrap().try_inverse().unwrap();
            let lhs = &r.beta_u - &o.beta_u;
            let rhs = (&o.beta_r - &r.beta_r) * zr_zu * zu_inv;
            assert!(max_abs(&(lhs - rhs)) < 1e-10);
        }
    }

    #[test]
    fn fit_is_monotone_in_rank() {
        let s = random_sample(3, 4, 1, 60, 60);
        let w = wf_of(&s);
        let mut prev = f64::INFINITY;
        for n in 1..=3 {
            let e = rrr(&s, n).unwrap();
            let v = weighted_objective(&s, &e.beta_r, &e.beta_u, &w);
            assert!(v <= prev + 1e-9);
            prev = v;
        }
    }

    #[test]
    fn detrending_commutes_with_trend_regressors() {
        let len = 50;
        let s = random_sample(2, 2, 1, len, 70);
        let y = s.y.values() + DMatrix::from_fn(2, len, |i, t| (i as f64 + 1.0) * 0.1 * t as f64 + 3.0);
        let z_r = s.z_r.values() + DMatrix::from_fn(2, len, |i, t| 0.05 * (t * (i + 1)) as f64);
        let pre = RegressionSample::new(series(y.clone()), series(z_r.clone()), s.z_u.clone(), Preprocessing::Detrend).unwrap();
        let trend = DMatrix::from_fn(2, len, |i, t| if i == 0 { 1.0 } else { (t + 1) as f64 });
        let mut zu_aug = DMatrix::zeros(3, len);
        zu_aug.rows_mut(0, 1).copy_from(s.z_u.values());
        zu_aug.rows_mut(1, 2).copy_from(&trend);
        let aug = sample(y, z_r, zu_aug);
        let a = ols(&pre).unwrap();
        let b = ols(&aug).unwrap();
        assert!(max_abs(&(&a.beta_r - &b.beta_r)) < 1e-9);
        assert!(max_abs(&(&a.beta_u - b.beta_u.columns(0, 1))) < 1e-9);
    }

    #[test]
    fn normalize_factor_examples() {
        let o = random_matrix(3, 2, 80);
        let id = DMatrix::<f64>::identity(2, 2);
        let out = normalize_factors(&o, &id).unwrap();
        assert_eq!(out.gamma, id);
        assert_eq!(out.selector, vec![0, 1]);
        let out = normalize_factors(&o, &(&id * 2.0)).unwrap();
        assert!(max_abs(&(&out.gamma - &id)) < 1e-15);
        assert!(max_abs(&(&out.o - &o * 2.0)) < 1e-15);
        for seed in 0..20 {
            let o = random_matrix(4, 2, 100 + seed);
            let g = random_matrix(5, 2, 200 + seed);
            let out = normalize_factors(&o, &g).unwrap();
            assert!(max_abs(&(&out.o * out.gamma.transpose() - &o * g.transpose())) < 1e-12);
            let sel = out.selector_matrix();
            assert!(max_abs(&(out.gamma.transpose() * sel - &id)) < 1e-12);
        }
        let zero = DMatrix::<f64>::zeros(3, 1);
        assert!(matches!(normalize_factors(&DMatrix::zeros(2, 1), &zero), Err(EstimatorError::SelectorSingular { .. })));
    }

    #[test]
    fn fm_ols_rejects_degenerate_long_run() {
        // a constant regressor has Δz = (1, 0, ..., 0), whose long-run variance is O(1/T)
        // but whose Gram with z is fine; an all-zero difference series is exactly singular
        let len = 30;
        let y = random_matrix(1, len, 3);
        let s = sample(y.clone(), DMatrix::from_fn(1, len, |_, t| (t as f64).sin()), DMatrix::zeros(0, len));
        assert!(fm_ols(&s, &KernelConfig::default()).is_ok());
        let z_r = random_matrix(1, len, 4);
        let dup = sample(y, z_r.clone(), z_r);
        assert!(matches!(fm_ols(&dup, &KernelConfig::default()), Err(EstimatorError::SingularGram { .. })));
    }

    #[test]
    fn fm_ols_matches_hand_sum_oracle() {
        // T = 4 scalar sample, K = 1 (only lag 0 survives)
        let y = [1.0, -0.5, 2.0, 0.3];
        let z = [0.4, 1.1, 0.7, 2.0];
        let s = sample(DMatrix::from_row_slice(1, 4, &y), DMatrix::from_row_slice(1, 4, &z), DMatrix::zeros(0, 4));
        let cfg = KernelConfig { kernel: Kernel::Quartic, b: 0.3, c: 0.5 };
        assert_eq!(crate::covest::bandwidth(4, &cfg), 1);
        let est = fm_ols(&s, &cfg).unwrap();
        let t = 4.0;
        let zz: f64 = z.iter().map(|v| v * v).sum::<f64>() / t;
        let yz: f64 = y.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / t;
        let b_ols = yz / zz;
        let u: Vec<f64> = y.iter().zip(&z).map(|(a, b)| a - b_ols * b).collect();
        let dz: Vec<f64> = (0..4).map(|i| if i == 0 { z[0] } else { z[i] - z[i - 1] }).collect();
        let g0 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / t;
        let omega_uz = g0(&u, &dz);
        let omega_zz = g0(&dz, &dz);
        let delta_uz = omega_uz;
        let delta_zz = omega_zz;
        let dzz = g0(&dz, &z);
        let expected = (yz - delta_uz - omega_uz / omega_zz * (dzz - delta_zz)) / zz;
        assert!((est.beta_r[(0, 0)] - expected).abs() < 1e-10);
        // K = 2 exercises the lag-one weights as well
        let lr = long_run_with_bandwidth(&s.y, &s.z_r, Kernel::Quartic, 2).unwrap();
        let w1 = kernel_weight(0.5, Kernel::Quartic);
        let lag1: f64 = (1..4).map(|i| y[i] * z[i - 1]).sum::<f64>() / t;
        assert!((lr.delta[(0, 0)] - (yz + w1 * lag1)).abs() < 1e-12);
    }

    #[test]
    fn fm_rrr_full_rank_equals_fm_ols_and_truncates_otherwise() {
        let s = integrated_sample(500, 9);
        let cfg = KernelConfig::default();
        let fo = fm_ols(&s, &cfg).unwrap();
        let fr = fm_rrr(&s, 3, &cfg).unwrap();
        assert!(max_abs(&(&fo.beta_r - &fr.beta_r)) < 1e-10);
        assert!(max_abs(&(&fo.beta_u - &fr.beta_u)) < 1e-10);
        let fr2 = fm_rrr(&s, 2, &cfg).unwrap();
        assert_eq!(numerical_rank(&fr2.beta_r, 1e-10), 2);
        assert!(max_abs(&(&fr2.o_hat * fr2.gamma_hat.transpose() - &fr2.beta_r)) < 1e-10);
        let zr_zu = sample_moment(&s.z_r, &s.z_u).unwrap();
        let zu_inv = sample_moment(&s.z_u, &s.z_u).unwrap().try_inverse().unwrap();
        let lhs = &fr2.beta_u - &fo.beta_u;
        let rhs = (&fo.beta_r - &fr2.beta_r) * zr_zu * zu_inv;
        assert!(max_abs(&(lhs - rhs)) < 1e-10);
    }

    #[test]
    fn fm_rrr_is_the_weighted_best_approximation() {
        let s = integrated_sample(400, 12);
        let cfg = KernelConfig::default();
        let fo = fm_ols(&s, &cfg).unwrap();
        let fr = fm_rrr(&s, 2, &cfg).unwrap();
        // recover Ŵff from the estimator's own factors: Ŵff Ô = U S
        // and compare against a full-SVD truncation oracle of the same target
        let root = sym_sqrt(&sample_moment(&s.z_r, &s.z_r).unwrap()).unwrap();
        let root_inv = root.clone().try_inverse().unwrap();
        let y_pi = project_out(&s.y, &s.z_u).unwrap();
        let z = SeriesMatrix::stack(&[&s.z_r, &s.z_u]).unwrap();
        let dz = z.diff();
        let dy = y_pi.diff();
        let beta_ols = ols(&s).unwrap().beta();
        let u_hat = s.y.sub(&z.transform(&beta_ols)).unwrap();
        let lr_uz = long_run(&u_hat, &dz, &cfg).unwrap();
        let lr_zz = long_run(&dz, &dz, &cfg).unwrap();
        let gain = &lr_uz.omega * lr_zz.omega.clone().try_inverse().unwrap();
        let dzy = sample_moment(&dz, &y_pi).unwrap() - long_run(&dz, &dy, &cfg).unwrap().delta;
        let inner = sample_moment(&y_pi, &y_pi).unwrap() - &gain * &dzy - dzy.transpose() * gain.transpose();
        let wff = sym_inv_sqrt(&symmetrize(&inner)).unwrap();
        let target = &wff * &fo.beta_r * &root;
        let (u, sv, v) = svd_sorted(&target);
        let best = u.columns(0, 2) * DMatrix::from_diagonal(&sv.rows(0, 2).into_owned()) * v.columns(0, 2).transpose();
        let oracle = wff.try_inverse().unwrap() * best * root_inv;
        assert!(max_abs(&(oracle - &fr.beta_r)) < 1e-8 * max_abs(&fr.beta_r).max(1.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn identities_hold_on_random_samples(seed in 0u64..5000, n in 1usize..3) {
                let s = random_sample(3, 3, 2, 40, seed);
                let o = ols(&s).unwrap();
                let a = rrr(&s, n).unwrap();
                let b = rrr_geneig(&s, n).unwrap();
                let c = rrr_with_factor(&s, n, GramFactor::Triangular).unwrap();
                prop_assert!(max_abs(&(&a.beta_r - &b.beta_r)) < 1e-8);
                prop_assert!(max_abs(&(&a.beta_r - &c.beta_r)) < 1e-9);
                prop_assert!(numerical_rank(&a.beta_r, 1e-10) <= n);
                let zr_zu = sample_moment(&s.z_r, &s.z_u).unwrap();
                let zu_inv = sample_moment(&s.z_u, &s.z_u).unwrap().try_inverse().unwrap();
                let rhs = (&o.beta_r - &a.beta_r) * zr_zu * zu_inv;
                prop_assert!(max_abs(&(&a.beta_u - &o.beta_u - rhs)) < 1e-10);
            }

            #[test]
            fn normalization_preserves_product(seed in 0u64..5000, m in 2usize..6, n in 1usize..3) {
                let o = random_matrix(3, n, seed);
                let g = random_matrix(m, n, seed + 7);
                let out = normalize_factors(&o, &g).unwrap();
                prop_assert!(max_abs(&(&out.o * out.gamma.transpose() - &o * g.transpose())) < 1e-12 * (1.0 + max_abs(&(&o * g.transpose()))));
            }
        }
    }
}
