//! Data-generating processes for the regression
//! `y_t = b_r z_t^r + b_u z_t^u + Λ ε_t` with partly integrated regressors,
//! the canonical coordinates separating integrated from stationary
//! directions, and builders for the standard special cases.
//!
//! The regressor innovations follow a finite VARMA filter
//! `ν_t = Σ_i A_i ν_{t-i} + Σ_j C_j ε_{t-j}`; with no AR terms this is the
//! plain moving average. The AR part lets VAR-type systems (Anderson VAR(1),
//! Johansen VECM) be written exactly.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::normalize_factors;
use crate::linalg::{
    complete_basis, discrete_lyapunov, inverse, max_abs, orth, orth_complement, singular_values, spectral_radius, svd_sorted, sym_eigen,
    truncated_svd, LinalgError,
};
use crate::scalar::Real;
pub use crate::series::SeriesMatrix;

/// Relative threshold for the numerical rank of `b_r H_{r,∥}`.
pub const CY_RANK_TOL: f64 = 1e-10;
/// Singular-value gap below which the rank of `b_r H_{r,∥}` is ambiguous.
pub const CY_AMBIGUITY_GAP: f64 = 1e-8;
/// Longest moving-average filter accepted.
pub const MAX_MA_ORDER: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DgpError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("rank of b_r H_r,par is ambiguous: singular values {upper:e} and {lower:e} are too close")]
    RankDeficiencyAmbiguous { upper: f64, lower: f64 },
    #[error("I + Upsilon22 has spectral radius {radius} >= 1")]
    UnstableBlock { radius: f64 },
    #[error("VECM is not I(1): {0}")]
    NotI1(String),
    #[error("infeasible dimensions: {0}")]
    InfeasibleDimensions(String),
    #[error("series of length {len} too short for {mode:?} (need {min})")]
    TooShort { mode: Preprocessing, len: usize, min: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// Uniform on `[-√3, √3]` before scaling, so still unit variance.
    Uniform,
}

/// Deterministic-term removal applied before estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocessing {
    #[default]
    None,
    Demean,
    Detrend,
}

/// Full description of the process.
///
/// `H_r = [H_{r,∥}, H_{r,⊥}]` with the first `c_r` columns spanning the
/// integrated directions of `z^r`; likewise `H_u` with `c_u`. The joint
/// innovation `ν_t = [v_t; w_t]` has `m_r + m_u` rows ordered like
/// `[H_r' z^r; H_u' z^u]`, and its first `c_r` (resp. `c_u`) rows of each
/// block are summed into levels.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpSpec<T: Real> {
    pub s: usize,
    pub m_r: usize,
    pub m_u: usize,
    pub k: usize,
    pub c_r: usize,
    pub c_u: usize,
    pub n: usize,
    pub lambda: DMatrix<T>,
    pub sigma: DMatrix<T>,
    pub b_r: DMatrix<T>,
    pub b_u: DMatrix<T>,
    pub h_r: DMatrix<T>,
    pub h_u: DMatrix<T>,
    /// `A_1..A_p`, each `(m_r+m_u) × (m_r+m_u)`.
    pub ar_coeffs: Vec<DMatrix<T>>,
    /// `C_1..C_q`, each `(m_r+m_u) × k`.
    pub ma_coeffs: Vec<DMatrix<T>>,
    pub noise: NoiseKind,
    /// Leading innovations discarded before `t = 1`. They only feed the
    /// stationary coordinates; integrated levels always start at zero.
    pub burn_in: usize,
}

/// One simulated sample, all blocks of length `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T: Real> {
    pub y: SeriesMatrix<T>,
    pub z_r: SeriesMatrix<T>,
    pub z_u: SeriesMatrix<T>,
    pub eps: SeriesMatrix<T>,
}

/// Companion form `ξ_{t+1} = F ξ_t + G ε_{t+1}`, `ν_t = J ξ_t`, with
/// `ξ_t = [ν_t; …; ν_{t-p+1}; ε_t; …; ε_{t-q+1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace<T: Real> {
    pub f: DMatrix<T>,
    pub g: DMatrix<T>,
    pub j: DMatrix<T>,
}

/// Population second moments of `ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct NuMoments<T: Real> {
    /// `E ν_t ν_t'`.
    pub gamma0: DMatrix<T>,
    /// `c(1) = (I - Σ A_i)^{-1} Σ C_j`.
    pub c1: DMatrix<T>,
    /// `Ω_{ν,ν} = c(1) Σ c(1)'`.
    pub omega: DMatrix<T>,
    /// `Δ_{ν,ν} = Σ_{h≥0} E ν_{t+h} ν_t'`.
    pub delta: DMatrix<T>,
    /// Covariance of the companion state.
    pub state_cov: DMatrix<T>,
}

fn invalid(msg: impl Into<String>) -> DgpError {
    DgpError::InvalidSpec(msg.into())
}

fn check_shape<T: Real>(m: &DMatrix<T>, rows: usize, cols: usize, name: &str) -> Result<(), DgpError> {
    if m.shape() != (rows, cols) {
        return Err(invalid(format!("{name} is {}x{}, expected {rows}x{cols}", m.nrows(), m.ncols())));
    }
    Ok(())
}

fn check_orthogonal<T: Real>(h: &DMatrix<T>, name: &str) -> Result<(), DgpError> {
    let dim = h.nrows();
    let err = max_abs(&(h.transpose() * h - DMatrix::identity(dim, dim)));
    if err.as_f64() > 1e-10 {
        return Err(invalid(format!("{name} is not orthogonal (error {:e})", err.as_f64())));
    }
    Ok(())
}

/// Numerical rank with singular values above `rel · σ_1`.
fn numerical_rank<T: Real>(m: &DMatrix<T>, rel: f64) -> usize {
    let s = singular_values(m);
    if s.is_empty() || s[0] <= T::zero() {
        return 0;
    }
    s.iter().filter(|&&x| x > T::lit(rel) * s[0]).count()
}

impl<T: Real> DgpSpec<T> {
    pub fn nu_dim(&self) -> usize {
        self.m_r + self.m_u
    }

    /// Row indices of `ν` that are summed into integrated levels.
    pub fn integrated_rows(&self) -> Vec<usize> {
        (0..self.c_r).chain(self.m_r..self.m_r + self.c_u).collect()
    }

    /// Row indices of `ν` entering the regressors as stationary levels.
    pub fn stationary_rows(&self) -> Vec<usize> {
        (self.c_r..self.m_r).chain(self.m_r + self.c_u..self.nu_dim()).collect()
    }

    pub fn h_r_par(&self) -> DMatrix<T> {
        self.h_r.columns(0, self.c_r).into_owned()
    }

    pub fn h_r_perp(&self) -> DMatrix<T> {
        self.h_r.columns(self.c_r, self.m_r - self.c_r).into_owned()
    }

    pub fn h_u_perp(&self) -> DMatrix<T> {
        self.h_u.columns(self.c_u, self.m_u - self.c_u).into_owned()
    }

    fn check_dimensions(&self) -> Result<(), DgpError> {
        let d = self.nu_dim();
        if self.s == 0 || self.m_r == 0 || self.k == 0 {
            return Err(invalid("s, m_r and k must be positive"));
        }
        if self.c_r > self.m_r || self.c_u > self.m_u {
            return Err(invalid("integrated counts exceed regressor dimensions"));
        }
        if self.n > self.s.min(self.m_r) {
            return Err(invalid(format!("rank n = {} exceeds min(s, m_r)", self.n)));
        }
        check_shape(&self.lambda, self.s, self.k, "Lambda")?;
        check_shape(&self.sigma, self.k, self.k, "Sigma")?;
        check_shape(&self.b_r, self.s, self.m_r, "b_r")?;
        check_shape(&self.b_u, self.s, self.m_u, "b_u")?;
        check_shape(&self.h_r, self.m_r, self.m_r, "H_r")?;
        check_shape(&self.h_u, self.m_u, self.m_u, "H_u")?;
        if self.ma_coeffs.is_empty() {
            return Err(invalid("at least one MA coefficient is required"));
        }
        if self.ma_coeffs.len() > MAX_MA_ORDER {
            return Err(invalid(format!("MA order above {MAX_MA_ORDER}")));
        }
        for (i, a) in self.ar_coeffs.iter().enumerate() {
            check_shape(a, d, d, &format!("A_{}", i + 1))?;
        }
        for (j, c) in self.ma_coeffs.iter().enumerate() {
            check_shape(c, d, self.k, &format!("C_{}", j + 1))?;
        }
        let all_finite = [&self.lambda, &self.sigma, &self.b_r, &self.b_u, &self.h_r, &self.h_u]
            .into_iter()
            .chain(self.ar_coeffs.iter())
            .chain(self.ma_coeffs.iter())
            .all(|m| m.iter().all(|x| x.is_finite()));
        if !all_finite {
            return Err(invalid("non-finite coefficient"));
        }
        Ok(())
    }

    /// Companion-form representation of the innovation filter.
    pub fn state_space(&self) -> StateSpace<T> {
        let d = self.nu_dim();
        let k = self.k;
        let p = self.ar_coeffs.len().max(1);
        let q = self.ma_coeffs.len();
        let dim = d * p + k * q;
        let eps0 = d * p;
        let mut f = DMatrix::zeros(dim, dim);
        for (i, a) in self.ar_coeffs.iter().enumerate() {
            f.view_mut((0, i * d), (d, d)).copy_from(a);
        }
        for (j, c) in self.ma_coeffs.iter().enumerate() {
            f.view_mut((0, eps0 + j * k), (d, k)).copy_from(c);
        }
        for i in 1..p {
            f.view_mut((i * d, (i - 1) * d), (d, d)).fill_with_identity();
        }
        for j in 1..q {
            f.view_mut((eps0 + j * k, eps0 + (j - 1) * k), (k, k)).fill_with_identity();
        }
        let mut g = DMatrix::zeros(dim, k);
        g.view_mut((eps0, 0), (k, k)).fill_with_identity();
        let mut j = DMatrix::zeros(d, dim);
        j.view_mut((0, 0), (d, d)).fill_with_identity();
        StateSpace { f, g, j }
    }

    /// `c(1) = (I - Σ A_i)^{-1} Σ C_j`.
    pub fn c1(&self) -> Result<DMatrix<T>, DgpError> {
        let d = self.nu_dim();
        let mut a_sum = DMatrix::<T>::identity(d, d);
        for a in &self.ar_coeffs {
            a_sum -= a;
        }
        let mut c_sum = DMatrix::zeros(d, self.k);
        for c in &self.ma_coeffs {
            c_sum += c;
        }
        Ok(inverse(&a_sum)? * c_sum)
    }

    /// Exact population moments of `ν` from the companion form.
    pub fn nu_moments(&self) -> Result<NuMoments<T>, DgpError> {
        let ss = self.state_space();
        let radius = spectral_radius(&ss.f);
        if !(radius < 1.0 - 1e-9) {
            return Err(invalid(format!("innovation filter is not stable (spectral radius {radius})")));
        }
        let q = &ss.g * &self.sigma * ss.g.transpose();
        let state_cov = discrete_lyapunov(&ss.f, &q)?;
        let dim = ss.f.nrows();
        let resolvent = inverse(&(DMatrix::identity(dim, dim) - &ss.f))?;
        let gamma0 = &ss.j * &state_cov * ss.j.transpose();
        let delta = &ss.j * resolvent * &state_cov * ss.j.transpose();
        let c1 = self.c1()?;
        let omega = &c1 * &self.sigma * c1.transpose();
        Ok(NuMoments { gamma0, c1, omega, delta, state_cov })
    }

    /// `E ν_{t+h} ν_t'` for `h ≥ 0`.
    pub fn nu_autocov(&self, h: usize) -> Result<DMatrix<T>, DgpError> {
        let ss = self.state_space();
        let m = self.nu_moments()?;
        let mut fp = m.state_cov.clone();
        for _ in 0..h {
            fp = &ss.f * fp;
        }
        Ok(&ss.j * fp * ss.j.transpose())
    }

    /// Checks every invariant of the process description.
    pub fn validate(&self) -> Result<(), DgpError> {
        self.check_dimensions()?;
        check_orthogonal(&self.h_r, "H_r")?;
        check_orthogonal(&self.h_u, "H_u")?;
        let sym_err = max_abs(&(&self.sigma - self.sigma.transpose()));
        if sym_err.as_f64() > 1e-10 * max_abs(&self.sigma).as_f64().max(1.0) {
            return Err(invalid("Sigma is not symmetric"));
        }
        let (sig_vals, _) = sym_eigen(&self.sigma);
        if !(sig_vals[self.k - 1] > T::zero()) {
            return Err(invalid("Sigma is not positive definite"));
        }
        if self.s > self.k || numerical_rank(&self.lambda, 1e-10) < self.s {
            return Err(invalid("Lambda must have full row rank"));
        }
        let sv = singular_values(&self.b_r);
        let scale = if sv.is_empty() { T::zero() } else { sv[0] };
        let rank = sv.iter().filter(|&&x| x > T::lit(1e-10) * scale).count();
        if rank != self.n {
            return Err(invalid(format!("rank(b_r) = {rank} but n = {}", self.n)));
        }
        if self.n > 0 && self.n < sv.len() && (sv[self.n - 1] - sv[self.n]) < T::lit(1e-8) * scale {
            return Err(invalid("rank of b_r is numerically ambiguous"));
        }
        let moments = self.nu_moments()?;
        let int_rows = self.integrated_rows();
        if !int_rows.is_empty() {
            let c1_int = moments.c1.select_rows(int_rows.iter());
            if numerical_rank(&c1_int, 1e-10) < int_rows.len() {
                return Err(invalid("rows of c(1) for the integrated directions are not of full row rank"));
            }
        }
        let stat_rows = self.stationary_rows();
        if !stat_rows.is_empty() {
            let cov = moments.gamma0.select_rows(stat_rows.iter()).select_columns(stat_rows.iter());
            let (vals, _) = sym_eigen(&cov);
            let min = vals[vals.len() - 1].as_f64();
            if !(min > 1e-8) {
                return Err(invalid(format!("stationary regressor covariance is singular (smallest eigenvalue {min:e})")));
            }
        }
        Ok(())
    }
}

/// A validated spec with its noise factor precomputed, for repeated draws.
#[derive(Debug, Clone)]
pub struct Simulator<T: Real> {
    spec: DgpSpec<T>,
    chol: DMatrix<T>,
}

impl<T: Real> Simulator<T> {
    pub fn new(spec: &DgpSpec<T>) -> Result<Self, DgpError> {
        spec.validate()?;
        let chol = spec.sigma.clone().cholesky().ok_or_else(|| invalid("Sigma is not positive definite"))?.l();
        Ok(Self { spec: spec.clone(), chol })
    }

    pub fn spec(&self) -> &DgpSpec<T> {
        &self.spec
    }

    /// Draws one sample of length `len`. Output is a deterministic function
    /// of `(spec, len, seed)`, and shorter lengths are prefixes of longer ones.
    pub fn run(&self, len: usize, seed: u64) -> Result<Sample<T>, DgpError> {
        let sp = &self.spec;
        let q = sp.ma_coeffs.len();
        if len <= q {
            return Err(invalid(format!("sample length {len} must exceed the MA order {q}")));
        }
        let (d, k) = (sp.nu_dim(), sp.k);
        let burn = sp.burn_in;
        let total = burn + len;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut eps = DMatrix::<T>::zeros(k, total);
        let mut raw = vec![T::zero(); k];
        let root3 = 3f64.sqrt();
        for t in 0..total {
            for r in raw.iter_mut() {
                let x: f64 = match sp.noise {
                    NoiseKind::Gaussian => rng.sample(StandardNormal),
                    NoiseKind::Uniform => rng.random_range(-root3..root3),
                };
                *r = T::lit(x);
            }
            for i in 0..k {
                let mut acc = T::zero();
                for (jj, r) in raw.iter().enumerate().take(i + 1) {
                    acc += self.chol[(i, jj)] * *r;
                }
                eps[(i, t)] = acc;
            }
        }

        let mut nu = DMatrix::<T>::zeros(d, total);
        for t in 0..total {
            for i in 0..d {
                let mut acc = T::zero();
                for (l, a) in sp.ar_coeffs.iter().enumerate() {
                    if t > l {
                        for jj in 0..d {
                            acc += a[(i, jj)] * nu[(jj, t - l - 1)];
                        }
                    }
                }
                for (l, c) in sp.ma_coeffs.iter().enumerate() {
                    if t > l {
                        for jj in 0..k {
                            acc += c[(i, jj)] * eps[(jj, t - l - 1)];
                        }
                    }
                }
                nu[(i, t)] = acc;
            }
        }

        // coordinates [H_r' z^r; H_u' z^u]: integrated rows are partial sums
        // of ν from t = 1 on, the rest are ν itself
        let mut x = DMatrix::<T>::zeros(d, len);
        let int_rows = sp.integrated_rows();
        let stat_rows = sp.stationary_rows();
        for t in 0..len {
            for &i in &int_rows {
                let prev = if t == 0 { T::zero() } else { x[(i, t - 1)] };
                x[(i, t)] = prev + nu[(i, burn + t)];
            }
            for &i in &stat_rows {
                x[(i, t)] = nu[(i, burn + t)];
            }
        }

        let mut z_r = DMatrix::<T>::zeros(sp.m_r, len);
        let mut z_u = DMatrix::<T>::zeros(sp.m_u, len);
        let mut y = DMatrix::<T>::zeros(sp.s, len);
        for t in 0..len {
            for i in 0..sp.m_r {
                let mut acc = T::zero();
                for jj in 0..sp.m_r {
                    acc += sp.h_r[(i, jj)] * x[(jj, t)];
                }
                z_r[(i, t)] = acc;
            }
            for i in 0..sp.m_u {
                let mut acc = T::zero();
                for jj in 0..sp.m_u {
                    acc += sp.h_u[(i, jj)] * x[(sp.m_r + jj, t)];
                }
                z_u[(i, t)] = acc;
            }
            for i in 0..sp.s {
                let mut acc = T::zero();
                for jj in 0..sp.m_r {
                    acc += sp.b_r[(i, jj)] * z_r[(jj, t)];
                }
                for jj in 0..sp.m_u {
                    acc += sp.b_u[(i, jj)] * z_u[(jj, t)];
                }
                for jj in 0..k {
                    acc += sp.lambda[(i, jj)] * eps[(jj, burn + t)];
                }
                y[(i, t)] = acc;
            }
        }
        Ok(Sample {
            y: SeriesMatrix::from_raw(y),
            z_r: SeriesMatrix::from_raw(z_r),
            z_u: SeriesMatrix::from_raw(z_u),
            eps: SeriesMatrix::from_raw(eps.columns(burn, len).into_owned()),
        })
    }
}

pub fn simulate<T: Real>(spec: &DgpSpec<T>, len: usize, seed: u64) -> Result<Sample<T>, DgpError> {
    Simulator::new(spec)?.run(len, seed)
}

/// Coordinates in which the coefficient on `z^r` takes the pattern
/// `[[I_{c_y}, 0, 0], [0, 0, Õ₂Γ̃₃₂']]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalForm<T: Real> {
    pub t_y: DMatrix<T>,
    pub t_zr: DMatrix<T>,
    pub t_zu: DMatrix<T>,
    pub c_y: usize,
    /// `T_y b_r T_zr^{-1}`.
    pub b_tilde_r: DMatrix<T>,
    /// `Õ₂`, `(s - c_y) × (n - c_y)`.
    pub o2: DMatrix<T>,
    /// `Γ̃₃₂`, `(m_r - c_r) × (n - c_y)`, normalized so `Γ̃₃₂' S_p = I`.
    pub gamma32: DMatrix<T>,
    /// Rows of `Γ̃₃₂` picked by the selector `S_p`.
    pub selector: Vec<usize>,
    /// The `c_r × c_r` matrix `C` used for the integrated block.
    pub c_mat: DMatrix<T>,
}

impl<T: Real> CanonicalForm<T> {
    pub fn t_zr_inv(&self) -> DMatrix<T> {
        inverse(&self.t_zr).expect("canonical transforms are nonsingular")
    }

    pub fn t_zu_inv(&self) -> DMatrix<T> {
        inverse(&self.t_zu).expect("canonical transforms are nonsingular")
    }

    /// `b̃_{2,3}`.
    pub fn b23(&self, c_r: usize) -> DMatrix<T> {
        let (rows, cols) = self.b_tilde_r.shape();
        self.b_tilde_r.view((self.c_y, c_r), (rows - self.c_y, cols - c_r)).into_owned()
    }
}

pub fn canonical_form<T: Real>(spec: &DgpSpec<T>) -> Result<CanonicalForm<T>, DgpError> {
    spec.validate()?;
    let (s, m_r, c_r, n) = (spec.s, spec.m_r, spec.c_r, spec.n);
    let h_par = spec.h_r_par();
    let a = &spec.b_r * &h_par;
    let b_scale = singular_values(&spec.b_r).iter().copied().fold(T::zero(), |x, y| x.max(y));

    let (c_y, t_y, c_mat) = if c_r == 0 || b_scale <= T::zero() {
        (0, DMatrix::identity(s, s), DMatrix::identity(c_r, c_r))
    } else {
        let (u, sv, v) = svd_sorted(&a);
        let c_y = sv.iter().filter(|&&x| x > T::lit(CY_RANK_TOL) * b_scale).count();
        // past the last column the next singular value is zero
        let next = if c_y < sv.len() { sv[c_y] } else { T::zero() };
        if c_y > 0 && sv[c_y - 1] - next < T::lit(CY_AMBIGUITY_GAP) * b_scale {
            return Err(DgpError::RankDeficiencyAmbiguous { upper: sv[c_y - 1].as_f64(), lower: next.as_f64() });
        }
        if c_y == 0 {
            (0, DMatrix::identity(s, s), DMatrix::identity(c_r, c_r))
        } else {
            let u_full = complete_basis(&u.columns(0, c_y).into_owned());
            let v_full = complete_basis(&v.columns(0, c_y).into_owned());
            let mut scale = DMatrix::<T>::identity(s, s);
            for i in 0..c_y {
                scale[(i, i)] = T::one() / sv[i];
            }
            (c_y, scale * u_full.transpose(), v_full)
        }
    };
    if c_y > n {
        return Err(invalid(format!("rank of b_r H_r,par ({c_y}) exceeds n = {n}")));
    }

    // T̄_zr = diag(C^{-1}, I) H_r', then eliminate b̃_{r,13}
    let mut left = DMatrix::<T>::identity(m_r, m_r);
    left.view_mut((0, 0), (c_r, c_r)).copy_from(&inverse(&c_mat)?);
    let t_bar = left * spec.h_r.transpose();
    let bt_bar = &t_y * &spec.b_r * inverse(&t_bar)?;
    let b13 = bt_bar.view((0, c_r), (c_y, m_r - c_r)).into_owned();
    let mut elim = DMatrix::<T>::identity(m_r, m_r);
    elim.view_mut((0, c_r), (c_y, m_r - c_r)).copy_from(&b13);
    let t_zr = elim * t_bar;
    let b_tilde_r = &t_y * &spec.b_r * inverse(&t_zr)?;

    let b23 = b_tilde_r.view((c_y, c_r), (s - c_y, m_r - c_r)).into_owned();
    let rank23 = n - c_y;
    let (o2, gamma32, selector) = if rank23 == 0 {
        (DMatrix::zeros(s - c_y, 0), DMatrix::zeros(m_r - c_r, 0), Vec::new())
    } else {
        let tsvd =
            truncated_svd(&b23, rank23).map_err(|_| invalid(format!("stationary block of b_r does not have rank n - c_y = {rank23}")))?;
        let o = &tsvd.u * tsvd.s_matrix();
        let norm = normalize_factors(&o, &tsvd.v).map_err(|e| invalid(e.to_string()))?;
        (norm.o, norm.gamma, norm.selector)
    };

    Ok(CanonicalForm { t_y, t_zr, t_zu: spec.h_u.transpose(), c_y, b_tilde_r, o2, gamma32, selector, c_mat })
}

fn block_diag<T: Real>(blocks: &[&DMatrix<T>]) -> DMatrix<T> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// `ΔX_t = Υ X_{t-1} + W_t` with `Υ = diag(0_{c×c}, Υ₂₂)` and `X_0 = 0`,
/// written as `y_t = ΔX_t`, `z_t^r = X_{t-1}` and no `z^u`.
pub fn make_anderson_var1<T: Real>(upsilon22: &DMatrix<T>, sigma_w: &DMatrix<T>, integrated_dim: usize) -> Result<DgpSpec<T>, DgpError> {
    let d = upsilon22.nrows();
    if upsilon22.ncols() != d || d == 0 {
        return Err(invalid("Upsilon22 must be square and nonempty"));
    }
    let s = integrated_dim + d;
    check_shape(sigma_w, s, s, "Sigma_W")?;
    if numerical_rank(upsilon22, 1e-10) < d {
        return Err(invalid("Upsilon22 must be nonsingular"));
    }
    let ar22 = DMatrix::identity(d, d) + upsilon22;
    let radius = spectral_radius(&ar22);
    if !(radius < 1.0) {
        return Err(DgpError::UnstableBlock { radius });
    }
    let zero_c = DMatrix::zeros(integrated_dim, integrated_dim);
    let spec = DgpSpec {
        s,
        m_r: s,
        m_u: 0,
        k: s,
        c_r: integrated_dim,
        c_u: 0,
        n: d,
        lambda: DMatrix::identity(s, s),
        sigma: sigma_w.clone(),
        b_r: block_diag(&[&zero_c, upsilon22]),
        b_u: DMatrix::zeros(s, 0),
        h_r: DMatrix::identity(s, s),
        h_u: DMatrix::zeros(0, 0),
        ar_coeffs: vec![block_diag(&[&zero_c, &ar22])],
        ma_coeffs: vec![DMatrix::identity(s, s)],
        noise: NoiseKind::Gaussian,
        burn_in: 0,
    };
    spec.validate()?;
    Ok(spec)
}

/// VECM `ΔX_t = αβ'X_{t-1} + Σ_{i<p} Γ_i ΔX_{t-i} + ε_t` with zero initial
/// values, arranged as `y_t = ΔX_t`, `z_t^r = X_{t-1}`,
/// `z_t^u = [ΔX_{t-1}; …; ΔX_{t-p+1}]`.
///
/// `H_r = [β_⊥, orth(β)]`; the innovation state is
/// `[β_⊥'ΔX_{t-1}; orth(β)'X_{t-1}; ΔX_{t-1}; …; ΔX_{t-p+1}]`, a VAR(1)
/// driven by `ε_{t-1}`.
pub fn make_johansen_vecm<T: Real>(
    alpha: &DMatrix<T>,
    beta: &DMatrix<T>,
    lag_coeffs: &[DMatrix<T>],
    sigma: &DMatrix<T>,
) -> Result<DgpSpec<T>, DgpError> {
    let s = alpha.nrows();
    let r = alpha.ncols();
    check_shape(beta, s, r, "beta")?;
    check_shape(sigma, s, s, "Sigma")?;
    for (i, g) in lag_coeffs.iter().enumerate() {
        check_shape(g, s, s, &format!("Gamma_{}", i + 1))?;
    }
    if r == 0 || r >= s {
        return Err(DgpError::NotI1(format!("cointegrating rank {r} must lie in 1..{s}")));
    }
    if numerical_rank(alpha, 1e-10) < r || numerical_rank(beta, 1e-10) < r {
        return Err(DgpError::NotI1("alpha and beta must have full column rank".into()));
    }
    let alpha_perp = orth_complement(alpha, 1e-10);
    let beta_perp = orth_complement(beta, 1e-10);
    let mut gamma_j = DMatrix::<T>::identity(s, s);
    for g in lag_coeffs {
        gamma_j -= g;
    }
    let core = alpha_perp.transpose() * &gamma_j * &beta_perp;
    if crate::linalg::condition_number(&core) >= 1e12 {
        return Err(DgpError::NotI1("alpha_perp' Gamma beta_perp is singular".into()));
    }

    let beta_bar = orth(beta, 1e-10);
    let rot = beta_bar.transpose() * beta;
    let lags = lag_coeffs.len();
    let d = s * (1 + lags);
    let (c_r, w0) = (s - r, s);
    // ΔX_{t-1} = L ν_{t-1} + ε_{t-1}
    let mut l = DMatrix::<T>::zeros(s, d);
    l.view_mut((0, c_r), (s, r)).copy_from(&(alpha * rot.transpose()));
    for (i, g) in lag_coeffs.iter().enumerate() {
        l.view_mut((0, w0 + i * s), (s, s)).copy_from(g);
    }
    let mut a = DMatrix::<T>::zeros(d, d);
    let mut c = DMatrix::<T>::zeros(d, s);
    a.view_mut((0, 0), (c_r, d)).copy_from(&(beta_perp.transpose() * &l));
    c.view_mut((0, 0), (c_r, s)).copy_from(&beta_perp.transpose());
    let mut stat = beta_bar.transpose() * &l;
    for i in 0..r {
        stat[(i, c_r + i)] += T::one();
    }
    a.view_mut((c_r, 0), (r, d)).copy_from(&stat);
    c.view_mut((c_r, 0), (r, s)).copy_from(&beta_bar.transpose());
    if lags > 0 {
        a.view_mut((w0, 0), (s, d)).copy_from(&l);
        c.view_mut((w0, 0), (s, s)).fill_with_identity();
        for i in 1..lags {
            a.view_mut((w0 + i * s, w0 + (i - 1) * s), (s, s)).fill_with_identity();
        }
    }
    let radius = spectral_radius(&a);
    if !(radius < 1.0 - 1e-9) {
        return Err(DgpError::NotI1(format!("differenced system has spectral radius {radius}")));
    }

    let mut h_r = DMatrix::<T>::zeros(s, s);
    h_r.columns_mut(0, c_r).copy_from(&beta_perp);
    h_r.columns_mut(c_r, r).copy_from(&beta_bar);
    let mut b_u = DMatrix::<T>::zeros(s, s * lags);
    for (i, g) in lag_coeffs.iter().enumerate() {
        b_u.columns_mut(i * s, s).copy_from(g);
    }
    let spec = DgpSpec {
        s,
        m_r: s,
        m_u: s * lags,
        k: s,
        c_r,
        c_u: 0,
        n: r,
        lambda: DMatrix::identity(s, s),
        sigma: sigma.clone(),
        b_r: alpha * beta.transpose(),
        b_u,
        h_r,
        h_u: DMatrix::identity(s * lags, s * lags),
        ar_coeffs: vec![a],
        ma_coeffs: vec![c],
        noise: NoiseKind::Gaussian,
        burn_in: 0,
    };
    spec.validate()?;
    Ok(spec)
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    if dim == 0 {
        return DMatrix::zeros(0, 0);
    }
    gaussian_matrix(dim, dim, rng).qr().q()
}

/// Seeded random spec with `rank(b_r H_{r,∥}) = c_y ≥ 1`.
///
/// `b_r = O Ḡ' H_r'` where `Ḡ = [G_∥; G_⊥]` and only the first `c_y`
/// columns of `G_∥` are nonzero. Innovations are AR(1) with coefficient 0.5
/// on the stationary rows, and the regression noise loads on the regressor
/// shocks, so the regressors are endogenous.
#[allow(clippy::too_many_arguments)]
pub fn make_cy_positive_spec(
    s: usize,
    m_r: usize,
    m_u: usize,
    c_r: usize,
    c_u: usize,
    n: usize,
    c_y: usize,
    seed: u64,
) -> Result<DgpSpec<f64>, DgpError> {
    let infeasible = |msg: &str| Err(DgpError::InfeasibleDimensions(msg.to_string()));
    if c_y == 0 {
        return infeasible("c_y must be at least 1");
    }
    if c_y > n || c_y > c_r {
        return infeasible("c_y must not exceed n or c_r");
    }
    if n > s.min(m_r) {
        return infeasible("n must not exceed min(s, m_r)");
    }
    if c_r > m_r || c_u > m_u {
        return infeasible("integrated counts exceed regressor dimensions");
    }
    if n - c_y > m_r - c_r || n - c_y > s - c_y {
        return infeasible("stationary block cannot carry rank n - c_y");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = m_r + m_u;
    let k = s + d;
    let o = gaussian_matrix(s, n, &mut rng);
    let mut g = DMatrix::<f64>::zeros(m_r, n);
    g.view_mut((0, 0), (c_r, c_y)).copy_from(&gaussian_matrix(c_r, c_y, &mut rng));
    g.view_mut((c_r, 0), (m_r - c_r, n)).copy_from(&gaussian_matrix(m_r - c_r, n, &mut rng));
    let h_r = random_orthogonal(m_r, &mut rng);
    let h_u = random_orthogonal(m_u, &mut rng);
    let b_r = &o * g.transpose() * h_r.transpose();
    let b_u = gaussian_matrix(s, m_u, &mut rng) * 0.5;
    let mut lambda = DMatrix::<f64>::zeros(s, k);
    lambda.view_mut((0, 0), (s, d)).copy_from(&(gaussian_matrix(s, d, &mut rng) * 0.3));
    lambda.view_mut((0, d), (s, s)).fill_with_identity();
    let mut ar = DMatrix::<f64>::zeros(d, d);
    let mut ma = DMatrix::<f64>::zeros(d, k);
    ma.view_mut((0, 0), (d, d)).fill_with_identity();
    let spec_tmp = DgpSpec {
        s,
        m_r,
        m_u,
        k,
        c_r,
        c_u,
        n,
        lambda,
        sigma: DMatrix::identity(k, k),
        b_r,
        b_u,
        h_r,
        h_u,
        ar_coeffs: Vec::new(),
        ma_coeffs: Vec::new(),
        noise: NoiseKind::Gaussian,
        burn_in: 0,
    };
    for i in spec_tmp.stationary_rows() {
        ar[(i, i)] = 0.5;
    }
    let spec = DgpSpec { ar_coeffs: vec![ar], ma_coeffs: vec![ma], ..spec_tmp };
    let canon = canonical_form(&spec)?;
    if canon.c_y != c_y {
        return Err(DgpError::InfeasibleDimensions(format!("constructed spec has c_y = {} instead of {c_y}", canon.c_y)));
    }
    Ok(spec)
}

/// Seeded spec with only stationary regressors: `ν` is a VAR(1) with
/// coefficient `0.5 I`, `b_r = O G' H_r'` has rank `n`, and the regression
/// noise loads on the regressor shocks.
pub fn make_stationary_spec(s: usize, m_r: usize, m_u: usize, n: usize, seed: u64) -> Result<DgpSpec<f64>, DgpError> {
    if n == 0 || n > s.min(m_r) {
        return Err(DgpError::InfeasibleDimensions("n must lie in 1..=min(s, m_r)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = m_r + m_u;
    let k = s + d;
    let o = gaussian_matrix(s, n, &mut rng);
    let g = gaussian_matrix(m_r, n, &mut rng);
    let h_r = random_orthogonal(m_r, &mut rng);
    let h_u = random_orthogonal(m_u, &mut rng);
    let mut lambda = DMatrix::<f64>::zeros(s, k);
    lambda.view_mut((0, 0), (s, d)).copy_from(&(gaussian_matrix(s, d, &mut rng) * 0.3));
    lambda.view_mut((0, d), (s, s)).fill_with_identity();
    let mut ma = DMatrix::<f64>::zeros(d, k);
    ma.view_mut((0, 0), (d, d)).fill_with_identity();
    let spec = DgpSpec {
        s,
        m_r,
        m_u,
        k,
        c_r: 0,
        c_u: 0,
        n,
        lambda,
        sigma: DMatrix::identity(k, k),
        b_r: &o * g.transpose() * h_r.transpose(),
        b_u: gaussian_matrix(s, m_u, &mut rng) * 0.5,
        h_r,
        h_u,
        ar_coeffs: vec![DMatrix::identity(d, d) * 0.5],
        ma_coeffs: vec![ma],
        noise: NoiseKind::Gaussian,
        burn_in: 200,
    };
    spec.validate()?;
    Ok(spec)
}

/// Removes a mean or a linear trend `[1, t]`, `t = 1..T`, from every row.
pub fn detrend<T: Real>(a: &SeriesMatrix<T>, mode: Preprocessing) -> Result<SeriesMatrix<T>, DgpError> {
    let len = a.len();
    let min = match mode {
        Preprocessing::None => return Ok(a.clone()),
        Preprocessing::Demean => 2,
        Preprocessing::Detrend => 3,
    };
    if len < min {
        return Err(DgpError::TooShort { mode, len, min });
    }
    let mut out = a.values().clone();
    match mode {
        Preprocessing::Demean => {
            let tt = T::from_count(len);
            for v in 0..a.dim() {
                let mean = a.values().row(v).iter().fold(T::zero(), |acc, &x| acc + x) / tt;
                for t in 0..len {
                    out[(v, t)] -= mean;
                }
            }
        }
        Preprocessing::Detrend => {
            // regress on [1, t]; the 2×2 Gram of d_t is solved in closed form
            let tt = T::from_count(len);
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for t in 1..=len {
                let x = T::from_count(t);
                s1 += x;
                s2 += x * x;
            }
            let det = tt * s2 - s1 * s1;
            for v in 0..a.dim() {
                let mut sy = T::zero();
                let mut sty = T::zero();
                for t in 0..len {
                    sy += a.values()[(v, t)];
                    sty += T::from_count(t + 1) * a.values()[(v, t)];
                }
                let slope = (tt * sty - s1 * sy) / det;
                let level = (sy - slope * s1) / tt;
                for t in 0..len {
                    out[(v, t)] -= level + slope * T::from_count(t + 1);
                }
            }
        }
        Preprocessing::None => unreachable!(),
    }
    Ok(SeriesMatrix::from_raw(out))
}
