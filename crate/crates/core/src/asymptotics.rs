//! Limit laws of the estimators: scaling matrices, analytic long-run
//! quantities of a [`DgpSpec`], discretized Brownian functionals and samplers
//! for the limit random matrices.
//!
//! Brownian motions live on the grid `ω_i = i/N`, `i = 0..=N`, stored as
//! `dim × (N+1)` matrices with `W(0) = 0`. Stochastic integrals use
//! left-point sums, `∫dE W' ≈ Σ_i (E_{i+1} - E_i) W_i'`, and
//! `∫WW' ≈ N⁻¹ Σ_{i<N} W_i W_i'`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covest::sample_moment;
use crate::dgp::{canonical_form, CanonicalForm, DgpError, DgpSpec, Preprocessing, Simulator};
use crate::estimators::{ols, project_out, rrr, EstimatorError, RegressionSample};
use crate::linalg::{condition_number, inverse, sym_eigen, symmetrize, LinalgError, COND_LIMIT};
use crate::scalar::Real;
use crate::series::{SeriesError, SeriesMatrix};

/// Smallest admissible Brownian grid.
pub const MIN_GRID: usize = 10;
/// Simulated length for finite-sample covariance proxies.
pub const DEFAULT_T_PROXY: usize = 20_000;
pub const DEFAULT_PROXY_REPS: usize = 500;
/// Resampling budget per draw for singular path Gram matrices.
const MAX_RESAMPLES: usize = 100;
/// Seed stream offset separating proxy simulations from path draws.
const PROXY_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AsymptoticsError {
    #[error("grid size {0} below the minimum of 10")]
    GridTooSmall(usize),
    #[error("covariance of the Brownian motion is not positive definite")]
    CovNotPositiveDefinite,
    #[error("path Gram matrix is singular (condition {cond:e})")]
    SingularGram { cond: f64 },
    #[error("population moment {0} is singular")]
    SingularMoment(&'static str),
    #[error("path dimensions disagree: {0}")]
    Shape(String),
    #[error("no nonsingular draw after {0} resamples")]
    ResampleBudget(usize),
    #[error(transparent)]
    Dgp(#[from] DgpError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Series(#[from] SeriesError),
}

/// Diagonal scalings `D_z = diag(D_{z,r}, D_{z,u})` and `D_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingScheme<T: Real> {
    pub t: usize,
    pub d_z: DMatrix<T>,
    pub d_zr: DMatrix<T>,
    pub d_zu: DMatrix<T>,
    pub d_y: DMatrix<T>,
}

/// `diag(T⁻¹ I_c, T^{-1/2} I_{m-c})`.
fn scaling_block<T: Real>(c: usize, m: usize, t: usize) -> DMatrix<T> {
    let tt = T::from_count(t);
    DMatrix::from_fn(m, m, |i, j| {
        if i != j {
            T::zero()
        } else if i < c {
            T::one() / tt
        } else {
            T::one() / tt.sqrt()
        }
    })
}

pub fn scaling<T: Real>(canon: &CanonicalForm<T>, spec: &DgpSpec<T>, t: usize) -> Result<ScalingScheme<T>, AsymptoticsError> {
    if t < 2 {
        return Err(AsymptoticsError::Shape(format!("sample length {t} below 2")));
    }
    let d_zr = scaling_block(spec.c_r, spec.m_r, t);
    let d_zu = scaling_block(spec.c_u, spec.m_u, t);
    let mut d_z = DMatrix::zeros(spec.m_r + spec.m_u, spec.m_r + spec.m_u);
    d_z.view_mut((0, 0), (spec.m_r, spec.m_r)).copy_from(&d_zr);
    d_z.view_mut((spec.m_r, spec.m_r), (spec.m_u, spec.m_u)).copy_from(&d_zu);
    Ok(ScalingScheme { t, d_z, d_zr, d_zu, d_y: scaling_block(canon.c_y, spec.s, t) })
}

/// Brownian motion with covariance `cov` on an `n`-step grid.
pub fn brownian_paths<T: Real>(dim: usize, n: usize, seed: u64, cov: &DMatrix<T>) -> Result<DMatrix<T>, AsymptoticsError> {
    if n < MIN_GRID {
        return Err(AsymptoticsError::GridTooSmall(n));
    }
    if cov.shape() != (dim, dim) {
        return Err(AsymptoticsError::Shape(format!("covariance is {}x{}, dimension {dim}", cov.nrows(), cov.ncols())));
    }
    let chol = Cholesky::new(symmetrize(cov)).ok_or(AsymptoticsError::CovNotPositiveDefinite)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(brownian_from_rng(&chol.l(), n, &mut rng))
}

fn brownian_from_rng<T: Real>(chol_l: &DMatrix<T>, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<T> {
    let dim = chol_l.nrows();
    let scale = T::one() / T::from_count(n).sqrt();
    let mut path = DMatrix::zeros(dim, n + 1);
    let mut z = DVector::<T>::zeros(dim);
    for i in 0..n {
        for v in z.iter_mut() {
            let x: f64 = StandardNormal.sample(rng);
            *v = T::lit(x);
        }
        let step = chol_l * &z * scale;
        for r in 0..dim {
            path[(r, i + 1)] = path[(r, i)] + step[r];
        }
    }
    path
}

fn check_grid<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<usize, AsymptoticsError> {
    if a.ncols() != b.ncols() || a.ncols() < 2 {
        return Err(AsymptoticsError::Shape(format!("grids of {} and {} points", a.ncols(), b.ncols())));
    }
    Ok(a.ncols() - 1)
}

/// `∫ A B' ≈ N⁻¹ Σ_{i<N} A_i B_i'`.
pub fn path_cross<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>, AsymptoticsError> {
    let n = check_grid(a, b)?;
    let mut out = DMatrix::zeros(a.nrows(), b.nrows());
    for i in 0..n {
        out += a.column(i) * b.column(i).transpose();
    }
    Ok(out / T::from_count(n))
}

/// `∫ dE W' ≈ Σ_{i<N} (E_{i+1} - E_i) W_i'`.
pub fn ito_integral<T: Real>(e: &DMatrix<T>, w: &DMatrix<T>) -> Result<DMatrix<T>, AsymptoticsError> {
    let n = check_grid(e, w)?;
    let mut out = DMatrix::zeros(e.nrows(), w.nrows());
    for i in 0..n {
        out += (e.column(i + 1) - e.column(i)) * w.column(i).transpose();
    }
    Ok(out)
}

fn path_gram_inverse<T: Real>(w: &DMatrix<T>) -> Result<DMatrix<T>, AsymptoticsError> {
    let g = path_cross(w, w)?;
    let cond = condition_number(&g);
    if !(cond < COND_LIMIT) {
        return Err(AsymptoticsError::SingularGram { cond });
    }
    inverse(&g).map_err(|_| AsymptoticsError::SingularGram { cond })
}

/// `f(E, W) = ∫dE W' (∫WW')⁻¹`; an empty `W` gives an empty result.
pub fn functional_f<T: Real>(e: &DMatrix<T>, w: &DMatrix<T>) -> Result<DMatrix<T>, AsymptoticsError> {
    check_grid(e, w)?;
    if w.nrows() == 0 {
        return Ok(DMatrix::zeros(e.nrows(), 0));
    }
    Ok(ito_integral(e, w)? * path_gram_inverse(w)?)
}

/// `A - ∫AB'(∫BB')⁻¹ B`, path by path.
pub fn project_path<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>, AsymptoticsError> {
    if b.nrows() == 0 || a.nrows() == 0 {
        return Ok(a.clone());
    }
    let coef = path_cross(a, b)? * path_gram_inverse(b)?;
    Ok(a - coef * b)
}

/// Demeaned `W - ∫W` or detrended
/// `W - (∫W)(4 - 6ω) - (∫ωW)(12ω - 6)` version of a path.
pub fn adjust_path<T: Real>(w: &DMatrix<T>, mode: Preprocessing) -> DMatrix<T> {
    let n = w.ncols() - 1;
    let nn = T::from_count(n);
    let mut int_w = DVector::<T>::zeros(w.nrows());
    let mut int_sw = DVector::<T>::zeros(w.nrows());
    for i in 0..n {
        let om = T::from_count(i) / nn;
        int_w += w.column(i) / nn;
        int_sw += w.column(i) * (om / nn);
    }
    let mut out = w.clone();
    for i in 0..=n {
        let om = T::from_count(i) / nn;
        let shift = match mode {
            Preprocessing::None => continue,
            Preprocessing::Demean => int_w.clone(),
            Preprocessing::Detrend => &int_w * (T::lit(4.0) - T::lit(6.0) * om) + &int_sw * (T::lit(12.0) * om - T::lit(6.0)),
        };
        for r in 0..w.nrows() {
            out[(r, i)] -= shift[r];
        }
    }
    out
}

/// Exact long-run moments of the innovation process `ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueLongRun<T: Real> {
    /// `Ω_{ν,ν}`.
    pub omega: DMatrix<T>,
    /// `Δ_{ν,ν}`.
    pub delta: DMatrix<T>,
    pub c1: DMatrix<T>,
    /// `E ν_t ν_t'`.
    pub gamma0: DMatrix<T>,
}

pub fn true_long_run<T: Real>(spec: &DgpSpec<T>) -> Result<TrueLongRun<T>, AsymptoticsError> {
    let m = spec.nu_moments()?;
    Ok(TrueLongRun { omega: m.omega, delta: m.delta, c1: m.c1, gamma0: m.gamma0 })
}

/// `c̃_n(1)`: long-run loadings of the nonstationary canonical regressors,
/// `[C⁻¹ c_v(1); c_w(1)]` over the integrated rows of `ν`.
pub fn nonstationary_loadings<T: Real>(spec: &DgpSpec<T>, canon: &CanonicalForm<T>) -> Result<DMatrix<T>, AsymptoticsError> {
    let c1 = spec.c1()?;
    let (c_r, c_u) = (spec.c_r, spec.c_u);
    let mut out = DMatrix::zeros(c_r + c_u, spec.k);
    if c_r > 0 {
        let v = c1.rows(0, c_r).into_owned();
        out.rows_mut(0, c_r).copy_from(&(inverse(&canon.c_mat)? * v));
    }
    if c_u > 0 {
        out.rows_mut(c_r, c_u).copy_from(&c1.rows(spec.m_r, c_u));
    }
    Ok(out)
}

/// `Ω_{u,Δz}^{:,n}(Ω_{Δz,Δz}^{n,n})⁻¹ = ΛΣc̃_n'(c̃_nΣc̃_n')⁻¹`.
pub fn fm_gain<T: Real>(spec: &DgpSpec<T>, c_n: &DMatrix<T>) -> Result<DMatrix<T>, AsymptoticsError> {
    if c_n.nrows() == 0 {
        return Ok(DMatrix::zeros(spec.s, 0));
    }
    let omega_nn = c_n * &spec.sigma * c_n.transpose();
    let inv = inverse(&omega_nn).map_err(|_| AsymptoticsError::SingularMoment("Omega_{dz,dz}^{n,n}"))?;
    Ok(&spec.lambda * &spec.sigma * c_n.transpose() * inv)
}

/// Population constants of the rank-restriction correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Projectors<T: Real> {
    /// `Ξ`, `c_y × (s - c_y)`.
    pub xi: DMatrix<T>,
    /// `P = I - S Γ₃₂ Γ₃₂†`.
    pub p: DMatrix<T>,
    pub o2_dagger: DMatrix<T>,
    pub gamma32_dagger: DMatrix<T>,
    /// `E ỹ₂^Π ỹ₂'`.
    pub ey2: DMatrix<T>,
    /// `S = E z̃₃^Π z̃₃^Π'`.
    pub ez3: DMatrix<T>,
    /// `E z̃₂^u z̃₂^u'`.
    pub ezu: DMatrix<T>,
    /// `E z̃₃ z̃₂^u' (E z̃₂^u z̃₂^u')⁻¹`.
    pub ez3_zu: DMatrix<T>,
    /// `T_y Λ Σ Λ' T_y'`.
    pub noise_cov: DMatrix<T>,
}

impl<T: Real> Projectors<T> {
    /// `I - Õ₂ Õ₂†`.
    pub fn o2_complement(&self, o2: &DMatrix<T>) -> DMatrix<T> {
        let dim = self.ey2.nrows();
        DMatrix::identity(dim, dim) - o2 * &self.o2_dagger
    }
}

fn checked_inverse<T: Real>(m: &DMatrix<T>, name: &'static str) -> Result<DMatrix<T>, AsymptoticsError> {
    inverse(m).map_err(|_| AsymptoticsError::SingularMoment(name))
}

pub fn correction_projectors<T: Real>(spec: &DgpSpec<T>, canon: &CanonicalForm<T>) -> Result<Projectors<T>, AsymptoticsError> {
    let (s, c_y, c_r, m_r) = (spec.s, canon.c_y, spec.c_r, spec.m_r);
    let gamma0 = spec.nu_moments()?.gamma0;
    let v_stat: Vec<usize> = (c_r..m_r).collect();
    let w_stat: Vec<usize> = (m_r + spec.c_u..spec.nu_dim()).collect();
    let block = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| gamma0[(rows[i], cols[j])]);
    let e33 = block(&v_stat, &v_stat);
    let e3u = block(&v_stat, &w_stat);
    let ezu = block(&w_stat, &w_stat);
    let ez3_zu = if w_stat.is_empty() { DMatrix::zeros(v_stat.len(), 0) } else { &e3u * checked_inverse(&ezu, "E z2u z2u'")? };
    let ez3 = symmetrize(&(&e33 - &ez3_zu * e3u.transpose()));

    let noise_cov = symmetrize(&(&canon.t_y * &spec.lambda * &spec.sigma * spec.lambda.transpose() * canon.t_y.transpose()));
    let b23 = canon.b23(c_r);
    let v22 = noise_cov.view((c_y, c_y), (s - c_y, s - c_y)).into_owned();
    let ey2 = symmetrize(&(&b23 * &ez3 * b23.transpose() + v22));
    let ey2_inv = checked_inverse(&ey2, "E y2 y2'")?;
    let xi = -(noise_cov.view((0, c_y), (c_y, s - c_y)).into_owned()) * &ey2_inv;

    let o2 = &canon.o2;
    let o2_dagger = if o2.ncols() == 0 {
        DMatrix::zeros(0, s - c_y)
    } else {
        checked_inverse(&(o2.transpose() * &ey2_inv * o2), "O2' Psi^-1 O2")? * o2.transpose() * &ey2_inv
    };
    let g = &canon.gamma32;
    let m3 = m_r - c_r;
    let (gamma32_dagger, p) = if g.ncols() == 0 {
        (DMatrix::zeros(0, m3), DMatrix::identity(m3, m3))
    } else {
        let gd = checked_inverse(&(g.transpose() * &ez3 * g), "Gamma32' S Gamma32")? * g.transpose();
        let p = DMatrix::identity(m3, m3) - &ez3 * g * &gd;
        (gd, p)
    };
    Ok(Projectors { xi, p, o2_dagger, gamma32_dagger, ey2, ez3, ezu, ez3_zu, noise_cov })
}

/// Sign of the `Ξ` block in the fully modified correction: `[-Ξ; I]` as in the
/// conventional case (default) or `[Ξ; I]` as printed for the FM limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XiSign {
    #[default]
    Negative,
    Positive,
}

/// How the covariance of `(Z_r, Z_u)` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZCovariance {
    /// Closed form for all-stationary specs, finite-length proxy otherwise.
    #[default]
    Auto,
    /// `blockdiag(S⁻¹ ⊗ V, (E z̃₂^u z̃₂^u')⁻¹ ⊗ V)` with `V = T_yΛΣΛ'T_y'`.
    ClosedForm,
    /// Sample covariance of the defining finite-T statistics.
    Proxy { t_proxy: usize, reps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitConfig {
    /// Brownian grid size `N`.
    pub grid: usize,
    pub draws: usize,
    pub seed: u64,
    #[serde(default = "default_preprocessing")]
    pub preprocessing: Preprocessing,
    #[serde(default)]
    pub xi_sign: XiSign,
    #[serde(default)]
    pub z_cov: ZCovariance,
}

fn default_preprocessing() -> Preprocessing {
    Preprocessing::None
}

impl LimitConfig {
    pub fn new(grid: usize, draws: usize, seed: u64) -> Self {
        Self { grid, draws, seed, preprocessing: Preprocessing::None, xi_sign: XiSign::Negative, z_cov: ZCovariance::Auto }
    }
}

/// One draw of every limit matrix, all from the same Brownian path.
///
/// `(Z_r, Z_u)` are drawn independently of the path: the stationary sums are
/// asymptotically uncorrelated with the partial-sum process because the
/// stationary regressors have mean zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitDraw<T: Real> {
    pub m_r: DMatrix<T>,
    pub m_u: DMatrix<T>,
    pub n_r: DMatrix<T>,
    pub z_r: DMatrix<T>,
    pub z_u: DMatrix<T>,
    pub m_r_plus: DMatrix<T>,
    pub m_u_plus: DMatrix<T>,
    /// Limit of the scaled RRR-minus-OLS difference in the nonstationary
    /// columns, `s × c_r`.
    pub correction: DMatrix<T>,
    /// Its fully modified counterpart.
    pub correction_plus: DMatrix<T>,
    /// Lower stationary block `-(I - Õ₂Õ₂†) Z̃_{r,2} P`, `(s - c_y) × (m_r - c_r)`.
    pub correction_stationary: DMatrix<T>,
}

impl<T: Real> LimitDraw<T> {
    /// OLS limit in the `z^r` columns, `[M_r, Z_r]`.
    pub fn ols_r(&self) -> DMatrix<T> {
        hcat(&self.m_r, &self.z_r)
    }

    /// OLS limit in the `z^u` columns, `[M_u - M_r N_r, Z_u - Z_r E z̃₃z̃₂^u'(E z̃₂^u z̃₂^u')⁻¹]`.
    pub fn ols_u(&self, proj: &Projectors<T>) -> DMatrix<T> {
        hcat(&(&self.m_u - &self.m_r * &self.n_r), &(&self.z_u - &self.z_r * &proj.ez3_zu))
    }

    /// RRR limit in the nonstationary `z^r` columns.
    pub fn rrr_nonstationary(&self) -> DMatrix<T> {
        &self.m_r + &self.correction
    }

    fn entries(&self) -> [(&'static str, &DMatrix<T>); 10] {
        [
            ("M_r", &self.m_r),
            ("M_u", &self.m_u),
            ("N_r", &self.n_r),
            ("Z_r", &self.z_r),
            ("Z_u", &self.z_u),
            ("M_r_plus", &self.m_r_plus),
            ("M_u_plus", &self.m_u_plus),
            ("correction", &self.correction),
            ("correction_plus", &self.correction_plus),
            ("correction_stationary", &self.correction_stationary),
        ]
    }
}

fn hcat<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitSample<T: Real> {
    pub draws: Vec<LimitDraw<T>>,
    pub projectors: Projectors<T>,
    /// Covariance of `[vec Z_r; vec Z_u]`.
    pub z_cov: DMatrix<T>,
    /// Paths redrawn because a path Gram matrix was singular.
    pub resamples: usize,
}

impl<T: Real> LimitSample<T> {
    /// One row per draw; columns `<name>_<i>_<j>` with 1-based indices.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let Some(first) = self.draws.first() else {
            return out;
        };
        let mut header = Vec::new();
        for (name, m) in first.entries() {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    header.push(format!("{name}_{}_{}", i + 1, j + 1));
                }
            }
        }
        out.push_str(&header.join(","));
        out.push('\n');
        for d in &self.draws {
            let mut row = Vec::with_capacity(header.len());
            for (_, m) in d.entries() {
                for i in 0..m.nrows() {
                    for j in 0..m.ncols() {
                        row.push(m[(i, j)].as_f64().to_string());
                    }
                }
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Everything a draw needs that does not depend on the path.
struct DrawPlan<T: Real> {
    chol_l: DMatrix<T>,
    c_n: DMatrix<T>,
    gain: DMatrix<T>,
    t_y_lambda: DMatrix<T>,
    t_y: DMatrix<T>,
    lambda: DMatrix<T>,
    z_chol: DMatrix<T>,
    o2: DMatrix<T>,
    proj: Projectors<T>,
    s: usize,
    c_y: usize,
    c_r: usize,
    m3: usize,
    mu3: usize,
    c_u: usize,
    cfg: LimitConfig,
}

/// Symmetric PSD square root with negative eigenvalues clipped.
fn psd_root<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let (vals, vecs) = sym_eigen(m);
    let scaled = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |r, c| vecs[(r, c)] * vals[c].max(T::zero()).sqrt());
    scaled * vecs.transpose()
}

/// `vec(AXB)` helper: column-major vectorization.
fn vec_of<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    DVector::from_column_slice(m.as_slice())
}

/// Closed-form covariance of `[vec Z_r; vec Z_u]` under martingale-difference noise.
pub fn z_covariance_closed_form<T: Real>(proj: &Projectors<T>) -> Result<DMatrix<T>, AsymptoticsError> {
    let s = proj.noise_cov.nrows();
    let m3 = proj.ez3.nrows();
    let mu = proj.ezu.nrows();
    let a = if m3 == 0 { DMatrix::zeros(0, 0) } else { checked_inverse(&proj.ez3, "E z3 z3'")? };
    let b = if mu == 0 { DMatrix::zeros(0, 0) } else { checked_inverse(&proj.ezu, "E z2u z2u'")? };
    let dim = s * (m3 + mu);
    let mut out = DMatrix::zeros(dim, dim);
    out.view_mut((0, 0), (s * m3, s * m3)).copy_from(&a.kronecker(&proj.noise_cov));
    out.view_mut((s * m3, s * m3), (s * mu, s * mu)).copy_from(&b.kronecker(&proj.noise_cov));
    Ok(out)
}

/// Finite-sample statistics `√T⟨T_yΛε, z̃₃^π⟩⟨z̃₃^π, z̃₃^π⟩⁻¹` and
/// `√T⟨T_yΛε, z̃₂^u⟩⟨z̃₂^u, z̃₂^u⟩⁻¹` from one simulated sample.
pub fn z_statistics<T: Real>(
    sim: &Simulator<T>,
    canon: &CanonicalForm<T>,
    len: usize,
    seed: u64,
) -> Result<(DMatrix<T>, DMatrix<T>), AsymptoticsError> {
    let spec = sim.spec();
    let sample = sim.run(len, seed)?;
    let zt = sample.z_r.transform(&canon.t_zr);
    let z3 = zt.rows(spec.c_r, spec.m_r - spec.c_r);
    let zu2 = sample.z_u.transform(&canon.t_zu).rows(spec.c_u, spec.m_u - spec.c_u);
    let eps = sample.eps.transform(&(&canon.t_y * &spec.lambda));
    let root_t = T::from_count(len).sqrt();
    let stat = |z: &SeriesMatrix<T>| -> Result<DMatrix<T>, AsymptoticsError> {
        if z.is_empty() {
            return Ok(DMatrix::zeros(spec.s, 0));
        }
        let g = sample_moment(z, z).map_err(EstimatorError::from)?;
        let cross = sample_moment(&eps, z).map_err(EstimatorError::from)?;
        Ok(cross * checked_inverse(&g, "sample Gram")? * root_t)
    };
    let z3_pi = project_out(&z3, &zu2)?;
    Ok((stat(&z3_pi)?, stat(&zu2)?))
}

/// Covariance of `[vec Z_r; vec Z_u]` from `reps` simulations of length `t_proxy`.
pub fn z_covariance_proxy<T: Real>(
    spec: &DgpSpec<T>,
    canon: &CanonicalForm<T>,
    t_proxy: usize,
    reps: usize,
    seed: u64,
) -> Result<DMatrix<T>, AsymptoticsError> {
    let sim = Simulator::new(spec)?;
    let vecs: Vec<DVector<T>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let (zr, zu) = z_statistics(&sim, canon, t_proxy, seed ^ PROXY_STREAM ^ r as u64)?;
            let mut v = vec_of(&zr).as_slice().to_vec();
            v.extend_from_slice(vec_of(&zu).as_slice());
            Ok(DVector::from_vec(v))
        })
        .collect::<Result<_, AsymptoticsError>>()?;
    let dim = vecs.first().map(|v| v.len()).unwrap_or(0);
    let mut mean = DVector::zeros(dim);
    for v in &vecs {
        mean += v;
    }
    mean /= T::from_count(reps.max(1));
    let mut cov = DMatrix::zeros(dim, dim);
    for v in &vecs {
        let d = v - &mean;
        cov += &d * d.transpose();
    }
    Ok(symmetrize(&(cov / T::from_count(reps.saturating_sub(1).max(1)))))
}

fn build_plan<T: Real>(spec: &DgpSpec<T>, canon: &CanonicalForm<T>, cfg: &LimitConfig) -> Result<DrawPlan<T>, AsymptoticsError> {
    if cfg.grid < MIN_GRID {
        return Err(AsymptoticsError::GridTooSmall(cfg.grid));
    }
    let chol = Cholesky::new(symmetrize(&spec.sigma)).ok_or(AsymptoticsError::CovNotPositiveDefinite)?;
    let c_n = nonstationary_loadings(spec, canon)?;
    let gain = fm_gain(spec, &c_n)?;
    let proj = correction_projectors(spec, canon)?;
    let stationary = spec.c_r == 0 && spec.c_u == 0;
    let z_cov = match cfg.z_cov {
        ZCovariance::ClosedForm => z_covariance_closed_form(&proj)?,
        ZCovariance::Auto if stationary => z_covariance_closed_form(&proj)?,
        ZCovariance::Auto => z_covariance_proxy(spec, canon, DEFAULT_T_PROXY, DEFAULT_PROXY_REPS, cfg.seed)?,
        ZCovariance::Proxy { t_proxy, reps } => z_covariance_proxy(spec, canon, t_proxy, reps, cfg.seed)?,
    };
    Ok(DrawPlan {
        chol_l: chol.l(),
        c_n,
        gain,
        t_y_lambda: &canon.t_y * &spec.lambda,
        t_y: canon.t_y.clone(),
        lambda: spec.lambda.clone(),
        z_chol: psd_root(&z_cov),
        o2: canon.o2.clone(),
        proj,
        s: spec.s,
        c_y: canon.c_y,
        c_r: spec.c_r,
        m3: spec.m_r - spec.c_r,
        mu3: spec.m_u - spec.c_u,
        c_u: spec.c_u,
        cfg: *cfg,
    })
}

impl<T: Real> DrawPlan<T> {
    /// Correction in the nonstationary columns for integrator `e` (already in
    /// canonical `y` coordinates) and the projected regressor path.
    fn correction(&self, e: &DMatrix<T>, wz_pi: &DMatrix<T>, xi_sign: XiSign) -> Result<DMatrix<T>, AsymptoticsError> {
        let (s, c_y, c_r) = (self.s, self.c_y, self.c_r);
        let c2 = c_r - c_y;
        if c2 == 0 {
            return Ok(DMatrix::zeros(s, c_r));
        }
        let w1 = wz_pi.rows(0, c_y).into_owned();
        let w2 = wz_pi.rows(c_y, c2).into_owned();
        let link = if c_y == 0 { DMatrix::zeros(c2, 0) } else { path_cross(&w2, &w1)? * path_gram_inverse(&w1)? };
        let w21 = &w2 - &link * &w1;
        let e2 = e.rows(c_y, s - c_y).into_owned();
        let m2 = functional_f(&e2, &w21)?;
        let mut left = DMatrix::zeros(s, s - c_y);
        let xi = match xi_sign {
            XiSign::Negative => -&self.proj.xi,
            XiSign::Positive => self.proj.xi.clone(),
        };
        left.rows_mut(0, c_y).copy_from(&xi);
        left.rows_mut(c_y, s - c_y).fill_with_identity();
        let mut right = DMatrix::zeros(c2, c_r);
        right.columns_mut(0, c_y).copy_from(&(-link));
        right.columns_mut(c_y, c2).fill_with_identity();
        Ok(-(left * self.proj.o2_complement(&self.o2) * m2 * right))
    }

    fn draw_once(&self, rng: &mut ChaCha8Rng) -> Result<LimitDraw<T>, AsymptoticsError> {
        let w = brownian_from_rng(&self.chol_l, self.cfg.grid, rng);
        let wn_raw = &self.c_n * &w;
        let wn = adjust_path(&wn_raw, self.cfg.preprocessing);
        let wz = wn.rows(0, self.c_r).into_owned();
        let wu = wn.rows(self.c_r, self.c_u).into_owned();
        let n_r = if self.c_u == 0 || self.c_r == 0 {
            DMatrix::zeros(self.c_r, self.c_u)
        } else {
            path_cross(&wz, &wu)? * path_gram_inverse(&wu)?
        };
        let wz_pi = project_path(&wz, &wu)?;
        let e = &self.t_y_lambda * &w;
        let b = &self.t_y * (&self.lambda * &w - &self.gain * &wn_raw);

        let dim = self.z_chol.nrows();
        let normals = DVector::from_fn(dim, |_, _| {
            let x: f64 = StandardNormal.sample(rng);
            T::lit(x)
        });
        let zv = &self.z_chol * normals;
        let split = self.s * self.m3;
        let z_r = DMatrix::from_column_slice(self.s, self.m3, &zv.as_slice()[..split]);
        let z_u = DMatrix::from_column_slice(self.s, self.mu3, &zv.as_slice()[split..]);
        let z_r2 = z_r.rows(self.c_y, self.s - self.c_y).into_owned();
        let correction_stationary = -(self.proj.o2_complement(&self.o2) * z_r2 * &self.proj.p);

        Ok(LimitDraw {
            m_r: functional_f(&e, &wz_pi)?,
            m_u: functional_f(&e, &wu)?,
            m_r_plus: functional_f(&b, &wz_pi)?,
            m_u_plus: functional_f(&b, &wu)?,
            correction: self.correction(&e, &wz_pi, XiSign::Negative)?,
            correction_plus: self.correction(&b, &wz_pi, self.cfg.xi_sign)?,
            correction_stationary,
            n_r,
            z_r,
            z_u,
        })
    }

    /// Draw `r`, redrawing from the same stream while a path Gram is singular.
    fn draw(&self, r: usize) -> Result<(LimitDraw<T>, usize), AsymptoticsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ r as u64);
        for attempt in 0..=MAX_RESAMPLES {
            match self.draw_once(&mut rng) {
                Ok(d) => return Ok((d, attempt)),
                Err(AsymptoticsError::SingularGram { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(AsymptoticsError::ResampleBudget(MAX_RESAMPLES))
    }
}

/// Draws of every limit matrix; draw `r` uses seed `cfg.seed ^ r`.
pub fn limit_sampler<T: Real>(spec: &DgpSpec<T>, canon: &CanonicalForm<T>, cfg: &LimitConfig) -> Result<LimitSample<T>, AsymptoticsError> {
    let plan = build_plan(spec, canon, cfg)?;
    let results: Vec<(LimitDraw<T>, usize)> = (0..cfg.draws).into_par_iter().map(|r| plan.draw(r)).collect::<Result<_, _>>()?;
    let resamples = results.iter().map(|(_, k)| k).sum();
    let z_cov = &plan.z_chol * &plan.z_chol;
    Ok(LimitSample { draws: results.into_iter().map(|(d, _)| d).collect(), projectors: plan.proj, z_cov, resamples })
}

/// Conventional limit draws (`M_r`, `M_u`, `N_r`, `Z_r`, `Z_u` and the RRR correction).
pub fn limit_sampler_ols<T: Real>(
    spec: &DgpSpec<T>,
    canon: &CanonicalForm<T>,
    cfg: &LimitConfig,
) -> Result<LimitSample<T>, AsymptoticsError> {
    limit_sampler(spec, canon, cfg)
}

/// `(M_r⁺, M_u⁺)` for one draw.
pub type FmDraw<T> = (DMatrix<T>, DMatrix<T>);

/// `(M_r⁺, M_u⁺)` per draw; matched with [`limit_sampler_ols`] under equal seeds.
pub fn limit_sampler_fm<T: Real>(
    spec: &DgpSpec<T>,
    canon: &CanonicalForm<T>,
    cfg: &LimitConfig,
) -> Result<Vec<FmDraw<T>>, AsymptoticsError> {
    Ok(limit_sampler(spec, canon, cfg)?.draws.into_iter().map(|d| (d.m_r_plus, d.m_u_plus)).collect())
}

/// Finite-length proxy for the full rank-restriction correction:
/// `T_y(β̂_RRR,r - β̂_OLS,r)T_zr⁻¹D_{z,r}⁻¹` at length `t_proxy`, one matrix
/// per replication. Its upper stationary block stands in for `-R̃`.
pub fn correction_proxy<T: Real>(spec: &DgpSpec<T>, t_proxy: usize, reps: usize, seed: u64) -> Result<Vec<DMatrix<T>>, AsymptoticsError> {
    let canon = canonical_form(spec)?;
    let sim = Simulator::new(spec)?;
    let sc = scaling(&canon, spec, t_proxy)?;
    let d_inv = checked_inverse(&sc.d_zr, "D_zr")?;
    let t_zr_inv = canon.t_zr_inv();
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let sample = sim.run(t_proxy, seed ^ PROXY_STREAM ^ r as u64)?;
            let rs = RegressionSample::new(sample.y, sample.z_r, sample.z_u, Preprocessing::None)?;
            let diff = rrr(&rs, spec.n)?.beta_r - ols(&rs)?.beta_r;
            Ok(&canon.t_y * diff * &t_zr_inv * &d_inv)
        })
        .collect()
}
