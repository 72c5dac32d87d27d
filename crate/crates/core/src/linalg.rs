//! Dense matrix utilities: symmetric roots, Gram factors, truncated SVD, the
//! symmetric-definite generalized eigenproblem, weighted pseudo-inverses and
//! partitioned inversion.
//!
//! Every "nonsingular" gate in this module compares a 2-norm condition number
//! against [`COND_LIMIT`]. Singular vectors and eigenvectors are sign
//! normalized so that the entry of largest magnitude in each column (the first
//! one on ties) is positive.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::scalar::Real;

/// Relative asymmetry tolerated by symmetric routines.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Condition-number ceiling for every invertibility check.
pub const COND_LIMIT: f64 = 1e12;
/// Relative singular-value gap under which a truncation is flagged degenerate.
pub const DEGENERATE_GAP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not symmetric (asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("requested rank {requested} outside 1..={max}")]
    RankTooLarge { requested: usize, max: usize },
    #[error("singular value {index} is numerically zero")]
    ZeroSingularValue { index: usize },
    #[error("weighted normal matrix O'W^2O is singular (condition {cond:e})")]
    SingularNormalMatrix { cond: f64 },
    #[error("leading block is singular (condition {cond:e})")]
    SingularBlock { cond: f64 },
    #[error("Schur complement is singular (condition {cond:e})")]
    SingularSchurComplement { cond: f64 },
    #[error("matrix is singular (condition {cond:e})")]
    Singular { cond: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("transition matrix is not stable (spectral radius {radius})")]
    Unstable { radius: f64 },
}

pub type LinalgResult<T> = Result<T, LinalgError>;

/// Largest absolute entry (0 for an empty matrix).
pub fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

fn check_square<T: Real>(m: &DMatrix<T>, what: &str) -> LinalgResult<()> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::DimensionMismatch(format!("{what} must be square, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(())
}

pub fn check_symmetric<T: Real>(m: &DMatrix<T>) -> LinalgResult<()> {
    check_square(m, "symmetric matrix")?;
    let asym = max_abs(&(m - m.transpose()));
    let scale = m.norm();
    if asym > T::lit(SYMMETRY_TOL) * scale {
        return Err(LinalgError::NotSymmetric { asymmetry: asym.as_f64() });
    }
    Ok(())
}

pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// nonincreasing order.
pub fn sym_eigen<T: Real>(m: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let n = m.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let eig = symmetrize(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap_or(std::cmp::Ordering::Equal));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Applies `f` to the spectrum of a symmetric positive-definite matrix.
fn spd_spectral_map<T: Real>(m: &DMatrix<T>, f: impl Fn(T) -> T) -> LinalgResult<DMatrix<T>> {
    check_symmetric(m)?;
    let (vals, vecs) = sym_eigen(m);
    if let Some(min) = vals.iter().copied().reduce(|a, b| a.min(b)) {
        if min <= T::zero() {
            return Err(LinalgError::NotPositiveDefinite { min_eigenvalue: min.as_f64() });
        }
    }
    let scaled = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |r, c| vecs[(r, c)] * f(vals[c]));
    Ok(symmetrize(&(scaled * vecs.transpose())))
}

/// Symmetric square root `S` with `S S = M`.
pub fn sym_sqrt<T: Real>(m: &DMatrix<T>) -> LinalgResult<DMatrix<T>> {
    spd_spectral_map(m, |x| x.sqrt())
}

/// Symmetric inverse square root `M^{-1/2}`.
pub fn sym_inv_sqrt<T: Real>(m: &DMatrix<T>) -> LinalgResult<DMatrix<T>> {
    spd_spectral_map(m, |x| T::one() / x.sqrt())
}

/// Which factor [`gram_factor`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramFactor {
    /// `M^{-1/2}`, symmetric.
    #[default]
    Symmetric,
    /// `L^{-T}` for the Cholesky factor `M = L L'` (upper triangular).
    Triangular,
}

/// Returns `W` with `W W' = M^{-1}` under the requested convention.
pub fn gram_factor<T: Real>(m: &DMatrix<T>, convention: GramFactor) -> LinalgResult<DMatrix<T>> {
    match convention {
        GramFactor::Symmetric => sym_inv_sqrt(m),
        GramFactor::Triangular => {
            check_symmetric(m)?;
            let n = m.nrows();
            let chol = symmetrize(m).cholesky().ok_or_else(|| {
                let (vals, _) = sym_eigen(m);
                LinalgError::NotPositiveDefinite { min_eigenvalue: vals.iter().copied().fold(T::zero(), |a, b| a.min(b)).as_f64() }
            })?;
            let l = chol.l();
            let l_inv = l.solve_lower_triangular(&DMatrix::identity(n, n)).ok_or(LinalgError::Singular { cond: f64::INFINITY })?;
            Ok(l_inv.transpose())
        }
    }
}

/// Thin SVD `(U, σ, V)` with singular values nonincreasing and the sign
/// convention applied to every column of `U`.
pub fn svd_sorted<T: Real>(a: &DMatrix<T>) -> (DMatrix<T>, DVector<T>, DMatrix<T>) {
    sorted_svd(a)
}

/// `[Q, Q_⊥]`: extends orthonormal columns to an orthogonal matrix.
pub fn complete_basis<T: Real>(q: &DMatrix<T>) -> DMatrix<T> {
    let rows = q.nrows();
    if q.ncols() == 0 {
        return DMatrix::identity(rows, rows);
    }
    let perp = orth_complement(q, 1e-10);
    let mut out = DMatrix::zeros(rows, q.ncols() + perp.ncols());
    out.columns_mut(0, q.ncols()).copy_from(q);
    out.columns_mut(q.ncols(), perp.ncols()).copy_from(&perp);
    out
}

fn sorted_svd<T: Real>(a: &DMatrix<T>) -> (DMatrix<T>, DVector<T>, DMatrix<T>) {
    let k = a.nrows().min(a.ncols());
    if k == 0 {
        return (DMatrix::zeros(a.nrows(), 0), DVector::zeros(0), DMatrix::zeros(a.ncols(), 0));
    }
    let (u, sv, v) = if a.nrows() >= a.ncols() {
        jacobi_svd(a)
    } else {
        let (v, sv, u) = jacobi_svd(&a.transpose());
        (u, sv, v)
    };
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| sv[y].partial_cmp(&sv[x]).unwrap_or(std::cmp::Ordering::Equal));
    let s = DVector::from_iterator(k, order.iter().map(|&i| sv[i]));
    let mut u_sorted = DMatrix::from_fn(a.nrows(), k, |r, c| u[(r, order[c])]);
    let mut v_sorted = DMatrix::from_fn(a.ncols(), k, |r, c| v[(r, order[c])]);
    for c in 0..k {
        if leading_entry_negative(&u_sorted.column(c)) {
            u_sorted.column_mut(c).neg_mut();
            v_sorted.column_mut(c).neg_mut();
        }
    }
    (u_sorted, s, v_sorted)
}

/// One-sided (Hestenes) Jacobi SVD of a tall matrix. nalgebra's bidiagonal
/// SVD loses accuracy on rank-deficient inputs, which the canonical form and
/// every rank truncation produce routinely.
fn jacobi_svd<T: Real>(a: &DMatrix<T>) -> (DMatrix<T>, DVector<T>, DMatrix<T>) {
    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut v = DMatrix::<T>::identity(n, n);
    let eps = T::default_epsilon();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (T::zero(), T::zero(), T::zero());
                for i in 0..m {
                    alpha += w[(i, p)] * w[(i, p)];
                    beta += w[(i, q)] * w[(i, q)];
                    gamma += w[(i, p)] * w[(i, q)];
                }
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let sign = if zeta >= T::zero() { T::one() } else { -T::one() };
                let t = sign / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (w[(i, p)], w[(i, q)]);
                    w[(i, p)] = c * x - s * y;
                    w[(i, q)] = s * x + c * y;
                }
                for i in 0..n {
                    let (x, y) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * x - s * y;
                    v[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sv = DVector::from_fn(n, |j, _| w.column(j).norm());
    let max = sv.iter().copied().fold(T::zero(), |x, y| x.max(y));
    let floor = max * eps * T::from_count(m.max(n));
    let mut u = DMatrix::<T>::zeros(m, n);
    let mut kept = Vec::new();
    for j in 0..n {
        if sv[j] > floor {
            u.set_column(j, &(w.column(j) / sv[j]));
            kept.push(j);
        }
    }
    if kept.len() < n {
        // left vectors of (numerically) zero singular values: any orthonormal
        // completion of the others
        let basis = u.select_columns(kept.iter());
        let completion = if basis.ncols() == 0 {
            DMatrix::identity(m, m)
        } else {
            let projector = DMatrix::identity(m, m) - &basis * basis.transpose();
            let (vals, vecs) = sym_eigen(&projector);
            let keep = vals.iter().filter(|&&x| x > T::lit(0.5)).count();
            vecs.columns(0, keep).into_owned()
        };
        let mut next = 0;
        for j in 0..n {
            if !kept.contains(&j) {
                u.set_column(j, &completion.column(next));
                next += 1;
            }
        }
    }
    (u, sv, v)
}

fn leading_entry_negative<T: Real, S>(col: &nalgebra::Matrix<T, nalgebra::Dyn, nalgebra::U1, S>) -> bool
where
    S: nalgebra::storage::Storage<T, nalgebra::Dyn, nalgebra::U1>,
{
    let mut best = T::zero();
    let mut sign_negative = false;
    for x in col.iter() {
        if x.abs() > best {
            best = x.abs();
            sign_negative = *x < T::zero();
        }
    }
    sign_negative
}

/// Singular values in nonincreasing order.
pub fn singular_values<T: Real>(a: &DMatrix<T>) -> DVector<T> {
    if a.is_empty() {
        return DVector::zeros(0);
    }
    sorted_svd(a).1
}

/// 2-norm condition number; infinite for a numerically singular matrix and 1
/// for an empty one.
pub fn condition_number<T: Real>(m: &DMatrix<T>) -> f64 {
    let s = singular_values(m);
    if s.is_empty() {
        return 1.0;
    }
    let max = s[0].as_f64();
    let min = s[s.len() - 1].as_f64();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a square matrix with condition number below [`COND_LIMIT`].
pub fn inverse<T: Real>(m: &DMatrix<T>) -> LinalgResult<DMatrix<T>> {
    check_square(m, "inverted matrix")?;
    if m.is_empty() {
        return Ok(m.clone());
    }
    let cond = condition_number(m);
    if !(cond < COND_LIMIT) {
        return Err(LinalgError::Singular { cond });
    }
    m.clone().lu().try_inverse().ok_or(LinalgError::Singular { cond: f64::INFINITY })
}

/// Best rank-`n` approximation `U_n S_n V_n' + R_n` of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd<T: Real> {
    /// Leading left singular vectors (rows × n).
    pub u: DMatrix<T>,
    /// Leading singular values, nonincreasing.
    pub s: DVector<T>,
    /// Leading right singular vectors (cols × n).
    pub v: DMatrix<T>,
    /// Approximation error `A - U_n S_n V_n'`.
    pub residual: DMatrix<T>,
    /// Full singular spectrum of the input.
    pub spectrum: DVector<T>,
    /// Set when `σ_n - σ_{n+1} < 1e-12 σ_1`: the truncation is not unique.
    pub degenerate: bool,
}

impl<T: Real> TruncatedSvd<T> {
    pub fn s_matrix(&self) -> DMatrix<T> {
        DMatrix::from_diagonal(&self.s)
    }

    /// `U_n S_n V_n'`.
    pub fn approximation(&self) -> DMatrix<T> {
        &self.u * self.s_matrix() * self.v.transpose()
    }
}

pub fn truncated_svd<T: Real>(a: &DMatrix<T>, n: usize) -> LinalgResult<TruncatedSvd<T>> {
    let max = a.nrows().min(a.ncols());
    if n == 0 || n > max {
        return Err(LinalgError::RankTooLarge { requested: n, max });
    }
    let (u, s, v) = sorted_svd(a);
    let tiny = s[0] * T::lit(f64::EPSILON) * T::from_count(a.nrows().max(a.ncols()));
    if s[n - 1] <= tiny {
        return Err(LinalgError::ZeroSingularValue { index: n });
    }
    let degenerate = n < max && (s[n - 1] - s[n]) < T::lit(DEGENERATE_GAP) * s[0];
    let u_n = u.columns(0, n).into_owned();
    let v_n = v.columns(0, n).into_owned();
    let s_n = s.rows(0, n).into_owned();
    let approx = &u_n * DMatrix::from_diagonal(&s_n) * v_n.transpose();
    Ok(TruncatedSvd { residual: a - approx, u: u_n, s: s_n, v: v_n, spectrum: s, degenerate })
}

/// Leading solutions of `Q v = λ M v`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenEig<T: Real> {
    /// Eigenvalues, nonincreasing.
    pub values: DVector<T>,
    /// `M`-orthonormal eigenvectors as columns.
    pub vectors: DMatrix<T>,
}

/// The `n` largest generalized eigenpairs of the symmetric-definite pencil
/// `(Q, M)`, computed by Cholesky reduction to a standard symmetric problem.
pub fn gen_eig_sym<T: Real>(q: &DMatrix<T>, m: &DMatrix<T>, n: usize) -> LinalgResult<GenEig<T>> {
    check_symmetric(q)?;
    check_symmetric(m)?;
    let dim = m.nrows();
    if q.nrows() != dim {
        return Err(LinalgError::DimensionMismatch(format!("pencil dimensions {} and {}", q.nrows(), dim)));
    }
    if n == 0 || n > dim {
        return Err(LinalgError::RankTooLarge { requested: n, max: dim });
    }
    let chol = symmetrize(m).cholesky().ok_or_else(|| {
        let (vals, _) = sym_eigen(m);
        LinalgError::NotPositiveDefinite { min_eigenvalue: vals[dim - 1].as_f64() }
    })?;
    let l = chol.l();
    let lq = l.solve_lower_triangular(&symmetrize(q)).ok_or(LinalgError::Singular { cond: f64::INFINITY })?;
    let reduced = l.solve_lower_triangular(&lq.transpose()).ok_or(LinalgError::Singular { cond: f64::INFINITY })?;
    let (vals, vecs) = sym_eigen(&reduced);
    let lead = vecs.columns(0, n).into_owned();
    let mut vectors = l.transpose().solve_upper_triangular(&lead).ok_or(LinalgError::Singular { cond: f64::INFINITY })?;
    for c in 0..n {
        if leading_entry_negative(&vectors.column(c)) {
            vectors.column_mut(c).neg_mut();
        }
    }
    Ok(GenEig { values: vals.rows(0, n).into_owned(), vectors })
}

/// Weighted pseudo-inverse `(O' W'W O)^{-1} O' W'W`.
///
/// The weight enters through `W'W`, which is `W²` for the symmetric weights
/// used by the estimators and keeps the result a left inverse of `O` for any
/// nonsingular `W`.
pub fn weighted_pinv<T: Real>(o: &DMatrix<T>, w: &DMatrix<T>) -> LinalgResult<DMatrix<T>> {
    check_square(w, "weight")?;
    if w.nrows() != o.nrows() {
        return Err(LinalgError::DimensionMismatch(format!("weight is {}x{} but factor has {} rows", w.nrows(), w.ncols(), o.nrows())));
    }
    let g = w.transpose() * w;
    let normal = o.transpose() * &g * o;
    let cond = condition_number(&normal);
    if !(cond < COND_LIMIT) {
        return Err(LinalgError::SingularNormalMatrix { cond });
    }
    let inv = inverse(&normal).map_err(|_| LinalgError::SingularNormalMatrix { cond })?;
    Ok(inv * o.transpose() * g)
}

/// Inverse of the partitioned matrix `[[A, B], [C, D]]` assembled as
/// `diag(A^{-1}, 0) + [-A^{-1}B; I] (D - C A^{-1} B)^{-1} [-C A^{-1}, I]`.
pub fn block_inverse<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, c: &DMatrix<T>, d: &DMatrix<T>) -> LinalgResult<DMatrix<T>> {
    check_square(a, "block A")?;
    check_square(d, "block D")?;
    let (p, q) = (a.nrows(), d.nrows());
    if b.shape() != (p, q) || c.shape() != (q, p) {
        return Err(LinalgError::DimensionMismatch(format!(
            "blocks B {:?} and C {:?} do not fit A {p}x{p}, D {q}x{q}",
            b.shape(),
            c.shape()
        )));
    }
    let a_cond = condition_number(a);
    if !(a_cond < COND_LIMIT) {
        return Err(LinalgError::SingularBlock { cond: a_cond });
    }
    let a_inv = inverse(a).map_err(|_| LinalgError::SingularBlock { cond: a_cond })?;
    let schur = d - c * &a_inv * b;
    let s_cond = condition_number(&schur);
    if !(s_cond < COND_LIMIT) {
        return Err(LinalgError::SingularSchurComplement { cond: s_cond });
    }
    let schur_inv = inverse(&schur).map_err(|_| LinalgError::SingularSchurComplement { cond: s_cond })?;

    let mut left = DMatrix::zeros(p + q, q);
    left.view_mut((0, 0), (p, q)).copy_from(&(-(&a_inv * b)));
    left.view_mut((p, 0), (q, q)).fill_with_identity();
    let mut right = DMatrix::zeros(q, p + q);
    right.view_mut((0, 0), (q, p)).copy_from(&(-(c * &a_inv)));
    right.view_mut((0, p), (q, q)).fill_with_identity();

    let mut out = left * schur_inv * right;
    let mut tl = out.view_mut((0, 0), (p, p));
    tl += &a_inv;
    Ok(out)
}

/// Orthonormal basis of the column space, using singular values above
/// `rel_tol * σ_1`.
pub fn orth<T: Real>(a: &DMatrix<T>, rel_tol: f64) -> DMatrix<T> {
    let (u, s, _) = sorted_svd(a);
    if s.is_empty() || s[0] <= T::zero() {
        return DMatrix::zeros(a.nrows(), 0);
    }
    let rank = s.iter().filter(|&&x| x > T::lit(rel_tol) * s[0]).count();
    u.columns(0, rank).into_owned()
}

/// Orthonormal basis of the orthogonal complement of the column space.
pub fn orth_complement<T: Real>(a: &DMatrix<T>, rel_tol: f64) -> DMatrix<T> {
    let rows = a.nrows();
    let basis = orth(a, rel_tol);
    let projector = DMatrix::identity(rows, rows) - &basis * basis.transpose();
    let (vals, vecs) = sym_eigen(&projector);
    let keep = vals.iter().filter(|&&x| x > T::lit(0.5)).count();
    vecs.columns(0, keep).into_owned()
}

/// Largest eigenvalue modulus of a square matrix (0 when empty).
pub fn spectral_radius<T: Real>(m: &DMatrix<T>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let m64 = m.map(|x| x.as_f64());
    m64.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Solves `P = F P F' + Q` by the doubling recursion; `F` must be stable.
pub fn discrete_lyapunov<T: Real>(f: &DMatrix<T>, q: &DMatrix<T>) -> LinalgResult<DMatrix<T>> {
    check_square(f, "transition matrix")?;
    let radius = spectral_radius(f);
    if !(radius < 1.0) {
        return Err(LinalgError::Unstable { radius });
    }
    let mut p = symmetrize(q);
    let mut a = f.clone();
    for _ in 0..200 {
        let step = &a * &p * a.transpose();
        let scale = max_abs(&p).max(T::one());
        p += &step;
        a = &a * &a;
        if max_abs(&step) <= T::lit(1e-17) * scale && max_abs(&a) <= T::lit(1e-17) {
            break;
        }
    }
    Ok(symmetrize(&p))
}

/// Sines of the principal angles between two column spaces, largest first.
pub fn principal_angle_sines<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> DVector<T> {
    let qa = orth(a, 1e-12);
    let qb = orth(b, 1e-12);
    let rows = qa.nrows();
    let residual = (DMatrix::identity(rows, rows) - &qa * qa.transpose()) * qb;
    singular_values(&residual)
}
