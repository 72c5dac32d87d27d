// Test-only oracles and fixtures. Shared by unit tests and (via `#[path]`) by
// the integration tests, so it must only depend on external crates.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_7e57);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

pub fn random_spd(dim: usize, seed: u64) -> DMatrix<f64> {
    let b = random_matrix(dim, dim, seed);
    &b * b.transpose() + DMatrix::identity(dim, dim) * 0.5
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix; eigenvalues
/// sorted nonincreasing, eigenvectors as columns.
pub fn jacobi_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() < 1e-15 * (a.norm() + 1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap());
    let vals = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let vecs = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (vals, vecs)
}

/// Singular values (nonincreasing) from the Jacobi eigenvalues of the smaller
/// Gram matrix.
pub fn jacobi_singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let gram = if a.nrows() <= a.ncols() { a * a.transpose() } else { a.transpose() * a };
    let (vals, _) = jacobi_eigen(&gram);
    vals.iter().map(|x| x.max(0.0).sqrt()).collect()
}

/// Two-sample Kolmogorov–Smirnov distance computed by brute force over the
/// pooled sample.
pub fn ks_brute(a: &[f64], b: &[f64]) -> f64 {
    let cdf = |xs: &[f64], x: f64| xs.iter().filter(|&&v| v <= x).count() as f64 / xs.len() as f64;
    a.iter().chain(b.iter()).map(|&x| (cdf(a, x) - cdf(b, x)).abs()).fold(0.0, f64::max)
}
