//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rankreg::asymptotics::{correction_projectors, functional_f, limit_sampler, LimitConfig};
use rankreg::cli::{anderson_spec, cy_positive_spec, johansen_spec, stationary_spec};
use rankreg::covest::{kernel_weight, Kernel, KernelConfig};
use rankreg::dgp::{canonical_form, make_anderson_var1, Preprocessing};
use rankreg::estimators::{normalize_factors, rrr_geneig, Method};
use rankreg::linalg::block_inverse;
use rankreg::mc::{
    ks_distance, run_dist_experiment, run_identity_checks, run_matched_comparison, run_rate_experiment, Block, ExperimentConfig,
    ExperimentKind, McResult, SpecConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn config(
    id: &str,
    kind: ExperimentKind,
    spec: SpecConfig,
    estimators: &[Method],
    t_grid: &[usize],
    reps: usize,
    seed: u64,
) -> ExperimentConfig {
    ExperimentConfig {
        id: id.into(),
        kind,
        spec,
        estimators: estimators.to_vec(),
        n: None,
        t_grid: t_grid.to_vec(),
        reps,
        seed,
        kernel: KernelConfig::default(),
        preprocessing: Preprocessing::None,
        limit_grid_n: 1000,
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = gaussian(d, d, rng);
    &a * a.transpose() + DMatrix::identity(d, d) * 0.5
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

fn criterion_1() -> Outcome {
    use Method::{FmOls, FmRrr, Ols, Rrr};
    let specs = [
        ("stationary", stationary_spec()),
        ("cy-positive", cy_positive_spec()),
        ("johansen", johansen_spec()),
        ("anderson", anderson_spec()),
    ];
    let mut notes = Vec::new();
    let mut pass = true;
    for (k, (name, spec)) in specs.into_iter().enumerate() {
        let cfg = config(name, ExperimentKind::Identity, spec, &[Ols, Rrr, FmOls, FmRrr], &[200, 400], 50, 100 + k as u64);
        match run_identity_checks(&cfg) {
            Ok(res) => {
                for id in &res.identities {
                    if id.skipped {
                        continue;
                    }
                    let ok = id.passed && id.max_residual.is_some_and(|r| r <= id.threshold);
                    pass &= ok;
                    if !ok {
                        notes.push(format!("{name} {} {:?} > {:e}", id.check, id.max_residual, id.threshold));
                    }
                }
            }
            Err(e) => {
                pass = false;
                notes.push(format!("{name}: {e}"));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_block = 0.0f64;
    for (p, q) in [(1, 1), (2, 3), (3, 2), (4, 4)] {
        let d = p + q;
        let m = gaussian(d, d, &mut rng) + DMatrix::identity(d, d) * (2.0 * d as f64);
        let inv = block_inverse(
            &m.view((0, 0), (p, p)).into_owned(),
            &m.view((0, p), (p, q)).into_owned(),
            &m.view((p, 0), (q, p)).into_owned(),
            &m.view((p, p), (q, q)).into_owned(),
        );
        match inv {
            Ok(inv) => worst_block = worst_block.max(max_abs(&(inv - m.clone().try_inverse().unwrap()))),
            Err(_) => worst_block = f64::INFINITY,
        }
    }
    let mut worst_norm = 0.0f64;
    for (s, m, n) in [(3, 3, 1), (4, 3, 2), (5, 4, 3), (2, 5, 2)] {
        let o = gaussian(s, n, &mut rng);
        let g = gaussian(m, n, &mut rng);
        match normalize_factors(&o, &g) {
            Ok(f) => worst_norm = worst_norm.max(max_abs(&(&f.o * f.gamma.transpose() - &o * g.transpose()))),
            Err(_) => worst_norm = f64::INFINITY,
        }
    }
    pass &= worst_block <= 1e-10 && worst_norm <= 1e-12;
    notes.push(format!("block_inverse {worst_block:.1e}, normalize_factors {worst_norm:.1e}"));
    outcome(pass, notes.join("; "))
}

fn criterion_2() -> Outcome {
    let w = |x: f64| kernel_weight(x, Kernel::Quartic);
    let h = 1e-4;
    let d1 = (w(h) - w(-h)) / (2.0 * h);
    let d2 = (w(h) - 2.0 * w(0.0) + w(-h)) / (h * h);
    let mut pass = w(0.0) == 1.0 && d1.abs() < 1e-6 && (d2 + 4.0).abs() <= 1e-4;
    let mut boundary = Vec::new();
    for k in 3..=6 {
        let x = 1.0 - 10f64.powi(-k);
        let ratio = w(x) / (1.0 - x).powi(2);
        let ok = (ratio - 4.0).abs() <= 1e-3;
        pass &= ok;
        boundary.push(format!("k={k}: {ratio:.6}{}", if ok { "" } else { " (out)" }));
    }
    outcome(pass, format!("w(0)={}, w'(0)={d1:.1e}, w''(0)={d2:.6}, {}", w(0.0), boundary.join(", ")))
}

/// Symmetric eigen-decomposition by cyclic Jacobi rotations, descending eigenvalues.
fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::identity(n, n);
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off < 1e-30 {
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
                let mut rot = DMatrix::identity(n, n);
                rot[(p, p)] = c;
                rot[(q, q)] = c;
                rot[(p, q)] = s;
                rot[(q, p)] = -s;
                a = rot.transpose() * &a * &rot;
                v = &v * &rot;
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let vals = order.iter().map(|&i| a[(i, i)]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (vals, vecs)
}

/// Textbook Johansen: concentrate out lagged differences, then solve
/// `|λ S11 − S10 S00^{-1} S01| = 0` and keep the leading eigenvectors.
fn johansen_beta(dx: &DMatrix<f64>, x_lag: &DMatrix<f64>, dx_lag: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let resid = |a: &DMatrix<f64>| -> DMatrix<f64> {
        if dx_lag.nrows() == 0 {
            return a.clone();
        }
        let coef = (a * dx_lag.transpose()) * (dx_lag * dx_lag.transpose()).try_inverse().unwrap();
        a - coef * dx_lag
    };
    let r0 = resid(dx);
    let r1 = resid(x_lag);
    let t = dx.ncols() as f64;
    let s00 = &r0 * r0.transpose() / t;
    let s01 = &r0 * r1.transpose() / t;
    let s11 = &r1 * r1.transpose() / t;
    let l = s11.cholesky().unwrap().l();
    let l_inv = l.try_inverse().unwrap();
    let c = &l_inv * s01.transpose() * s00.try_inverse().unwrap() * &s01 * l_inv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let (_, vecs) = jacobi_eigen(&c);
    l_inv.transpose() * vecs.columns(0, n)
}

/// Frobenius norm of the part of span(b) outside span(a); bounds the largest principal angle sine.
fn subspace_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    (&qb - &qa * (qa.transpose() * &qb)).norm()
}

fn criterion_3() -> Outcome {
    let cfg = config("johansen-oracle", ExperimentKind::Identity, johansen_spec(), &[Method::Rrr], &[400], 50, 0);
    let setup = match cfg.validate() {
        Ok(s) => s,
        Err(e) => return outcome(false, e.to_string()),
    };
    let n = setup.n;
    let mut worst = 0.0f64;
    for r in 0..20usize {
        let sample = setup.simulate(400, r).unwrap();
        let rs = setup.regression_sample(&sample).unwrap();
        let est = match rrr_geneig(&rs, n) {
            Ok(e) => e,
            Err(e) => return outcome(false, format!("seed {r}: {e}")),
        };
        let oracle = johansen_beta(rs.y.values(), rs.z_r.values(), rs.z_u.values(), n);
        worst = worst.max(subspace_gap(&oracle, &est.gamma_hat));
    }
    outcome(worst < 1e-6, format!("max principal angle sine bound {worst:.2e} over 20 samples"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let (mut worst_o, mut worst_p) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let sig = random_spd(3, &mut rng);
        let ups = DMatrix::identity(2, 2) * -0.5 + gaussian(2, 2, &mut rng) * 0.05;
        let spec = make_anderson_var1(&ups, &sig, 1).unwrap();
        let canon = canonical_form(&spec).unwrap();
        let proj = correction_projectors(&spec, &canon).unwrap();
        let s11 = sig[(0, 0)];
        let mut expected = DMatrix::zeros(3, 3);
        for i in 1..3 {
            expected[(i, 0)] = -sig[(i, 0)] / s11;
            expected[(i, i)] = 1.0;
        }
        worst_o = worst_o.max(max_abs(&(&canon.o2 * &proj.o2_dagger - expected)));
        worst_p = worst_p.max(max_abs(&proj.p));
    }
    outcome(worst_o <= 1e-10 && worst_p <= 1e-10, format!("O2 O2+ residual {worst_o:.1e}, |P| {worst_p:.1e}"))
}

fn slope_check(res: &McResult, nonstationary: (f64, f64), stationary: (f64, f64), notes: &mut Vec<String>) -> bool {
    let mut pass = true;
    for s in &res.slopes {
        let (target, tol) = if s.block.is_nonstationary() { nonstationary } else { stationary };
        let ok = s.slope.is_some_and(|v| (v - target).abs() <= tol);
        pass &= ok;
        notes.push(format!(
            "{} {} {} {}",
            res.experiment_id,
            s.estimator,
            s.block.label(),
            s.slope.map_or("n/a".into(), |v| format!("{v:.3}"))
        ));
    }
    pass
}

fn criterion_5() -> Outcome {
    let grid = [200, 400, 800, 1600, 3200];
    let methods = [Method::Ols, Method::Rrr];
    let mut notes = Vec::new();
    let mut pass = true;
    for (cfg, ns, st) in [
        (config("cy-rate", ExperimentKind::Rate, cy_positive_spec(), &methods, &grid, 500, 51), (-1.0, 0.15), (-0.5, 0.1)),
        (config("stationary-rate", ExperimentKind::Rate, stationary_spec(), &methods, &grid, 500, 52), (-0.5, 0.1), (-0.5, 0.1)),
    ] {
        match run_rate_experiment(&cfg) {
            Ok(res) => {
                pass &= !res.slopes.is_empty() && slope_check(&res, ns, st, &mut notes);
            }
            Err(e) => {
                pass = false;
                notes.push(e.to_string());
            }
        }
    }
    outcome(pass, notes.join("; "))
}

fn criterion_6() -> Outcome {
    let cfg = config("stationary-cov", ExperimentKind::Dist, stationary_spec(), &[Method::Ols, Method::FmOls], &[2000], 2000, 61);
    match run_dist_experiment(&cfg) {
        Ok(res) => {
            let pass = res.covariance.len() == 2 && res.covariance.iter().all(|c| c.relative_frobenius < 0.15);
            let detail = res.covariance.iter().map(|c| format!("{} {:.4}", c.estimator, c.relative_frobenius)).collect::<Vec<_>>();
            outcome(pass, format!("relative Frobenius error: {}", detail.join(", ")))
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn criterion_7() -> Outcome {
    let methods = [Method::Ols, Method::Rrr];
    let mut notes = Vec::new();
    let mut pass = true;
    for cfg in [
        config("cy-matched", ExperimentKind::Matched, cy_positive_spec(), &methods, &[400, 800, 1600], 500, 71),
        config("stationary-matched", ExperimentKind::Matched, stationary_spec(), &methods, &[400, 800, 1600], 500, 72),
    ] {
        match run_matched_comparison(&cfg) {
            Ok(res) => {
                pass &= res.ratios.len() == 2 && res.ratios.iter().all(|r| r.passed && r.ratios.iter().all(|&q| q <= 0.8));
                for r in &res.ratios {
                    let qs: Vec<String> = r.ratios.iter().map(|q| format!("{q:.3}")).collect();
                    notes.push(format!("{} {} [{}]", cfg.id, r.statistic, qs.join(", ")));
                }
            }
            Err(e) => {
                pass = false;
                notes.push(format!("{}: {e}", cfg.id));
            }
        }
    }
    outcome(pass, notes.join("; "))
}

fn criterion_8() -> Outcome {
    let cfg =
        config("anderson-fm", ExperimentKind::Matched, anderson_spec(), &[Method::Ols, Method::Rrr, Method::FmOls], &[500, 1000], 2000, 81);
    let res = match run_matched_comparison(&cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let find = |comparison: &str, estimator: &str| {
        res.ks
            .iter()
            .find(|k| k.t == 1000 && k.comparison == comparison && k.estimator == estimator && k.block == Block::ZrNonstationary)
            .and_then(|k| k.max_ks)
    };
    let checks = [("vs_RRR", "FM_OLS", 0.08), ("limit", "FM_OLS", 0.10), ("limit", "RRR", 0.10)];
    let mut pass = true;
    let mut notes = Vec::new();
    for (comparison, estimator, bound) in checks {
        let v = find(comparison, estimator);
        pass &= v.is_some_and(|v| v < bound);
        notes.push(format!("{estimator} {comparison} {}", v.map_or("n/a".into(), |v| format!("{v:.4}"))));
    }
    outcome(pass, notes.join(", "))
}

fn ramp_error(n: usize) -> f64 {
    let w = DMatrix::from_fn(1, n + 1, |_, i| i as f64 / n as f64);
    (functional_f(&w, &w).unwrap()[(0, 0)] - 1.5).abs()
}

fn criterion_9() -> Outcome {
    let (e1000, e2000) = (ramp_error(1000), ramp_error(2000));
    let mut pass = e1000 <= 0.01 && e2000 < 0.6 * e1000;
    let mut notes = vec![format!("ramp error N=1000 {e1000:.2e}, N=2000 {e2000:.2e}")];

    let cfg = config("limit-res", ExperimentKind::Dist, cy_positive_spec(), &[Method::Ols], &[1000], 2000, 0);
    let setup = match cfg.validate() {
        Ok(s) => s,
        Err(e) => return outcome(false, e.to_string()),
    };
    let draw = |grid: usize, seed: u64| limit_sampler(&setup.spec, &setup.canon, &LimitConfig::new(grid, 2000, seed));
    match (draw(500, 91), draw(2000, 92)) {
        (Ok(coarse), Ok(fine)) => {
            let (rows, cols) = coarse.draws[0].m_r.shape();
            let mut worst = 0.0f64;
            for i in 0..rows {
                for j in 0..cols {
                    let a: Vec<f64> = coarse.draws.iter().map(|d| d.m_r[(i, j)]).collect();
                    let b: Vec<f64> = fine.draws.iter().map(|d| d.m_r[(i, j)]).collect();
                    worst = worst.max(ks_distance(&a, &b));
                }
            }
            pass &= worst < 0.05;
            notes.push(format!("M_r KS N=500 vs N=2000 {worst:.4}"));
        }
        (Err(e), _) | (_, Err(e)) => {
            pass = false;
            notes.push(e.to_string());
        }
    }
    outcome(pass, notes.join("; "))
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for threads in ["1", "8"] {
        let out = dir.path().join(format!("threads{threads}"));
        let status = Command::new(env!("CARGO_BIN_EXE_rankreg"))
            .args(["--preset", "anderson-var1", "--threads", threads, "--out"])
            .arg(&out)
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(false, format!("--threads {threads} exited with {}", status.status));
        }
        outputs.push(std::fs::read(out.join("results.csv")).unwrap());
    }
    let same = outputs[0] == outputs[1];
    outcome(same && !outputs[0].is_empty(), format!("results.csv {} bytes, identical: {same}", outputs[0].len()))
}

fn main() {
    let criteria: [(usize, fn() -> Outcome); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = Vec::new();
    for (id, run) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id}: {verdict} ({:.1}s) {}", start.elapsed().as_secs_f64(), o.detail);
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
