//! Command-line front end: reads a run configuration (file or preset), runs
//! each experiment, writes `results.csv`, `summary.json`, plot data and a
//! `manifest.json`, and prints a summary table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Parser;
use serde::{Deserialize, Serialize};

use crate::covest::KernelConfig;
use crate::dgp::Preprocessing;
use crate::estimators::Method;
use crate::mc::{results_csv, run_experiment, ExperimentConfig, ExperimentKind, McError, McResult, SpecConfig, ValidationError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_HARD_FAILURE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "rankreg", version, about = "Monte Carlo harness for reduced-rank regressions with integrated regressors")]
pub struct Args {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration (see --list-presets).
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    #[arg(long, value_name = "DIR", default_value = "results")]
    pub out: PathBuf,
    /// Master seed; experiment `i` then uses `N + i`.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
    /// Validate and print the plan without running or writing anything.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub list_presets: bool,
    /// Print a preset's configuration as JSON.
    #[arg(long, value_name = "NAME")]
    pub print_preset: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides every experiment seed with `seed + i` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub experiments: Vec<ExperimentConfig>,
}

impl RunConfig {
    /// Applies the master seed and validates every experiment.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self, ValidationError> {
        if let Some(master) = seed.or(self.seed) {
            self.seed = Some(master);
            for (i, e) in self.experiments.iter_mut().enumerate() {
                e.seed = master.wrapping_add(i as u64);
            }
        }
        if self.experiments.is_empty() {
            return Err(ValidationError::new("experiments", "must not be empty"));
        }
        for (i, e) in self.experiments.iter().enumerate() {
            if self.experiments[..i].iter().any(|p| p.id == e.id) {
                return Err(ValidationError::new(format!("experiments[{i}].id"), format!("duplicate id {}", e.id)));
            }
            e.validate().map_err(|err| ValidationError::new(format!("experiments[{i}].{}", err.path), err.message))?;
        }
        Ok(self)
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, ValidationError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "<root>".to_string() } else { path };
        ValidationError::new(path, e.into_inner().to_string())
    })
}

pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub build: fn() -> RunConfig,
}

pub const PRESETS: [Preset; 5] = [
    Preset {
        name: "stationary",
        description: "all regressors stationary: identities, sqrt(T) rates, Kronecker covariance, vanishing projected RRR correction",
        build: preset_stationary,
    },
    Preset {
        name: "anderson-var1",
        description: "Anderson VAR(1) with one unit root: identities and matched RRR/FM comparison",
        build: preset_anderson,
    },
    Preset {
        name: "johansen-vecm",
        description: "cointegrated VECM with one lagged difference: identities, rates and limit-law agreement",
        build: preset_johansen,
    },
    Preset {
        name: "cy-positive",
        description: "reduced rank load on integrated directions (c_y = 1): T and sqrt(T) rates, correction structure, limit laws",
        build: preset_cy_positive,
    },
    Preset {
        name: "fm-comparison",
        description: "fully modified OLS and RRR against RRR and their limit draws on the Anderson VAR(1)",
        build: preset_fm_comparison,
    },
];

pub fn find_preset(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

pub fn list_presets() -> String {
    let mut out = String::new();
    for p in &PRESETS {
        let _ = writeln!(out, "{:<15} {}", p.name, p.description);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn experiment(
    id: &str,
    kind: ExperimentKind,
    spec: &SpecConfig,
    estimators: &[Method],
    t_grid: &[usize],
    reps: usize,
    seed: u64,
    limit_grid_n: usize,
) -> ExperimentConfig {
    ExperimentConfig {
        id: id.into(),
        kind,
        spec: spec.clone(),
        estimators: estimators.to_vec(),
        n: None,
        t_grid: t_grid.to_vec(),
        reps,
        seed,
        kernel: KernelConfig::default(),
        preprocessing: Preprocessing::None,
        limit_grid_n,
    }
}

use ExperimentKind::{Dist, Identity, Matched, Rate};
use Method::{FmOls, FmRrr, Ols, Rrr};

pub fn stationary_spec() -> SpecConfig {
    SpecConfig::Stationary { s: 3, m_r: 3, m_u: 1, n: 1, seed: 2 }
}

pub fn anderson_spec() -> SpecConfig {
    SpecConfig::AndersonVar1 {
        upsilon22: vec![vec![-0.5, 0.1], vec![0.05, -0.4]],
        sigma_w: vec![vec![1.0, 0.5, 0.3], vec![0.5, 1.0, 0.2], vec![0.3, 0.2, 1.0]],
        integrated_dim: 1,
    }
}

pub fn johansen_spec() -> SpecConfig {
    SpecConfig::JohansenVecm {
        alpha: vec![vec![-0.3], vec![0.2], vec![0.1]],
        beta: vec![vec![1.0], vec![-1.0], vec![0.5]],
        lag_coeffs: vec![vec![vec![0.2, 0.0, 0.0], vec![0.0, 0.1, 0.0], vec![0.0, 0.0, 0.1]]],
        sigma: vec![vec![1.0, 0.3, 0.0], vec![0.3, 1.0, 0.2], vec![0.0, 0.2, 1.0]],
    }
}

pub fn cy_positive_spec() -> SpecConfig {
    SpecConfig::CyPositive { s: 3, m_r: 3, m_u: 1, c_r: 2, c_u: 0, n: 2, c_y: 1, seed: 1 }
}

const RATE_GRID: [usize; 5] = [200, 400, 800, 1600, 3200];

fn preset_stationary() -> RunConfig {
    let spec = stationary_spec();
    RunConfig {
        seed: None,
        experiments: vec![
            experiment("stationary-identity", Identity, &spec, &[Ols, Rrr, FmOls, FmRrr], &[200, 400], 50, 1, 1000),
            experiment("stationary-rate", Rate, &spec, &[Ols, Rrr], &RATE_GRID, 200, 2, 1000),
            experiment("stationary-cov", Dist, &spec, &[Ols, FmOls], &[2000], 500, 3, 1000),
            experiment("stationary-matched", Matched, &spec, &[Ols, Rrr], &[400, 800, 1600], 200, 4, 1000),
        ],
    }
}

fn preset_anderson() -> RunConfig {
    let spec = anderson_spec();
    RunConfig {
        seed: None,
        experiments: vec![
            experiment("anderson-identity", Identity, &spec, &[Ols, Rrr, FmOls, FmRrr], &[400], 50, 11, 1000),
            experiment("anderson-matched", Matched, &spec, &[Ols, Rrr, FmOls], &[250, 500, 1000], 200, 12, 500),
        ],
    }
}

fn preset_johansen() -> RunConfig {
    let spec = johansen_spec();
    RunConfig {
        seed: None,
        experiments: vec![
            experiment("johansen-identity", Identity, &spec, &[Ols, Rrr], &[400], 50, 21, 1000),
            experiment("johansen-rate", Rate, &spec, &[Ols, Rrr], &RATE_GRID, 200, 22, 1000),
            experiment("johansen-dist", Dist, &spec, &[Ols, Rrr], &[1000], 500, 23, 1000),
        ],
    }
}

fn preset_cy_positive() -> RunConfig {
    let spec = cy_positive_spec();
    RunConfig {
        seed: None,
        experiments: vec![
            experiment("cy-identity", Identity, &spec, &[Ols, Rrr, FmOls, FmRrr], &[400], 50, 31, 1000),
            experiment("cy-rate", Rate, &spec, &[Ols, Rrr], &RATE_GRID, 200, 32, 1000),
            experiment("cy-matched", Matched, &spec, &[Ols, Rrr], &[400, 800, 1600], 200, 33, 1000),
            experiment("cy-dist", Dist, &spec, &[Ols, Rrr], &[1000], 500, 34, 1000),
        ],
    }
}

fn preset_fm_comparison() -> RunConfig {
    let spec = anderson_spec();
    RunConfig {
        seed: None,
        experiments: vec![
            experiment("fm-matched", Matched, &spec, &[Ols, Rrr, FmOls, FmRrr], &[500, 1000], 500, 41, 1000),
            experiment("fm-dist", Dist, &spec, &[FmOls, FmRrr], &[1000], 500, 42, 1000),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentStatus {
    pub id: String,
    /// `ok`, `identity_violation` or `failed`.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config: String,
    pub out_dir: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub library_version: String,
    pub master_seed: Option<u64>,
    pub experiments: Vec<ExperimentStatus>,
    pub files: Vec<String>,
}

fn plan(cfg: &RunConfig) -> String {
    let mut out = String::new();
    for e in &cfg.experiments {
        let est: Vec<&str> = e.estimators.iter().map(|m| m.label()).collect();
        let _ = writeln!(
            out,
            "{:<22} {:<9} estimators={} T_grid={:?} R={} seed={} preprocessing={:?}",
            e.id,
            format!("{:?}", e.kind).to_lowercase(),
            est.join("+"),
            e.t_grid,
            e.reps,
            e.seed,
            e.preprocessing
        );
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

/// Human-readable digest of one experiment.
pub fn summary_table(res: &McResult) -> String {
    let mut out = format!("== {} ({:?})\n", res.experiment_id, res.kind);
    for s in &res.slopes {
        let _ = writeln!(out, "  slope  {:<7} {:<22} {} (se {})", s.estimator, s.block.label(), opt(s.slope), opt(s.std_err));
    }
    for i in &res.identities {
        let state = if i.skipped {
            "skipped"
        } else if i.passed {
            "ok"
        } else {
            "VIOLATED"
        };
        let value = i.max_residual.map(|v| format!("{v:.2e}")).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(out, "  ident  {:<32} {:>10} <= {:.0e} {state}", i.check, value, i.threshold);
    }
    for r in &res.ratios {
        let ratios: Vec<String> = r.ratios.iter().map(|x| format!("{x:.3}")).collect();
        let _ = writeln!(out, "  ratio  {:<5} [{}] {}", r.statistic, ratios.join(", "), if r.passed { "ok" } else { "not shrinking" });
    }
    for k in &res.ks {
        let _ = writeln!(out, "  ks     {:<7} {:<8} T={:<5} {:<22} {}", k.estimator, k.comparison, k.t, k.block.label(), opt(k.max_ks));
    }
    for c in &res.covariance {
        let _ = writeln!(out, "  cov    {:<7} T={:<5} relative Frobenius error {:.4}", c.estimator, c.t, c.relative_frobenius);
    }
    for f in &res.flags {
        let _ = writeln!(out, "  note   {f}");
    }
    out
}

fn write_file(dir: &Path, rel: &str, body: &str, files: &mut Vec<String>) -> std::io::Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, body)?;
    files.push(rel.to_string());
    Ok(())
}

/// Runs the resolved configuration; returns the exit code.
pub fn execute(cfg: &RunConfig, config_label: &str, out_dir: &Path) -> i32 {
    let mut results = Vec::new();
    let mut statuses = Vec::new();
    let mut hard_failure = false;
    for e in &cfg.experiments {
        let (status, message) = match run_experiment(e) {
            Ok(res) => {
                print!("{}", summary_table(&res));
                let status = if res.violations.is_empty() {
                    ("ok", None)
                } else {
                    hard_failure = true;
                    ("identity_violation", Some(res.violations.join("; ")))
                };
                results.push(res);
                status
            }
            Err(McError::Validation(v)) => {
                eprintln!("error: {v}");
                return EXIT_VALIDATION;
            }
            Err(err) => {
                hard_failure = true;
                eprintln!("error: experiment {}: {err}", e.id);
                ("failed", Some(err.to_string()))
            }
        };
        statuses.push(ExperimentStatus { id: e.id.clone(), status: status.into(), message });
    }

    let mut files = Vec::new();
    let written = (|| -> std::io::Result<()> {
        fs::create_dir_all(out_dir)?;
        write_file(out_dir, "results.csv", &results_csv(&results), &mut files)?;
        let summary = serde_json::to_string_pretty(&results).map_err(std::io::Error::other)?;
        write_file(out_dir, "summary.json", &summary, &mut files)?;
        for res in &results {
            for (name, body) in res.plot_data() {
                write_file(out_dir, &format!("plot/{name}"), &body, &mut files)?;
            }
        }
        files.push("manifest.json".into());
        let manifest = RunManifest {
            config: config_label.to_string(),
            out_dir: out_dir.display().to_string(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: cfg.seed,
            experiments: statuses,
            files: files.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        fs::write(out_dir.join("manifest.json"), text)
    })();
    if let Err(e) = written {
        eprintln!("error: writing {}: {e}", out_dir.display());
        return EXIT_IO;
    }
    if hard_failure {
        EXIT_HARD_FAILURE
    } else {
        EXIT_OK
    }
}

fn load(args: &Args) -> Result<(RunConfig, String), (i32, String)> {
    let (raw, label) = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| (EXIT_IO, format!("reading {}: {e}", path.display())))?;
            (parse_config(&text).map_err(|e| (EXIT_VALIDATION, e.to_string()))?, path.display().to_string())
        }
        (None, Some(name)) => {
            let p = find_preset(name).ok_or_else(|| (EXIT_VALIDATION, format!("preset: unknown preset {name}")))?;
            ((p.build)(), format!("preset:{name}"))
        }
        (None, None) => return Err((EXIT_VALIDATION, "one of --config or --preset is required".into())),
    };
    let cfg = raw.resolve(args.seed).map_err(|e| (EXIT_VALIDATION, e.to_string()))?;
    Ok((cfg, label))
}

pub fn run(args: &Args) -> i32 {
    if args.list_presets {
        print!("{}", list_presets());
        return EXIT_OK;
    }
    if let Some(name) = &args.print_preset {
        return match find_preset(name) {
            Some(p) => {
                println!("{}", serde_json::to_string_pretty(&(p.build)()).expect("presets serialize"));
                EXIT_OK
            }
            None => {
                eprintln!("error: preset: unknown preset {name}");
                EXIT_VALIDATION
            }
        };
    }
    let (cfg, label) = match load(args) {
        Ok(v) => v,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            return code;
        }
    };
    if args.dry_run {
        print!("{}", plan(&cfg));
        return EXIT_OK;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        if n == 0 {
            eprintln!("error: threads: must be at least 1");
            return EXIT_VALIDATION;
        }
        builder = builder.num_threads(n);
    }
    match builder.build() {
        Ok(pool) => pool.install(|| execute(&cfg, &label, &args.out)),
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            EXIT_IO
        }
    }
}

/// Entry point for the binary; clap handles `--help` and usage errors (exit 2).
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    match Args::try_parse_from(args) {
        Ok(a) => run(&a),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            }
        }
    }
}
