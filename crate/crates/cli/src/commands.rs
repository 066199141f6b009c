//! The three subcommands: `validate`, `run`, and `compare`.
//!
//! Artifacts are written atomically (temp file + rename in the target
//! directory) and contain nothing time- or machine-dependent, so a rerun
//! with the same config and seed reproduces them byte for byte at any
//! worker count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use qdiff_core::compare::{born_z_scores, shared_noise_max_distance};
use qdiff_core::ensemble::{run_ensemble_with, with_workers, EnsembleResult, RepairStats};
use qdiff_core::experiment::{
    fit_decoherence_rate, EngineKind, ExperimentSpec, FrequencyReport, MartingaleReport, RateFit,
};
use qdiff_core::lindblad::evolve_mean_grid;
use qdiff_core::operators::DensityMatrix;

use crate::config::{self, Overrides, RunConfig, Validated};
use crate::CliError;

/// Where a command put its artifacts and whether any trajectory failed.
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
    pub had_failures: bool,
}

/// Parse + validate, returning the normalized config (defaults filled) as
/// pretty JSON for display.
pub fn cmd_validate(path: &Path, overrides: &Overrides) -> Result<String, CliError> {
    let (mut config, _raw) = config::load(path)?;
    overrides.apply(&mut config);
    config::validate(&config)?;
    serde_json::to_string_pretty(&config).map_err(|e| CliError::Parse(e.to_string()))
}

/// Run the configured experiment and write summary.json, series.csv, and
/// manifest.json. Partial artifacts are still written when trajectories
/// fail; the caller maps that to exit code 4.
pub fn cmd_run(path: &Path, overrides: &Overrides) -> Result<RunOutcome, CliError> {
    let (mut config, raw) = config::load(path)?;
    overrides.apply(&mut config);
    let validated = config::validate(&config)?;
    let out_dir = resolve_output_dir(&validated);
    prepare_output_dir(&out_dir)?;
    if let Some(w) = &validated.warning {
        eprintln!("warning: {w}");
    }

    let spec = validated.spec.clone();
    let observables = validated.observables.clone();
    let result = with_workers(validated.workers, move || {
        run_ensemble_with(&spec, &observables)
    })
    .map_err(|e| CliError::Semantic {
        field: "workers".into(),
        message: e.to_string(),
    })?
    .map_err(|e| CliError::Trajectory(e.to_string()))?;

    let summary = build_summary(&config, &validated, &result)?;
    let mut artifacts = Vec::new();
    if validated.formats.contains(&config::OutputFormat::Json) {
        let bytes = to_pretty_bytes(&summary)?;
        artifacts.push(write_atomic(&out_dir, "summary.json", &bytes)?);
    }
    if validated.formats.contains(&config::OutputFormat::Csv) {
        let csv = build_series_csv(&result);
        artifacts.push(write_atomic(&out_dir, "series.csv", csv.as_bytes())?);
    }
    let manifest = build_manifest(&config, &validated, &raw, &artifacts);
    let bytes = to_pretty_bytes(&manifest)?;
    artifacts.push(write_atomic(&out_dir, "manifest.json", &bytes)?);

    Ok(RunOutcome {
        output_dir: out_dir,
        artifacts,
        had_failures: !result.failures.is_empty(),
    })
}

/// Run every engine named in `compare_engines` over the shared spec and
/// write compare.json plus manifest.json.
pub fn cmd_compare(path: &Path, overrides: &Overrides) -> Result<RunOutcome, CliError> {
    let (mut config, raw) = config::load(path)?;
    overrides.apply(&mut config);
    let validated = config::validate(&config)?;
    if validated.compare_engines.is_empty() {
        return Err(CliError::Semantic {
            field: "compare_engines".into(),
            message: "compare requires a compare_engines list with at least two engines".into(),
        });
    }
    let out_dir = resolve_output_dir(&validated);
    prepare_output_dir(&out_dir)?;

    let mut runs: Vec<(EngineKind, EnsembleResult)> = Vec::new();
    for engine in &validated.compare_engines {
        let mut spec = validated.spec.clone();
        spec.engine = *engine;
        eprintln!("compare: running {} ...", engine.name());
        let observables = validated.observables.clone();
        let spec_for_run = spec.clone();
        let result = with_workers(validated.workers, move || {
            run_ensemble_with(&spec_for_run, &observables)
        })
        .map_err(|e| CliError::Semantic {
            field: "workers".into(),
            message: e.to_string(),
        })?
        .map_err(|e| CliError::Trajectory(e.to_string()))?;
        runs.push((*engine, result));
    }

    let report = build_compare_report(&validated, &runs)?;
    let mut artifacts = Vec::new();
    let bytes = to_pretty_bytes(&report)?;
    artifacts.push(write_atomic(&out_dir, "compare.json", &bytes)?);
    let manifest = build_manifest(&config, &validated, &raw, &artifacts);
    let bytes = to_pretty_bytes(&manifest)?;
    artifacts.push(write_atomic(&out_dir, "manifest.json", &bytes)?);

    Ok(RunOutcome {
        output_dir: out_dir,
        artifacts,
        had_failures: runs.iter().any(|(_, r)| !r.failures.is_empty()),
    })
}

fn resolve_output_dir(validated: &Validated) -> PathBuf {
    match std::env::var_os("QDIFF_OUT") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => validated.output_dir.clone(),
    }
}

// The directory must be writable before any compute is spent.
fn prepare_output_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let probe = dir.join(".qdiff-write-probe");
    fs::write(&probe, b"probe").map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    fs::remove_file(&probe).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(())
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
    let tmp = dir.join(format!(".{name}.tmp"));
    let target = dir.join(name);
    fs::write(&tmp, bytes).map_err(|e| CliError::Io(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, &target).map_err(|e| CliError::Io(format!("{}: {e}", target.display())))?;
    Ok(target)
}

fn to_pretty_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| CliError::Io(format!("serialize: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

#[derive(Serialize)]
struct Summary {
    schema: u32,
    engine: &'static str,
    mode: serde_json::Value,
    dim: usize,
    dt: f64,
    t_max: f64,
    trajectories: usize,
    seed: u64,
    eps_endpoint: f64,
    bit_exact: bool,
    born: FrequencyReport,
    rates: Vec<RateBlock>,
    martingale: MartingaleReport,
    weights: WeightBlock,
    repair: RepairStats,
    warnings: Vec<String>,
    failures: Vec<FailureBlock>,
}

#[derive(Serialize)]
struct RateBlock {
    row: usize,
    col: usize,
    expected_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    fitted_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fitted_rate_se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit_points: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

#[derive(Serialize)]
struct WeightBlock {
    final_mean: f64,
    final_se: f64,
    final_neff: f64,
    min_neff: f64,
    min_neff_fraction: f64,
}

#[derive(Serialize)]
struct FailureBlock {
    trajectory: u64,
    message: String,
}

fn build_summary(
    config: &RunConfig,
    validated: &Validated,
    result: &EnsembleResult,
) -> Result<Summary, CliError> {
    let spec = &result.spec;
    let born = result
        .born_report()
        .map_err(|e| CliError::Trajectory(e.to_string()))?;
    let martingale = result.martingale_report();
    let rates = build_rate_blocks(spec, result);
    let last = result.points.last().expect("nonempty grid");
    let min_neff = result
        .points
        .iter()
        .fold(f64::INFINITY, |a, p| a.min(p.neff));
    let weights = WeightBlock {
        final_mean: last.weight_mean,
        final_se: last.weight_se,
        final_neff: last.neff,
        min_neff,
        min_neff_fraction: min_neff / result.n_success.max(1) as f64,
    };
    let failures = result
        .failures
        .iter()
        .map(|(i, m)| FailureBlock {
            trajectory: *i,
            message: m.clone(),
        })
        .collect();
    Ok(Summary {
        schema: config.schema,
        engine: spec.engine.name(),
        mode: serde_json::to_value(&spec.mode)
            .map_err(|e| CliError::Io(format!("serialize: {e}")))?,
        dim: spec.initial.dim(),
        dt: spec.dt,
        t_max: spec.t_max,
        trajectories: spec.trajectories,
        seed: spec.seed,
        eps_endpoint: spec.eps_endpoint,
        bit_exact: validated.bit_exact,
        born,
        rates,
        martingale,
        weights,
        repair: result.repair.clone(),
        warnings: result.warnings.clone(),
        failures,
    })
}

// Fit a decay rate for every off-diagonal pair that starts populated.
fn build_rate_blocks(spec: &ExperimentSpec, result: &EnsembleResult) -> Vec<RateBlock> {
    let dim = spec.initial.dim();
    let mut out = Vec::new();
    for m in 0..dim {
        for n in (m + 1)..dim {
            if spec.initial.element(m, n).norm() <= 1e-9 {
                continue;
            }
            let (means, ses) = result.offdiag_series(m, n);
            let expected = spec.mode.expected_decay_rate(m, n);
            match fit_decoherence_rate(&result.times, &means, &ses) {
                Ok(RateFit {
                    rate,
                    stderr,
                    points,
                    ..
                }) => out.push(RateBlock {
                    row: m,
                    col: n,
                    expected_rate: expected,
                    fitted_rate: Some(rate),
                    fitted_rate_se: Some(stderr),
                    fit_points: Some(points),
                    note: None,
                }),
                Err(e) => out.push(RateBlock {
                    row: m,
                    col: n,
                    expected_rate: expected,
                    fitted_rate: None,
                    fitted_rate_se: None,
                    fit_points: None,
                    note: Some(e.to_string()),
                }),
            }
        }
    }
    out
}

// CSV layout: time first, then mean/SE interleaved per tracked observable,
// then the weight diagnostics.
fn build_series_csv(result: &EnsembleResult) -> String {
    let mut csv = String::from("t");
    for o in &result.observables {
        let _ = write!(csv, ",{name},{name}_se", name = o.name);
    }
    csv.push_str(",w_mean,w_se,neff\n");
    for (i, t) in result.times.iter().enumerate() {
        let p = &result.points[i];
        let _ = write!(csv, "{t}");
        for &(mean, se) in &p.observables {
            let _ = write!(csv, ",{mean},{se}");
        }
        let _ = writeln!(csv, ",{},{},{}", p.weight_mean, p.weight_se, p.neff);
    }
    csv
}

#[derive(Serialize)]
struct Manifest {
    schema: u32,
    config_sha256: String,
    seed: u64,
    workers: String,
    bit_exact: bool,
    versions: Versions,
    artifacts: Vec<String>,
}

#[derive(Serialize)]
struct Versions {
    qdiff_core: &'static str,
    qdiff_cli: &'static str,
}

fn build_manifest(
    config: &RunConfig,
    validated: &Validated,
    raw_config: &[u8],
    artifacts: &[PathBuf],
) -> Manifest {
    let mut hasher = Sha256::new();
    hasher.update(raw_config);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    Manifest {
        schema: config.schema,
        config_sha256: hex,
        seed: config.experiment.seed,
        workers: match validated.workers {
            None => "auto".to_string(),
            Some(k) => k.to_string(),
        },
        bit_exact: validated.bit_exact,
        versions: Versions {
            qdiff_core: qdiff_core::VERSION,
            qdiff_cli: env!("CARGO_PKG_VERSION"),
        },
        artifacts: artifacts
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
    }
}

#[derive(Serialize)]
struct CompareReport {
    schema: u32,
    dt: f64,
    t_max: f64,
    trajectories: usize,
    seed: u64,
    engines: Vec<EngineBlock>,
    pairwise: Vec<PairBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pathwise: Option<PathwiseBlock>,
}

#[derive(Serialize)]
struct EngineBlock {
    engine: &'static str,
    born: FrequencyReport,
    martingale: MartingaleReport,
    /// Max elementwise |mean R − reference| over the time grid.
    oracle_max_dev: f64,
    /// 4·SE + ‖L‖²·dt allowance at the worst point.
    oracle_allowance: f64,
    oracle_within_allowance: bool,
    weights: WeightBlock,
    warnings: Vec<String>,
    failures: usize,
}

#[derive(Serialize)]
struct PairBlock {
    engine_a: &'static str,
    engine_b: &'static str,
    born_z: Vec<f64>,
    max_abs_z: f64,
    /// Max elementwise distance between the two mean states on the grid;
    /// identically zero when an engine is compared with itself.
    mean_state_max_distance: f64,
}

#[derive(Serialize)]
struct PathwiseBlock {
    engine_a: &'static str,
    engine_b: &'static str,
    pairs: usize,
    /// Max Frobenius gap under shared noise across the sampled pairs.
    max_distance: f64,
}

fn build_compare_report(
    validated: &Validated,
    runs: &[(EngineKind, EnsembleResult)],
) -> Result<CompareReport, CliError> {
    let spec = &validated.spec;
    let l = spec
        .mode
        .build()
        .map_err(|e| CliError::Trajectory(e.to_string()))?;
    let times = &runs[0].1.times;
    let oracle = evolve_mean_grid(&spec.initial, &l, times, 50)
        .map_err(|e| CliError::Trajectory(e.to_string()))?;

    let mut engines = Vec::new();
    for (engine, result) in runs {
        let born = result
            .born_report()
            .map_err(|e| CliError::Trajectory(e.to_string()))?;
        let (dev, allowance) = oracle_deviation(result, &oracle.states, l.max_norm_sq());
        let last = result.points.last().expect("nonempty");
        let min_neff = result
            .points
            .iter()
            .fold(f64::INFINITY, |a, p| a.min(p.neff));
        engines.push(EngineBlock {
            engine: engine.name(),
            born,
            martingale: result.martingale_report(),
            oracle_max_dev: dev,
            oracle_allowance: allowance,
            oracle_within_allowance: dev <= allowance,
            weights: WeightBlock {
                final_mean: last.weight_mean,
                final_se: last.weight_se,
                final_neff: last.neff,
                min_neff,
                min_neff_fraction: min_neff / result.n_success.max(1) as f64,
            },
            warnings: result.warnings.clone(),
            failures: result.failures.len(),
        });
    }

    let mut pairwise = Vec::new();
    for i in 0..runs.len() {
        for j in (i + 1)..runs.len() {
            let (ea, ra) = &runs[i];
            let (eb, rb) = &runs[j];
            let born_z = born_z_scores(&engines[i].born, &engines[j].born);
            let max_abs_z = born_z.iter().fold(0.0f64, |a, z| a.max(z.abs()));
            let mut max_d = 0.0f64;
            for (pa, pb) in ra.points.iter().zip(&rb.points) {
                for r in 0..pa.mean.nrows() {
                    for c in 0..pa.mean.ncols() {
                        max_d = max_d.max((pa.mean[(r, c)] - pb.mean[(r, c)]).norm());
                    }
                }
            }
            pairwise.push(PairBlock {
                engine_a: ea.name(),
                engine_b: eb.name(),
                born_z,
                max_abs_z,
                mean_state_max_distance: max_d,
            });
        }
    }

    // Shared-noise pathwise probe when both nonlinear engines are present
    // and the initial state is pure.
    let pathwise = pathwise_block(validated)?;

    Ok(CompareReport {
        schema: config::SCHEMA_VERSION,
        dt: spec.dt,
        t_max: spec.t_max,
        trajectories: spec.trajectories,
        seed: spec.seed,
        engines,
        pairwise,
        pathwise,
    })
}

// Max elementwise |mean R − oracle| and the matching allowance over grid.
fn oracle_deviation(
    result: &EnsembleResult,
    oracle: &[DensityMatrix],
    max_norm_sq: f64,
) -> (f64, f64) {
    let mut worst_dev = 0.0f64;
    let mut allowance_at_worst = f64::INFINITY;
    for (p, want) in result.points.iter().zip(oracle) {
        for r in 0..p.mean_r.nrows() {
            for c in 0..p.mean_r.ncols() {
                let dev = (p.mean_r[(r, c)] - want.matrix()[(r, c)]).norm();
                let se = p.se_r_re[(r, c)].hypot(p.se_r_im[(r, c)]);
                let allow = 4.0 * se + max_norm_sq * result.spec.dt;
                if dev > worst_dev {
                    worst_dev = dev;
                    allowance_at_worst = allow;
                }
            }
        }
    }
    if !allowance_at_worst.is_finite() {
        allowance_at_worst = max_norm_sq * result.spec.dt;
    }
    (worst_dev, allowance_at_worst)
}

fn pathwise_block(validated: &Validated) -> Result<Option<PathwiseBlock>, CliError> {
    let engines = &validated.compare_engines;
    let has = |e: EngineKind| engines.contains(&e);
    if !(has(EngineKind::StateVector) && has(EngineKind::DensityNonlinear)) {
        return Ok(None);
    }
    let pairs = validated.spec.trajectories.min(64);
    let mut max_d = 0.0f64;
    for k in 0..pairs {
        let d = shared_noise_max_distance(
            &validated.spec,
            EngineKind::StateVector,
            EngineKind::DensityNonlinear,
            k as u64,
        )
        .map_err(|e| CliError::Trajectory(e.to_string()))?;
        max_d = max_d.max(d);
    }
    Ok(Some(PathwiseBlock {
        engine_a: EngineKind::StateVector.name(),
        engine_b: EngineKind::DensityNonlinear.name(),
        pairs,
        max_distance: max_d,
    }))
}
