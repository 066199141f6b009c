//! JSON run configuration: schema, defaults, and semantic validation.
//!
//! Parsing and validation are separate stages with distinct exit codes:
//! malformed JSON or unknown fields fail at parse time (exit 2), while a
//! structurally valid config with bad content fails validation with the
//! offending field path (exit 3).

use std::path::PathBuf;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use qdiff_core::ensemble::NamedObservable;
use qdiff_core::experiment::{EngineKind, ExperimentSpec, LindbladMode, PreparedExperiment};
use qdiff_core::operators::{DensityMatrix, Operator};
use qdiff_core::C64;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

fn semantic(field: &str, message: impl Into<String>) -> CliError {
    CliError::Semantic {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub experiment: ExperimentConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<OutputFormat>,
    #[serde(default = "default_true")]
    pub bit_exact: bool,
    #[serde(default)]
    pub workers: WorkersConfig,
    #[serde(default)]
    pub observables: Vec<NamedObservable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare_engines: Option<Vec<EngineKind>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_engine")]
    pub engine: EngineKind,
    pub mode: ModeConfig,
    pub initial: InitialConfig,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eps_endpoint")]
    pub eps_endpoint: f64,
    #[serde(default = "default_record_points")]
    pub record_points: usize,
}

/// Coupling mode. A single observable may be given either as its spectrum
/// or as a full matrix, which must be Hermitian and diagonal in the
/// computational basis (the basis is the observable's eigenbasis; callers
/// diagonalize beforehand).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModeConfig {
    SingleObservable {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eigenvalues: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        observable: Option<RawMatrix>,
    },
    Projectors {
        dim: usize,
    },
}

/// Initial state: either diagonal populations or a full density matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialConfig {
    Diagonal { diag: Vec<f64> },
    Matrix(RawMatrix),
}

/// Matrix JSON form `{dim, re, im}` with row-major nested arrays, parsed
/// structurally here and validated semantically later.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawMatrix {
    pub dim: usize,
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl RawMatrix {
    fn to_complex(&self, field: &str) -> Result<DMatrix<C64>, CliError> {
        let n = self.dim;
        if n == 0 {
            return Err(semantic(field, "dim must be at least 1"));
        }
        for (name, rows) in [("re", &self.re), ("im", &self.im)] {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(semantic(
                    field,
                    format!("{name} must be a {n}x{n} nested array"),
                ));
            }
        }
        Ok(DMatrix::from_fn(n, n, |i, j| {
            C64::new(self.re[i][j], self.im[i][j])
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WorkersConfig {
    #[default]
    Auto,
    Fixed(usize),
}

impl WorkersConfig {
    pub fn as_option(&self) -> Option<usize> {
        match self {
            WorkersConfig::Auto => None,
            WorkersConfig::Fixed(n) => Some(*n),
        }
    }
}

impl Serialize for WorkersConfig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            WorkersConfig::Auto => s.serialize_str("auto"),
            WorkersConfig::Fixed(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for WorkersConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(WorkersConfig::Fixed(n)),
            Raw::Text(t) if t == "auto" => Ok(WorkersConfig::Auto),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "workers must be \"auto\" or a positive integer, got \"{t}\""
            ))),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("qdiff-out")
}
fn default_formats() -> Vec<OutputFormat> {
    vec![OutputFormat::Json, OutputFormat::Csv]
}
fn default_true() -> bool {
    true
}
fn default_engine() -> EngineKind {
    EngineKind::DensityNonlinear
}
fn default_dt() -> f64 {
    1e-3
}
fn default_t_max() -> f64 {
    10.0
}
fn default_trajectories() -> usize {
    1000
}
fn default_eps_endpoint() -> f64 {
    1e-4
}
fn default_record_points() -> usize {
    50
}

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<WorkersConfig>,
    pub bit_exact: Option<bool>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(seed) = self.seed {
            config.experiment.seed = seed;
        }
        if let Some(workers) = self.workers {
            config.workers = workers;
        }
        if let Some(flag) = self.bit_exact {
            config.bit_exact = flag;
        }
    }
}

/// Everything a command needs after validation.
pub struct Validated {
    pub spec: ExperimentSpec,
    pub observables: Vec<NamedObservable>,
    pub output_dir: PathBuf,
    pub formats: Vec<OutputFormat>,
    pub bit_exact: bool,
    pub workers: Option<usize>,
    pub compare_engines: Vec<EngineKind>,
    /// Step-size warning from the sanity bound, if any.
    pub warning: Option<String>,
}

/// Read and parse a config file. Filesystem problems map to exit 5,
/// malformed JSON to exit 2.
pub fn load(path: &std::path::Path) -> Result<(RunConfig, Vec<u8>), CliError> {
    let raw = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let config: RunConfig =
        serde_json::from_slice(&raw).map_err(|e| CliError::Parse(e.to_string()))?;
    Ok((config, raw))
}

/// Validate the config and build the experiment spec.
pub fn validate(config: &RunConfig) -> Result<Validated, CliError> {
    if config.schema != SCHEMA_VERSION {
        return Err(semantic(
            "schema",
            format!(
                "unsupported schema {}, expected {SCHEMA_VERSION}",
                config.schema
            ),
        ));
    }
    let exp = &config.experiment;
    if !(exp.dt > 0.0 && exp.dt.is_finite()) {
        return Err(semantic("experiment.dt", "dt must be a positive number"));
    }
    if !(exp.t_max > 0.0 && exp.t_max.is_finite()) {
        return Err(semantic(
            "experiment.t_max",
            "t_max must be a positive number",
        ));
    }

    let mode = validate_mode(&exp.mode)?;
    let initial = validate_initial(&exp.initial)?;
    if mode.dim() != initial.dim() {
        return Err(semantic(
            "experiment.initial",
            format!(
                "initial state dim {} does not match coupling dim {}",
                initial.dim(),
                mode.dim()
            ),
        ));
    }

    let spec = ExperimentSpec {
        engine: exp.engine,
        mode,
        initial,
        dt: exp.dt,
        t_max: exp.t_max,
        trajectories: exp.trajectories,
        seed: exp.seed,
        eps_endpoint: exp.eps_endpoint,
        record_points: exp.record_points,
    };
    let prepared = PreparedExperiment::new(&spec).map_err(map_spec_error)?;
    let warning = prepared.warning.clone();

    let mut observables = config.observables.clone();
    if observables.is_empty() {
        observables = (0..spec.initial.dim()).map(NamedObservable::diag).collect();
    }
    let mut seen = std::collections::BTreeSet::new();
    for (i, o) in observables.iter().enumerate() {
        let field = format!("observables[{i}]");
        if o.name.is_empty() || o.name.contains([',', '"', '\n', '\r']) {
            return Err(semantic(
                &field,
                "observable names must be non-empty and CSV-safe",
            ));
        }
        if !seen.insert(o.name.clone()) {
            return Err(semantic(
                &field,
                format!("duplicate observable name '{}'", o.name),
            ));
        }
        o.validate(spec.initial.dim())
            .map_err(|e| semantic(&field, e.to_string()))?;
    }

    if config.formats.is_empty() {
        return Err(semantic(
            "formats",
            "at least one output format is required",
        ));
    }
    if let WorkersConfig::Fixed(0) = config.workers {
        return Err(semantic("workers", "workers must be at least 1"));
    }

    let compare_engines = match &config.compare_engines {
        None => Vec::new(),
        Some(list) => {
            if list.len() < 2 {
                return Err(semantic(
                    "compare_engines",
                    "comparison requires at least two engines",
                ));
            }
            for (i, engine) in list.iter().enumerate() {
                let mut s = spec.clone();
                s.engine = *engine;
                PreparedExperiment::new(&s).map_err(|e| {
                    semantic(
                        &format!("compare_engines[{i}]"),
                        format!("{} cannot run this spec: {e}", engine.name()),
                    )
                })?;
            }
            list.clone()
        }
    };

    Ok(Validated {
        spec,
        observables,
        output_dir: config.output_dir.clone(),
        formats: config.formats.clone(),
        bit_exact: config.bit_exact,
        workers: config.workers.as_option(),
        compare_engines,
        warning,
    })
}

fn validate_mode(mode: &ModeConfig) -> Result<LindbladMode, CliError> {
    match mode {
        ModeConfig::Projectors { dim } => {
            if *dim < 2 {
                return Err(semantic(
                    "experiment.mode.dim",
                    "projector mode requires dim >= 2",
                ));
            }
            Ok(LindbladMode::Projectors { dim: *dim })
        }
        ModeConfig::SingleObservable {
            eigenvalues,
            observable,
        } => match (eigenvalues, observable) {
            (Some(_), Some(_)) => Err(semantic(
                "experiment.mode",
                "give either eigenvalues or observable, not both",
            )),
            (None, None) => Err(semantic(
                "experiment.mode",
                "single_observable mode needs eigenvalues or an observable matrix",
            )),
            (Some(ls), None) => {
                if ls.is_empty() {
                    return Err(semantic(
                        "experiment.mode.eigenvalues",
                        "eigenvalue list must be non-empty",
                    ));
                }
                if !ls.iter().all(|l| l.is_finite()) {
                    return Err(semantic(
                        "experiment.mode.eigenvalues",
                        "eigenvalues must be finite",
                    ));
                }
                Ok(LindbladMode::SingleObservable {
                    eigenvalues: ls.clone(),
                })
            }
            (None, Some(raw)) => {
                let field = "experiment.mode.observable";
                let m = raw.to_complex(field)?;
                let op = Operator::new(m).map_err(|e| semantic(field, e.to_string()))?;
                op.require_hermitian().map_err(|_| {
                    semantic(field, "a measured observable must be Hermitian (L = L†)")
                })?;
                let mat = op.matrix();
                let mut max_offdiag = 0.0f64;
                for i in 0..op.dim() {
                    for j in 0..op.dim() {
                        if i != j {
                            max_offdiag = max_offdiag.max(mat[(i, j)].norm());
                        }
                    }
                }
                if max_offdiag > 1e-10 {
                    return Err(semantic(
                        field,
                        "the computational basis is the observable's eigenbasis: \
                         supply the observable diagonalized (off-diagonals found)",
                    ));
                }
                let eigenvalues = (0..op.dim()).map(|i| mat[(i, i)].re).collect();
                Ok(LindbladMode::SingleObservable { eigenvalues })
            }
        },
    }
}

fn validate_initial(initial: &InitialConfig) -> Result<DensityMatrix, CliError> {
    match initial {
        InitialConfig::Diagonal { diag } => DensityMatrix::from_diagonal(diag)
            .map_err(|e| semantic("experiment.initial.diag", e.to_string())),
        InitialConfig::Matrix(raw) => {
            let m = raw.to_complex("experiment.initial")?;
            DensityMatrix::new(m).map_err(|e| semantic("experiment.initial", e.to_string()))
        }
    }
}

fn map_spec_error(e: qdiff_core::Error) -> CliError {
    use qdiff_core::Error as E;
    match &e {
        E::StepTooLarge { .. } => semantic("experiment.dt", e.to_string()),
        E::NotPure { .. } => semantic(
            "experiment.engine",
            format!("{e}; use density_nonlinear or linear_weighted for mixed initial states"),
        ),
        E::InvalidSpec(msg) if msg.contains("t_max/dt") => semantic("experiment.dt", msg.clone()),
        E::InvalidSpec(msg) if msg.contains("eps_endpoint") => {
            semantic("experiment.eps_endpoint", msg.clone())
        }
        E::InvalidSpec(msg) if msg.contains("record_points") => {
            semantic("experiment.record_points", msg.clone())
        }
        E::InvalidSpec(msg) if msg.contains("trajectory") => {
            semantic("experiment.trajectories", msg.clone())
        }
        _ => semantic("experiment", e.to_string()),
    }
}
