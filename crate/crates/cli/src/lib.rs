//! Library half of the `qdiff` binary: config parsing and validation, the
//! three subcommands, and atomic artifact writing. Kept as a library so the
//! integration and acceptance suites can drive commands in-process.

pub mod commands;
pub mod config;

/// Stable process exit codes.
#[derive(Clone, Debug)]
pub enum CliError {
    /// Config file could not be read or parsed (exit 2).
    Parse(String),
    /// Config parsed but failed validation; carries the field path (exit 3).
    Semantic { field: String, message: String },
    /// One or more trajectories failed; partial artifacts written (exit 4).
    Trajectory(String),
    /// Filesystem failure (exit 5).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) => 2,
            CliError::Semantic { .. } => 3,
            CliError::Trajectory(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Parse(m) => write!(f, "parse error: {m}"),
            CliError::Semantic { field, message } => {
                write!(f, "invalid config at `{field}`: {message}")
            }
            CliError::Trajectory(m) => write!(f, "trajectory failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}
