use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("slot indices not contiguous: expected {expected}, found {found} (line {line})")]
    SlotGap {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("insufficient history: need {needed} slots, have {available}; fall back to persistence prediction")]
    InsufficientHistory { needed: usize, available: usize },

    #[error("trace too short: slot {requested} requested, trace has {available} slots")]
    TraceRange { requested: usize, available: usize },

    #[error("capability exceeded: {0}")]
    Capability(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("simulation failed for job {job}, policy {policy}: {source}")]
    Simulation {
        job: usize,
        policy: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Configuration problems versus runtime/capability failures; the CLI
    /// maps these to different exit codes.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::SlotGap { .. }
            | Error::InvalidParameter(_)
            | Error::Config(_) => true,
            Error::Simulation { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
