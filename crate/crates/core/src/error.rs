use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid decomposition: {0}")]
    Decomposition(String),

    #[error("index box out of range: {0}")]
    OutOfRange(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("model blew up at step {step}")]
    Blowup { step: usize },

    #[error("expected {expected} noise increments, got {got}")]
    NoiseLength { expected: usize, got: usize },

    #[error("all weights vanish")]
    DegenerateWeights,

    #[error("temperature {0} outside (0, 1]")]
    Temperature(f64),

    #[error("tempering stalled after {iterations} iterations with {remaining:.3e} temperature left")]
    TemperingStalled { iterations: usize, remaining: f64 },

    #[error("observation at ({x}, {y}) is not covered by any region")]
    Uncovered { x: usize, y: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error("assimilation step {k}: {source}")]
    AtStep {
        k: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach the assimilation index to an error raised inside a run.
    pub fn at_step(self, k: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep { k, source: Box::new(e) },
        }
    }

    /// Stable, machine-readable category used by the CLI on exit.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) | Error::Decomposition(_) | Error::OutOfRange(_) => "argument",
            Error::NonFinite(_) | Error::Blowup { .. } => "numerical",
            Error::NoiseLength { .. } => "argument",
            Error::DegenerateWeights | Error::Temperature(_) | Error::TemperingStalled { .. } => {
                "filter"
            }
            Error::Uncovered { .. } => "localization",
            Error::Config(_) => "config",
            Error::Snapshot(_) => "format",
            Error::Csv(_) | Error::Io(_) => "io",
            Error::AtStep { source, .. } => source.category(),
        }
    }

    /// Process exit code matching [`Error::category`].
    pub fn exit_code(&self) -> u8 {
        match self.category() {
            "config" | "argument" => 2,
            "io" | "format" => 3,
            "numerical" => 4,
            _ => 5,
        }
    }
}
