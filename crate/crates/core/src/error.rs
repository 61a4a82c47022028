use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Two operands live on different frequency grids.
    #[error("frequency grid mismatch: {0}")]
    Grid(String),

    /// A value lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The requested noise model is not physically realizable.
    #[error("model error at {frequency:.1} Hz: {message}")]
    Model { frequency: f64, message: String },

    #[error("trace too short: {message} (need at least {required_duration:.6} s)")]
    Length {
        message: String,
        required_duration: f64,
    },

    #[error("trace alignment error: {0}")]
    Alignment(String),

    #[error("electronic noise subtraction failed at bin {bin} ({frequency:.1} Hz): dark {dark:.6} >= signal {signal:.6}")]
    Subtraction {
        bin: usize,
        frequency: f64,
        dark: f64,
        signal: f64,
    },

    #[error("{0} is outside the spectrum grid")]
    Range(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("unknown scenario preset '{0}'")]
    UnknownPreset(String),

    /// Wraps an error raised inside a named stage of a simulation run.
    #[error("stage '{stage}': {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
