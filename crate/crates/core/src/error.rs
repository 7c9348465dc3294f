use thiserror::Error;

/// Errors raised by grid construction, solvers and the pipeline stages.
#[derive(Error, Debug)]
pub enum Error {
    #[error("grid: {0}")]
    Grid(String),

    #[error("invalid fluid state: {0}")]
    State(String),

    #[error("config: {0}")]
    Config(String),

    #[error("solver `{stage}`: {message}")]
    Solver { stage: &'static str, message: String },

    #[error("solvability violated in `{stage}`: residual {residual:.3e} exceeds {tolerance:.3e}")]
    Solvability {
        stage: &'static str,
        residual: f64,
        tolerance: f64,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn solver(stage: &'static str, message: impl Into<String>) -> Self {
        Error::Solver {
            stage,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
