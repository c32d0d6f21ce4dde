use thiserror::Error;

/// Errors produced by the simulation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid error: {0}")]
    Grid(String),

    #[error("JSA construction error: {0}")]
    Jsa(String),

    #[error("spectrum fit did not converge: best normalized RMS residual {residual:.3e}")]
    FitNonConvergence { residual: f64 },

    #[error("covariance error: {0}")]
    Covariance(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("WDM reduction error: {0}")]
    Wdm(String),

    #[error("optical train error: {0}")]
    Optics(String),

    #[error("detection model error: {0}")]
    Detection(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("oracle mismatch: {0}")]
    OracleMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse classification used by the CLI to derive exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numerical,
    OracleMismatch,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Grid(_) | Error::Jsa(_) | Error::Wdm(_) | Error::Optics(_) => {
                ErrorClass::Config
            }
            Error::Detection(_) | Error::Config(_) | Error::Io(_) => ErrorClass::Config,
            Error::FitNonConvergence { .. }
            | Error::Covariance(_)
            | Error::Numerical(_) => ErrorClass::Numerical,
            Error::OracleMismatch(_) => ErrorClass::OracleMismatch,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
