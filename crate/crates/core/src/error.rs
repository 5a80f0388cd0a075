use thiserror::Error;

use crate::inversion::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("unknown condition: class {0} is not declared by the mixture")]
    UnknownClass(u32),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("mixture spec invalid at `{path}`: {message}")]
    MixtureSpec { path: String, message: String },

    #[error("predictor failed: {0}")]
    Predictor(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("step t={t}: {source}")]
    AtStep {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    /// A timestep of an inversion failed; the latents computed so far are kept.
    #[error("inversion aborted at t={t}: {source}")]
    Inversion {
        t: usize,
        #[source]
        source: Box<Error>,
        partial: Box<Trajectory>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn at_step(t: usize, source: Error) -> Self {
        Error::AtStep {
            t,
            source: Box::new(source),
        }
    }

    pub(crate) fn shape(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape { context, expected, got }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::shape(context, expected, got))
    }
}

pub(crate) fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numeric(format!("{what}[{i}] = {}", values[i]))),
    }
}
