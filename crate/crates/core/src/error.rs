use std::fmt;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("parameter `{name}` = {value} out of range: {reason}")]
    ParameterOutOfRange {
        name: String,
        value: f64,
        reason: String,
    },

    #[error("unknown parameter `{param}` for model `{model}`")]
    UnknownParameter { model: String, param: String },

    #[error("generator is not valid at x = {x:?}: row {row} {detail}")]
    InvalidGenerator {
        x: Vec<f64>,
        row: usize,
        detail: String,
    },

    #[error("generator is not irreducible{}", fmt_point(.x))]
    NotIrreducible { x: Option<Vec<f64>> },

    #[error("linear solve ill-conditioned: residual {residual:e}")]
    IllConditioned { residual: f64 },

    #[error("jump rate q[{i}][{j}] = {rate} exceeds dominating bound {bound} at x = {x:?}")]
    ZetaViolated {
        x: Vec<f64>,
        i: usize,
        j: usize,
        rate: f64,
        bound: f64,
    },

    #[error("controlled jump intensity 1 + sqrt(eps) h c = {value} is negative for pair ({i}, {j})")]
    NegativeJumpControl { i: usize, j: usize, value: f64 },

    #[error("target is not reachable: {0}")]
    Infeasible(String),

    #[error("time grids do not match: {0}")]
    GridMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn fmt_point(x: &Option<Vec<f64>>) -> String {
    match x {
        Some(x) => format!(" at x = {x:?}"),
        None => String::new(),
    }
}

impl Error {
    /// Attach the evaluation point to an irreducibility failure.
    pub fn at_point(self, point: &[f64]) -> Self {
        match self {
            Error::NotIrreducible { x: None } => Error::NotIrreducible {
                x: Some(point.to_vec()),
            },
            other => other,
        }
    }

    pub(crate) fn invalid(msg: impl fmt::Display) -> Self {
        Error::InvalidArgument(msg.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
