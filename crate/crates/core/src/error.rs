use thiserror::Error;

/// Errors produced by the estimation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix {index} is not orthogonal (max deviation {deviation:e})")]
    NotOrthogonal { index: usize, deviation: f64 },

    #[error("group is not closed: product of elements {left} and {right} is not in the list")]
    NotClosed { left: usize, right: usize },

    #[error("group has no identity element")]
    MissingIdentity,

    #[error("invalid group distribution: {0}")]
    InvalidDistribution(String),

    #[error("moment tensors agree up to order {max_order}; no distinguishing order")]
    NoDistinguishingOrder { max_order: usize },

    #[error("quadrature supports output dimension K <= 2, got K = {0}")]
    QuadratureDimension(usize),

    #[error("Monte Carlo variance unreliable (kurtosis {kurtosis:.3e} with {samples} samples)")]
    UnreliableVariance { kurtosis: f64, samples: usize },

    #[error("witness is indistinguishable from the true model; the bound carries no information")]
    WitnessEquivalent,

    #[error("infeasible constraints: {0}")]
    Infeasible(String),

    #[error("malformed batch file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
