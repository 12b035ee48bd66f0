use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("unsupported loss: {0}")]
    UnsupportedLoss(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("iterate diverged at step {step} (norm {norm:e})")]
    Divergence { step: usize, norm: f64 },

    #[error("point lies within {h:e} of the clipping boundary (margin {margin:e})")]
    ClippingBoundary { h: f64, margin: f64 },

    #[error("empty iterate log")]
    EmptyLog,

    #[error("empty privacy ledger")]
    EmptyLedger,

    #[error("order {alpha} unsupported: {reason}")]
    UnsupportedOrder { alpha: f64, reason: String },

    #[error("amplification requires sampling rate below 0.5, got {0}")]
    AmplificationPrecondition(f64),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Shape { what, expected, found })
    }
}
