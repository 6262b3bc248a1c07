use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric (asymmetry {asymmetry:.3e} relative to norm {norm:.3e})")]
    NotSymmetric { asymmetry: f64, norm: f64 },

    #[error("matrix is not PSD: eigenvalue {min_eig:.3e} below -{tol:.1e} * {max_eig:.3e}")]
    NotPsd { min_eig: f64, max_eig: f64, tol: f64 },

    #[error("amplitude {0} is negative; fractional powers are undefined")]
    NegativeAmplitude(f64),

    #[error("stationary law degenerates to Dirac at s")]
    DiracCollapse,

    #[error("noise factor is stale: computed at step {computed_at}, now step {step}, refresh interval {interval}")]
    StaleFactor {
        computed_at: u64,
        step: u64,
        interval: u64,
    },

    #[error("non-finite parameter at step {step} in layer {layer}")]
    NumericalAbort { step: u64, layer: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
