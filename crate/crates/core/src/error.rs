use thiserror::Error;

/// Errors produced anywhere in the acquisition pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite numerical state: {0}")]
    Numerical(String),

    #[error("model has no opaque content: {0}")]
    EmptyModel(String),

    #[error("no reachable candidate pose")]
    NoReachablePose,

    #[error("budget exhausted: spent {spent} + cost {cost} exceeds total {total}")]
    BudgetExhausted { spent: f64, cost: f64, total: f64 },

    #[error("pose reacquisition rejected: ssd per pixel {per_pixel} above threshold {threshold}")]
    ReacquisitionRejected { per_pixel: f64, threshold: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
