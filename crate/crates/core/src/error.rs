use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] handcue_tensor::TensorError),
    #[error("degenerate hand: {0}")]
    DegenerateHand(String),
    #[error("crop box does not intersect the image")]
    EmptyIntersection,
    #[error("invalid depth reading {0}")]
    InvalidDepth(f64),
    #[error("invalid calibration: {0}")]
    Calibration(String),
    #[error("invalid box ({l}, {t}, {r}, {b})")]
    InvalidBox { l: f64, t: f64, r: f64, b: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("raw grid has {got} channels, expected {expected}")]
    ChannelCount { got: usize, expected: usize },
    #[error("training diverged (seed {seed}, step {step}): {reason}")]
    Diverged { seed: u64, step: usize, reason: String },
    #[error("timestamp went backwards: {prev} ms then {next} ms")]
    NonMonotone { prev: u64, next: u64 },
    #[error("frozen backbone changed during training (checksum {before} -> {after})")]
    BackboneChanged { before: String, after: String },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("unsupported protocol version {got}; supported: {supported:?}")]
    Version { got: u16, supported: Vec<u16> },
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
