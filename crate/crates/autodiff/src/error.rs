use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: {what} mismatch (expected {expected}, got {got})")]
    ShapeMismatch { op: &'static str, what: String, expected: usize, got: usize },

    #[error("{op}: expected rank {expected} input, got shape {shape:?}")]
    Rank { op: &'static str, expected: usize, shape: Vec<usize> },

    #[error("{op}: {what} of size {size} is not divisible by {factor}")]
    NotDivisible { op: &'static str, what: String, size: usize, factor: usize },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("routed_conv2d: route value {value} at (b={b}, y={y}, x={x}) outside 1..={max}")]
    RouteOutOfRange { value: u32, max: usize, b: usize, y: usize, x: usize },

    #[error("cross_entropy_map: target at (b={b}, y={y}, x={x}) is not a distribution (sum {sum})")]
    InvalidTarget { b: usize, y: usize, x: usize, sum: f64 },

    #[error("cross_entropy_map: label {label} at (b={b}, y={y}, x={x}) outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize, b: usize, y: usize, x: usize },

    #[error("backward() needs a scalar root, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("sgd_step: active tensor '{name}' has no gradient")]
    MissingGrad { name: String },
}
