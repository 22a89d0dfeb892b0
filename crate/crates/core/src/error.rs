use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("flow index {flow} out of range (layer has {num_flows} flows)")]
    FlowOutOfRange { flow: usize, num_flows: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("junction misaligned at flow {flow}, stage {stage}: {detail}")]
    Junction { flow: usize, stage: usize, detail: String },

    #[error("input {height}x{width} not divisible by required factor {divisor}")]
    Divisibility { height: usize, width: usize, divisor: usize },

    #[error("optimizer step requested but no parameter has a gradient (run backward first)")]
    NoGradients,

    #[error("{0}")]
    Invalid(String),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
