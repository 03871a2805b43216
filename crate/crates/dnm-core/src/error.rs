//! Error type shared by all modules of the crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two tensors that must agree in shape do not.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single tensor has a shape the operation cannot accept.
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    /// Tensor construction with inconsistent shape/value lengths.
    LengthMismatch { expected: usize, got: usize },
    /// Non-finite values fed where finite ones are required.
    NonFinite { context: &'static str },
    /// `backward` or `grad_check` applied to a non-scalar output.
    NonScalarOutput { shape: Vec<usize> },
    /// A gradient turned non-finite; the optimizer step was aborted.
    NonFiniteGradient { param: String },
    /// The training loss turned non-finite at the given step.
    NonFiniteLoss { step: usize },
    /// Pyramid / total-cost inputs disagree on the number of scales.
    ScaleCountMismatch { expected: usize, got: usize },
    /// Configuration value out of its documented range.
    InvalidConfig(String),
    /// A scene request exceeds the representable disparity bound.
    DisparityOutOfBounds { requested_px: f64, bound_px: f64 },
    /// Checkpoint bytes that do not decode.
    CorruptCheckpoint(String),
    /// An operation that needs data got none (empty sample set, all-invalid mask).
    EmptyInput { what: &'static str },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::BadShape { op, shape, reason } => {
                write!(f, "{op}: bad shape {shape:?}: {reason}")
            }
            Error::LengthMismatch { expected, got } => {
                write!(f, "value buffer length {got} does not match shape product {expected}")
            }
            Error::NonFinite { context } => write!(f, "non-finite values in {context}"),
            Error::NonScalarOutput { shape } => {
                write!(f, "expected a scalar output, got shape {shape:?}")
            }
            Error::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient for parameter {param}; step aborted")
            }
            Error::NonFiniteLoss { step } => write!(f, "non-finite loss at step {step}"),
            Error::ScaleCountMismatch { expected, got } => {
                write!(f, "expected {expected} pyramid scales, got {got}")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::DisparityOutOfBounds {
                requested_px,
                bound_px,
            } => write!(
                f,
                "requested disparity {requested_px} px exceeds bound {bound_px} px"
            ),
            Error::CorruptCheckpoint(msg) => write!(f, "corrupt checkpoint: {msg}"),
            Error::EmptyInput { what } => write!(f, "no usable input: {what}"),
        }
    }
}

impl core::error::Error for Error {}
