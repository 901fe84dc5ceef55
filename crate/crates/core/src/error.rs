//! Error types shared across the crate.

use alloc::string::String;
use core::fmt;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Tensor/operation shape disagreement. Carries the operation name and
    /// a description of the offending axes.
    Dimension { op: &'static str, detail: String },
    /// A primitive produced or received a NaN/Inf value.
    NonFinite { op: &'static str },
    /// `backward` was invoked on a non-scalar node.
    NonScalarRoot { numel: usize },
    /// Configuration value outside its documented domain.
    Config { detail: String },
    /// Utterance shorter than one model window.
    UtteranceTooShort { frames: usize, needed: usize },
    /// Input audio shorter than one analysis frame.
    EmptyAudio,
    /// Audio is not at the sample rate the frontend is configured for.
    ResampleRequired { got: u32, expected: u32 },
    /// A latency mask removed every row of a posterior track.
    DegenerateMask,
    /// An operation that requires a non-empty track received an empty one.
    EmptyTrack,
    /// Index outside the valid range for the operation.
    IndexOutOfRange { index: usize, len: usize },
    /// A gradient contained NaN; carries the parameter name.
    NanGradient { param: String },
    /// No threshold on a DET curve satisfies the requested false-reject
    /// target; carries the minimum achievable rate.
    InfeasibleOperatingPoint { min_achievable_frr: f64 },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Dimension { op, detail } => {
                write!(f, "{op}: dimension mismatch: {detail}")
            }
            CoreError::NonFinite { op } => write!(f, "{op}: non-finite value"),
            CoreError::NonScalarRoot { numel } => {
                write!(f, "backward requires a scalar root, got {numel} elements")
            }
            CoreError::Config { detail } => write!(f, "invalid configuration: {detail}"),
            CoreError::UtteranceTooShort { frames, needed } => {
                write!(f, "utterance too short: {frames} frames, need {needed}")
            }
            CoreError::EmptyAudio => write!(f, "audio shorter than one analysis frame"),
            CoreError::ResampleRequired { got, expected } => {
                write!(f, "input is {got} Hz, expected {expected} Hz; resample first")
            }
            CoreError::DegenerateMask => write!(f, "latency mask removed every track row"),
            CoreError::EmptyTrack => write!(f, "posterior track is empty"),
            CoreError::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for length {len}")
            }
            CoreError::NanGradient { param } => write!(f, "NaN gradient in parameter {param}"),
            CoreError::InfeasibleOperatingPoint { min_achievable_frr } => write!(
                f,
                "no threshold meets the false-reject target; minimum achievable FRR is {min_achievable_frr}"
            ),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
