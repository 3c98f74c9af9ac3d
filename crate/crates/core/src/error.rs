use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A keypoint set whose box or ellipse has zero extent.
    DegenerateShape,
    /// A box with a non-positive width or height.
    DegenerateBox,
    /// A loss or statistic evaluated over zero samples.
    EmptySample,
    LengthMismatch { expected: usize, found: usize },
    ShapeMismatch(String),
    /// `backward` called with activations from other parameters.
    StaleActivations,
    PlacementFailure { attempts: usize },
    InsufficientBackground,
    DivergenceDetected { epoch: usize, step: usize },
    MissingEllipse,
    InvalidArgument(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DegenerateShape => f.write_str("degenerate keypoint geometry"),
            Error::DegenerateBox => f.write_str("bounding box with non-positive extent"),
            Error::EmptySample => f.write_str("empty sample"),
            Error::LengthMismatch { expected, found } => {
                write!(f, "length mismatch: expected {expected}, found {found}")
            }
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::StaleActivations => f.write_str("activations do not belong to the current parameters"),
            Error::PlacementFailure { attempts } => {
                write!(f, "could not place faces after {attempts} attempts")
            }
            Error::InsufficientBackground => f.write_str("no background cell outside the face boxes"),
            Error::DivergenceDetected { epoch, step } => {
                write!(f, "loss became non-finite at epoch {epoch}, step {step}")
            }
            Error::MissingEllipse => f.write_str("continuous matching needs ellipses on both sides"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
