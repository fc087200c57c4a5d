use alloc::string::String;
use core::fmt;

use crate::model::ModuleId;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A face box too small (or collapsed by clamping) to produce a crop.
    DegenerateBox {
        w: f64,
        h: f64,
    },
    /// An operation that needs at least one element got none.
    Empty(&'static str),
    LengthMismatch {
        expected: usize,
        found: usize,
    },
    Shape(String),
    InvalidConfig(String),
    /// Training or inference produced NaN/inf.
    NonFinite(&'static str),
    MissingVerdict(ModuleId),
    EmptySubset,
    /// The face box leaves too little body to classify.
    FaceCoversBody {
        coverage: f64,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DegenerateBox { w, h } => write!(f, "degenerate face box {w:.2}x{h:.2}"),
            Error::Empty(what) => write!(f, "empty input: {what}"),
            Error::LengthMismatch { expected, found } => {
                write!(f, "length mismatch: expected {expected}, found {found}")
            }
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::NonFinite(what) => write!(f, "non-finite values in {what} (training diverged?)"),
            Error::MissingVerdict(m) => write!(f, "missing verdict from module {m}"),
            Error::EmptySubset => write!(f, "module subset is empty"),
            Error::FaceCoversBody { coverage } => {
                write!(
                    f,
                    "face box covers {:.0}% of the body crop",
                    coverage * 100.0
                )
            }
        }
    }
}

impl core::error::Error for Error {}
