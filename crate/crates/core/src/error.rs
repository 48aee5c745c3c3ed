use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Image side is not a power of two, or the image is not square.
    BadImageShape { side: usize, len: usize },
    ShapeMismatch { expected: usize, found: usize },
    LevelsOutOfRange { levels: usize, max: usize },
    AlphaOutOfRange(f64),
    NonPositiveScale(f64),
    InvalidArgument(String),
    EmptySet,
    /// A glyph handed to the font encoder has no character embedding.
    MissingEmbedding(u32),
    TooFewFamilies(usize),
    EmptyTrainSplit,
    UnknownChar(u32),
    UnknownFont(String),
    NonFinite(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::BadImageShape { side, len } => {
                write!(f, "image must be square with power-of-two side (side {side}, {len} pixels)")
            }
            Error::ShapeMismatch { expected, found } => {
                write!(f, "shape mismatch: expected {expected} elements, found {found}")
            }
            Error::LevelsOutOfRange { levels, max } => {
                write!(f, "wavelet depth {levels} outside 1..={max}")
            }
            Error::AlphaOutOfRange(a) => write!(f, "shape parameter {a} outside (0, 2]"),
            Error::NonPositiveScale(s) => write!(f, "scale parameter must be positive, got {s}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::EmptySet => write!(f, "encoder input set is empty"),
            Error::MissingEmbedding(c) => write!(f, "no character embedding for U+{c:04X}"),
            Error::TooFewFamilies(n) => {
                write!(f, "need at least 3 font families to split, found {n}")
            }
            Error::EmptyTrainSplit => write!(f, "train split has no usable fonts"),
            Error::UnknownChar(c) => write!(f, "no inferred embedding for character U+{c:04X}"),
            Error::UnknownFont(id) => write!(f, "unknown font '{id}'"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
