use thiserror::Error;

/// Errors shared by every module in the crate.
#[derive(Debug, Error)]
pub enum CobraError {
    #[error("value {value} at ({row}, {col}) is outside the {scheme} domain")]
    DomainValue {
        row: usize,
        col: usize,
        value: i32,
        scheme: &'static str,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("operand bit lengths differ: {a} vs {b}")]
    BitLengthMismatch { a: usize, b: usize },

    #[error("don't-care count required for a (0,1) operand but not supplied")]
    MissingDcInput,

    #[error("don't-care count supplied for a (-1,1) operand")]
    UnexpectedDcInput,

    #[error("polarized-softmax thresholds required for the attention-score mode")]
    MissingSpsThresholds,

    #[error("threshold vector required for mode {0}")]
    MissingTheta(&'static str),

    #[error("accumulation target required for the second FFN mode")]
    MissingAccumulator,

    #[error("set bit beyond the declared {nbits}-bit length")]
    StrayBits { nbits: usize },

    #[error("pad bits of a packed matrix are nonzero")]
    PadBitsNonzero,

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("scaling factor must be a positive real, got {0}")]
    InvalidAlpha(f64),

    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed {format} data at byte {offset}: {detail}")]
    Format {
        format: &'static str,
        offset: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CobraError>;
