use std::fmt;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector")]
    DegenerateVector,
    #[error("degenerate encoding")]
    DegenerateEncoding,
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("symmetric initialization forbidden: {p} negative prompts need jitter > 0")]
    SymmetricInit { p: usize },
    #[error(
        "fingerprint mismatch: checkpoint expects {expected:#018x}, encoder has {found:#018x}"
    )]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("positive prompt must be frozen before negative training")]
    UnfrozenPositive,
    #[error("negprompt scorer needs at least one negative prompt")]
    NoNegatives,
    #[error("non-finite loss in {stage} at epoch {epoch}: {detail}")]
    NonFiniteLoss {
        stage: &'static str,
        epoch: usize,
        detail: String,
    },
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }
}

/// Binary format failure, positioned at the byte where decoding stopped.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{format} parse error at byte {offset}: {kind}")]
pub struct ParseError {
    pub format: &'static str,
    pub offset: u64,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParseErrorKind {
    BadMagic { found: [u8; 4] },
    BadVersion(u16),
    Truncated { needed: usize, available: usize },
    BadTag { field: &'static str, value: u64 },
    BadUtf8,
    NormOutOfTolerance { norm: f64 },
    NonFinite,
    DuplicateName(String),
    Empty(&'static str),
    FingerprintMismatch { stored: u64, computed: u64 },
    TrailingBytes(usize),
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::BadMagic { found } => write!(f, "bad magic {found:?}"),
            ParseErrorKind::BadVersion(v) => write!(f, "unsupported version {v}"),
            ParseErrorKind::Truncated { needed, available } => {
                write!(f, "truncated: needed {needed} bytes, {available} available")
            }
            ParseErrorKind::BadTag { field, value } => write!(f, "invalid {field} value {value}"),
            ParseErrorKind::BadUtf8 => write!(f, "name is not valid UTF-8"),
            ParseErrorKind::NormOutOfTolerance { norm } => {
                write!(f, "norm out of tolerance ({norm})")
            }
            ParseErrorKind::NonFinite => write!(f, "non-finite value"),
            ParseErrorKind::DuplicateName(n) => write!(f, "duplicate class name `{n}`"),
            ParseErrorKind::Empty(what) => write!(f, "empty {what}"),
            ParseErrorKind::FingerprintMismatch { stored, computed } => write!(
                f,
                "fingerprint mismatch: stored {stored:#018x}, computed {computed:#018x}"
            ),
            ParseErrorKind::TrailingBytes(n) => write!(f, "{n} trailing bytes"),
        }
    }
}

/// Config text failure. Syntax problems carry a line, invariant problems a key.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("`{key}`: {message}")]
    Value { key: String, message: String },
}
