use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// Variants are grouped by the exit code the CLI maps them to, see
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    // --- input / format ---
    #[error("row {0} has (near-)zero norm and cannot be l2-normalized")]
    ZeroNormRow(usize),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("label {label} at row {row} is outside [0, {n_classes})")]
    LabelOutOfRange {
        row: usize,
        label: i64,
        n_classes: usize,
    },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("score vectors must be non-empty")]
    EmptyScores,
    #[error("input has zero variance; correlation is undefined")]
    ConstantInput,
    #[error("direction {0} has (near-)zero projected variance")]
    DegenerateDirection(usize),
    #[error("matrix is not positive semi-definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    // --- npy container ---
    #[error("{path}: bad magic bytes at offset {offset}")]
    BadMagic { path: PathBuf, offset: u64 },
    #[error("{path}: unsupported npy version {major}.{minor} at offset {offset}")]
    UnsupportedVersion {
        path: PathBuf,
        offset: u64,
        major: u8,
        minor: u8,
    },
    #[error("{path}: unsupported dtype {descr:?} at offset {offset}")]
    UnsupportedDtype {
        path: PathBuf,
        offset: u64,
        descr: String,
    },
    #[error("{path}: fortran_order=True is not supported (header at offset {offset})")]
    FortranOrderUnsupported { path: PathBuf, offset: u64 },
    #[error("{path}: payload truncated at offset {offset} (expected {expected} bytes of data)")]
    TruncatedPayload {
        path: PathBuf,
        offset: u64,
        expected: u64,
    },
    #[error("{path}: unsupported array shape {shape:?}")]
    UnsupportedShape { path: PathBuf, shape: Vec<usize> },
    #[error("{path}: malformed header at offset {offset}: {reason}")]
    MalformedHeader {
        path: PathBuf,
        offset: u64,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("fit file: {0}")]
    FitFile(String),
    #[error("report: {0}")]
    Report(String),

    // --- numerical ---
    #[error("covariance factorization failed at shrinkage {eps:e}")]
    SingularCovariance { eps: f64 },
    #[error("{method} produced a non-finite score at row {row}")]
    NonFiniteScore { method: String, row: usize },

    // --- configuration ---
    #[error(
        "fit normalization flag is {fit_normalized} but scorer requested normalized={requested}"
    )]
    FitMismatch {
        fit_normalized: bool,
        requested: bool,
    },
    #[error("method requires a classifier head (or precomputed logits)")]
    MissingHead,
    #[error("method requires training features")]
    MissingTrain,
    #[error("no methods requested")]
    NoMethods,
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Process exit code for this error: 2 input/format, 3 numerical, 4 configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Context { source, .. } => source.exit_code(),
            Error::SingularCovariance { .. } | Error::NonFiniteScore { .. } => 3,
            Error::FitMismatch { .. }
            | Error::MissingHead
            | Error::MissingTrain
            | Error::NoMethods
            | Error::UnknownMethod(_)
            | Error::InvalidConfig(_) => 4,
            _ => 2,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Strips any [`Error::Context`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub trait ResultExt<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| e.context(context()))
    }
}
