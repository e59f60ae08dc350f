//! Error kinds and their process exit codes.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Other,
    Config,
    MissingInput,
    ShapeMismatch,
    NumericalAbort,
}

impl ExitKind {
    pub fn code(self) -> u8 {
        match self {
            ExitKind::Other => 1,
            ExitKind::Config => 2,
            ExitKind::MissingInput => 3,
            ExitKind::ShapeMismatch => 4,
            ExitKind::NumericalAbort => 5,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<stad_core::Error> for CliError {
    fn from(e: stad_core::Error) -> Self {
        use stad_core::Error as E;
        let kind = match &e {
            E::Config(_) | E::Json(_) | E::InvalidTarget(_) | E::InvalidCovariance | E::TimeRange { .. } => ExitKind::Config,
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => ExitKind::MissingInput,
            E::DimensionMismatch { .. } | E::ShapeError(_) | E::Checkpoint(_) => ExitKind::ShapeMismatch,
            E::NonFiniteOperator
            | E::NonFiniteLoss { .. }
            | E::NonFiniteField { .. }
            | E::Stiffness { .. }
            | E::CorruptModel
            | E::SingularTime(_) => ExitKind::NumericalAbort,
            E::Io(_) => ExitKind::Other,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        let kind = if e.kind() == std::io::ErrorKind::NotFound {
            ExitKind::MissingInput
        } else {
            ExitKind::Other
        };
        Self::new(kind, e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::new(ExitKind::Other, e.to_string())
    }
}
