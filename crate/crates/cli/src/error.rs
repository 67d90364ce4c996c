use std::fmt;

/// Process exit status for each failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Config,
    Data,
    Internal,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        match self {
            ExitKind::Config => 2,
            ExitKind::Data => 3,
            ExitKind::Internal => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Config,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Data,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Internal,
            message: message.into(),
        }
    }

    pub fn context(self, what: impl fmt::Display) -> Self {
        Self {
            message: format!("{what}: {}", self.message),
            ..self
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<tdd_core::Error> for CliError {
    fn from(e: tdd_core::Error) -> Self {
        use tdd_core::Error as E;
        let kind = match &e {
            E::InvalidArgument(_) => ExitKind::Config,
            E::Io { .. }
            | E::Json { .. }
            | E::Image { .. }
            | E::BadMagic(_)
            | E::Truncated(_)
            | E::DimensionOverflow(_)
            | E::EmptyImage
            | E::MissingGroup { .. }
            | E::FrameOutOfRange { .. }
            | E::NegativeValue { .. }
            | E::TooFewSamples { .. } => ExitKind::Data,
            _ => ExitKind::Internal,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
