use std::fmt;

/// Failure of a subcommand, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or malformed inputs, unwritable outputs.
    Invalid(String),
    /// The optimizer produced a non-finite loss.
    Abort(String),
    /// Some experiment runs failed; the rest of the report was written.
    Partial(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Abort(_) => 3,
            CliError::Partial(_) => 4,
        }
    }

    pub fn invalid(msg: impl fmt::Display) -> Self {
        CliError::Invalid(msg.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "invalid input: {m}"),
            CliError::Abort(m) => write!(f, "numerical abort: {m}"),
            CliError::Partial(m) => write!(f, "partial failure: {m}"),
        }
    }
}

impl From<warpforge::Error> for CliError {
    fn from(e: warpforge::Error) -> Self {
        match e {
            warpforge::Error::NumericalAbort { .. } => CliError::Abort(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
