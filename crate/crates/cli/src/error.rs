use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config keys or values.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] pnen::Error),
    /// A check that ran to completion but did not pass.
    #[error("{0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(pnen::Error::Config(_)) => 2,
            CliError::Core(pnen::Error::Data(_) | pnen::Error::Io { .. }) => 3,
            CliError::Core(_) | CliError::Check(_) => 4,
        }
    }

    /// The message flattened to one line.
    pub fn one_line(&self) -> String {
        self.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
    }
}
