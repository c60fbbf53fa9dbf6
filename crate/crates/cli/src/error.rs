use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A broken internal contract; not expected in normal use.
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Internal(_) => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |e| CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<clld_core::Error> for CliError {
    fn from(e: clld_core::Error) -> Self {
        use clld_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Dimension { .. } => CliError::Config(msg),
            E::NonFinite(_) | E::Diverged { .. } => CliError::Numeric(msg),
            E::Checkpoint(_) | E::Version { .. } | E::Io(_) => CliError::Data(msg),
            E::Contract(_) => CliError::Internal(msg),
        }
    }
}

impl From<clld_lanes::Error> for CliError {
    fn from(e: clld_lanes::Error) -> Self {
        use clld_lanes::Error as E;
        match e {
            E::Core(inner) => inner.into(),
            E::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
