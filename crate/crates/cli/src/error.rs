use scalesplat::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    NotConverged(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn missing(what: &str, path: &std::path::Path) -> Self {
        CliError::Input(format!("{what} not found: {}", path.display()))
    }

    /// 2 input error, 3 non-convergence, 4 internal numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::NotConverged(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Core(e) => match e {
                Error::InjectivityRadius { .. }
                | Error::Degenerate(_)
                | Error::StaleBuffers
                | Error::NonFiniteLoss { .. }
                | Error::Numeric(_) => 4,
                _ => 2,
            },
        }
    }
}
