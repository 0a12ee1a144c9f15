use thiserror::Error;

/// Command failures, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged at round {0}")]
    Diverged(usize),

    #[error("infeasible mask constraints: {0}")]
    Infeasible(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Sim(sparsebyz::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dataset(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Infeasible(_) => 5,
            CliError::Io { .. } | CliError::Sim(_) => 1,
        }
    }

    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<sparsebyz::Error> for CliError {
    fn from(e: sparsebyz::Error) -> Self {
        match e {
            sparsebyz::Error::MaskInfeasible(msg) => CliError::Infeasible(msg),
            sparsebyz::Error::InvalidParameter(msg) | sparsebyz::Error::Infeasible(msg) => {
                CliError::Config(msg)
            }
            other => CliError::Sim(other),
        }
    }
}
