use must_core::MustError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] MustError),

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}
