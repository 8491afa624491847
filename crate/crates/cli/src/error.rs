use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, configuration or inputs.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] tcgan::Error),
}

impl CliError {
    /// 1 for training or compute failures, 2 for usage and I/O problems.
    pub fn exit_code(&self) -> i32 {
        use tcgan::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                E::Io { .. }
                | E::Image { .. }
                | E::Json(_)
                | E::Config(_)
                | E::CheckpointVersion { .. }
                | E::CheckpointCorrupt { .. }
                | E::ToolNotInstalled(_)
                | E::StageOutOfRange { .. }
                | E::DegenerateSchedule { .. } => 2,
                _ => 1,
            },
        }
    }
}
