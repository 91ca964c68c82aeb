use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] vecplan::Error),
    #[error("{0}")]
    Usage(String),
    #[error("output drift: {0}")]
    Drift(String),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Usage(_) => "usage",
            CliError::Drift(_) => "drift",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" => 2,
            "config" | "parse" => 3,
            "missing-file" => 4,
            "checkpoint" => 5,
            "divergence" => 6,
            "drift" => 7,
            _ => 1,
        }
    }
}
