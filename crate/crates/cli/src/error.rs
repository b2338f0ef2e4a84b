use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] flowctrl::Error),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(flowctrl::Error::Config(_)) => 2,
            CliError::Core(_) => 1,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        use flowctrl::Error as E;
        match self {
            CliError::Config(_) => "config",
            CliError::Core(e) => match e {
                E::Spec(_) => "spec",
                E::Contract(_) => "contract",
                E::Config(_) => "config",
                E::NonFinite { .. } => "non_finite",
                E::FrozenBaseMutated { .. } => "frozen_base_mutated",
                E::BadMagic { .. } => "bad_magic",
                E::Truncated { .. } => "truncated",
                E::ShapeMismatch { .. } => "shape_mismatch",
                E::BadHeader { .. } => "bad_header",
                E::Io { .. } => "io",
            },
        }
    }

    /// One JSON line for standard error.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "exit_code": self.exit_code(), "message": self.to_string() })
            .to_string()
    }
}
