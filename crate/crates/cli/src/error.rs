use serde::Serialize;

/// Exit status for configuration and input problems.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for failures while computing.
pub const EXIT_RUNTIME: i32 = 3;

/// The machine-readable report printed on stderr.
#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub stage: &'static str,
    pub kind: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicate: Option<usize>,
    #[serde(skip)]
    pub exit_code: i32,
}

impl CliError {
    pub fn usage(stage: &'static str, kind: &str, message: String) -> Self {
        CliError { stage, kind: kind.into(), message, replicate: None, exit_code: EXIT_USAGE }
    }

    pub fn missing_input(stage: &'static str, message: String) -> Self {
        Self::usage(stage, "missing-input", message)
    }

    /// A library error raised while validating inputs.
    pub fn invalid(stage: &'static str, e: impl Into<ccnn_core::Error>) -> Self {
        let e = e.into();
        CliError { stage, kind: e.kind().into(), message: e.to_string(), replicate: None, exit_code: EXIT_USAGE }
    }

    /// A library error raised while computing.
    pub fn runtime(stage: &'static str, e: impl Into<ccnn_core::Error>) -> Self {
        let e = e.into();
        let replicate = match &e {
            ccnn_core::Error::Bootstrap(b) => b.replicate(),
            _ => None,
        };
        CliError { stage, kind: e.kind().into(), message: e.to_string(), replicate, exit_code: EXIT_RUNTIME }
    }

    pub fn io(stage: &'static str, what: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError {
            stage,
            kind: "io".into(),
            message: format!("{}: {e}", what.display()),
            replicate: None,
            exit_code: EXIT_RUNTIME,
        }
    }
}
