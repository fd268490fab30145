use std::fmt;
use std::path::Path;

/// A failure with a stable machine-readable code, printed as
/// `error: <code>: <detail>` on a single line.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub detail: String,
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn new(code: &'static str, detail: impl Into<String>) -> Self {
        let detail: String = detail.into();
        // keep the message on one line
        let detail = detail.split_whitespace().collect::<Vec<_>>().join(" ");
        CliError { code, detail }
    }

    pub fn usage(detail: impl Into<String>) -> Self {
        Self::new("usage", detail)
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Self::new("config", detail)
    }

    pub fn data(detail: impl Into<String>) -> Self {
        Self::new("data", detail)
    }

    pub fn checkpoint(detail: impl Into<String>) -> Self {
        Self::new("checkpoint", detail)
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new("io", format!("{}: {err}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        if self.code == "usage" {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error: {}: {}", self.code, self.detail)
    }
}

impl std::error::Error for CliError {}

impl From<ilmt_core::Error> for CliError {
    fn from(e: ilmt_core::Error) -> Self {
        use ilmt_core::Error as E;
        let code = match e {
            E::Config(_) => "config",
            E::UnknownLanguage(_) => "language",
            E::NonFinite(_) => "numeric",
            E::TooLong { .. } | E::Index { .. } | E::Empty(_) | E::InvalidArgument(_) => "data",
            E::Shape { .. } | E::NonScalarLoss(_) => "model",
        };
        CliError::new(code, e.to_string())
    }
}
