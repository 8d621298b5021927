//! One-line machine-readable failures.

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub msg: String,
}

impl CliError {
    pub fn new(kind: &str, msg: impl Into<String>) -> Self {
        Self { kind: kind.to_string(), msg: msg.into() }
    }
}

impl From<knowsite::Error> for CliError {
    fn from(e: knowsite::Error) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new("json", e.to_string())
    }
}
