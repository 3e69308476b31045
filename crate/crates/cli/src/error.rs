use std::fmt;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Usage = 1,
    Data = 2,
    Infeasible = 3,
}

/// A failure that ends the process: exit status, machine-readable code and message.
#[derive(Debug)]
pub struct CliError {
    pub status: Status,
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            status: Status::Usage,
            code: "E_USAGE",
            message: message.into(),
        }
    }

    pub fn infeasible(message: impl Into<String>) -> Self {
        CliError {
            status: Status::Infeasible,
            code: "E_INFEASIBLE",
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        CliError {
            status: Status::Data,
            code: "E_IO",
            message: format!("{}: {err}", path.display()),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.status as u8)
    }
}

impl From<actassign::Error> for CliError {
    fn from(err: actassign::Error) -> Self {
        CliError {
            status: Status::Data,
            code: err.code(),
            message: err.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    // always a single line, whatever the underlying message looks like
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat: Vec<&str> = self.message.split_whitespace().collect();
        write!(f, "error[{}]: {}", self.code, flat.join(" "))
    }
}

pub type CliResult<T> = Result<T, CliError>;
