//! Exit codes. Each error path has its own.

use std::fmt;
use std::path::Path;

use poa_net::client::ClientError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Reject = 1,
    Malformed = 2,
    BadConfig = 3,
    Bind = 4,
    Unreachable = 5,
    Refused = 6,
    Breach = 7,
    Io = 8,
    Internal = 9,
    Usage = 64,
}

pub const EXIT_CODES_HELP: &str = "\
Exit codes:
   0  success; certificate accepted
   1  certificate rejected (report on stdout)
   2  malformed input (not a PEM certificate)
   3  bad configuration or trust roots
   4  could not bind the listen address (port in use)
   5  a service is unreachable
   6  issuance refused (the CA's or IdP's error is printed verbatim)
   7  a security game observed a property breach
   8  file I/O error
   9  internal error
  64  command-line usage error";

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn new(exit: Exit, message: impl Into<String>) -> Self {
        Self {
            exit,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(Exit::Io, format!("{}: {e}", path.display()))
    }

    pub fn internal(e: impl fmt::Display) -> Self {
        Self::new(Exit::Internal, e.to_string())
    }

    /// A failed call to a service; an answer from the service is a refusal.
    pub fn from_client(e: ClientError) -> Self {
        let exit = match e {
            ClientError::Transport { .. } => Exit::Unreachable,
            ClientError::Api { .. } => Exit::Refused,
            ClientError::Decode { .. } => Exit::Internal,
        };
        Self::new(exit, e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}
