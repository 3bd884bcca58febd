use std::fmt;
use std::process::ExitCode;

use port_core::Error as CoreError;

pub const OK: u8 = 0;
pub const BAD_INPUT: u8 = 2;
pub const RUNTIME: u8 = 3;

/// Marks an error as caused by the caller's input.
#[derive(Debug)]
pub struct InputError(pub anyhow::Error);

impl InputError {
    pub fn wrap(e: anyhow::Error) -> anyhow::Error {
        anyhow::Error::new(InputError(e))
    }

    pub fn msg(m: impl Into<String>) -> anyhow::Error {
        Self::wrap(anyhow::anyhow!(m.into()))
    }
}

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for InputError {}

fn core_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Diverged { .. }
        | CoreError::NonFiniteGradient { .. }
        | CoreError::NonDeterministic { .. }
        | CoreError::DegenerateDistribution
        | CoreError::NotScalar(_)
        | CoreError::IndexOutOfRange { .. } => RUNTIME,
        _ => BAD_INPUT,
    }
}

pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<InputError>() {
            return BAD_INPUT;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return core_code(e);
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return BAD_INPUT;
        }
    }
    RUNTIME
}

/// Prints `err` on one line and maps it to an exit code.
pub fn report(err: anyhow::Error) -> ExitCode {
    let code = code_for(&err);
    let kind = if code == BAD_INPUT {
        "input"
    } else {
        "runtime"
    };
    let line = format!("{err:#}").replace(['\n', '\r'], " ");
    eprintln!("error[{kind}]: {line}");
    ExitCode::from(code)
}
