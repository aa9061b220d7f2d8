use std::fmt;
use std::process::ExitCode;

pub const DATA: u8 = 2;
pub const CONFIG: u8 = 3;
pub const INTERNAL: u8 = 4;

/// An error tagged with the process exit code it should produce.
#[derive(Debug)]
pub struct Coded {
    pub code: u8,
    pub inner: anyhow::Error,
}

impl fmt::Display for Coded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.inner)
    }
}

impl std::error::Error for Coded {}

pub trait Classify<T> {
    fn data(self) -> anyhow::Result<T>;
    fn config(self) -> anyhow::Result<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn data(self) -> anyhow::Result<T> {
        self.map_err(|e| tag(DATA, e.into()))
    }

    fn config(self) -> anyhow::Result<T> {
        self.map_err(|e| tag(CONFIG, e.into()))
    }
}

pub fn tag(code: u8, inner: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(Coded { code, inner })
}

pub fn config_error(msg: impl fmt::Display) -> anyhow::Error {
    tag(CONFIG, anyhow::anyhow!("{msg}"))
}

pub fn data_error(msg: impl fmt::Display) -> anyhow::Error {
    tag(DATA, anyhow::anyhow!("{msg}"))
}

/// Prints the error to stderr and maps it to an exit code; untagged errors are internal.
pub fn report(err: &anyhow::Error) -> ExitCode {
    let code = match err.downcast_ref::<Coded>() {
        Some(c) => {
            eprintln!("error: {c}");
            c.code
        }
        None => {
            eprintln!("error: {err:#}");
            INTERNAL
        }
    };
    ExitCode::from(code)
}
