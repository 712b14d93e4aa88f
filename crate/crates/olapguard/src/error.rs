use std::fmt;
use std::io;
use std::path::PathBuf;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const PARSE: u8 = 2;
    pub const INVARIANT: u8 = 3;
    pub const IO: u8 = 4;
}

/// One rejected input field. An empty path means the whole document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub path: String,
    pub message: String,
}

impl Problem {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}", render_parse(.file, .problems))]
    Parse {
        file: Option<PathBuf>,
        problems: Vec<Problem>,
    },
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invariant violated: {}", .0.join("; "))]
    Invariant(Vec<String>),
}

fn render_parse(file: &Option<PathBuf>, problems: &[Problem]) -> String {
    let prefix = file.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default();
    problems
        .iter()
        .map(|p| format!("{prefix}{p}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Error {
    pub fn parse(problems: Vec<Problem>) -> Self {
        Error::Parse { file: None, problems }
    }

    pub fn field(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::parse(vec![Problem::new(path, message)])
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches the offending file to a parse error.
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        match self {
            Error::Parse { file: None, problems } => Error::Parse {
                file: Some(path.into()),
                problems,
            },
            other => other,
        }
    }

    pub fn problems(&self) -> &[Problem] {
        match self {
            Error::Parse { problems, .. } => problems,
            _ => &[],
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Parse { .. } => exit::PARSE,
            Error::Invariant(_) => exit::INVARIANT,
            Error::Io { .. } => exit::IO,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
