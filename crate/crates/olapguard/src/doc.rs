use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Problem, Result};

pub(crate) fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn tidy_path(p: String) -> String {
    if p == "." {
        String::new()
    } else {
        p
    }
}

/// Strict TOML decoding; the problem names the failing field.
pub(crate) fn from_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = tidy_path(e.path().to_string());
        let inner = e.into_inner();
        let mut message = inner.message().trim().to_string();
        if let Some(span) = inner.span() {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            message = format!("{message} (line {line})");
        }
        Error::field(path, message)
    })
}

/// JSON decoding of an already parsed value; `prefix` is its location.
pub(crate) fn from_json<T: DeserializeOwned>(value: serde_json::Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = join(prefix, &tidy_path(e.path().to_string()));
        Error::field(path, e.into_inner().to_string())
    })
}

pub(crate) fn join(prefix: &str, path: &str) -> String {
    match (prefix.is_empty(), path.is_empty()) {
        (true, _) => path.to_string(),
        (false, true) => prefix.to_string(),
        (false, false) if path.starts_with('[') => format!("{prefix}{path}"),
        (false, false) => format!("{prefix}.{path}"),
    }
}

pub(crate) fn problems_to_error(problems: Vec<Problem>) -> Result<()> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::parse(problems))
    }
}
