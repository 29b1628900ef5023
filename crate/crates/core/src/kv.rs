//! Flat `key = value` text files. `#` starts a comment.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::parse(line, format!("expected `key = value`, got `{content}`")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::parse(line, "empty key"));
        }
        if out.iter().any(|e| e.key == key) {
            return Err(Error::parse(line, format!("duplicate key `{key}`")));
        }
        out.push(Entry {
            line,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn scalar<T: FromStr>(e: &Entry) -> Result<T> {
    e.value
        .parse()
        .map_err(|_| Error::config(&e.key, format!("cannot parse `{}` (line {})", e.value, e.line)))
}

pub fn boolean(e: &Entry) -> Result<bool> {
    match e.value.as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(&e.key, format!("expected true/false, got `{other}`"))),
    }
}

/// Comma-separated list.
pub fn list<T: FromStr>(e: &Entry) -> Result<Vec<T>> {
    if e.value.is_empty() {
        return Ok(Vec::new());
    }
    e.value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::config(&e.key, format!("cannot parse list item `{}`", s.trim())))
        })
        .collect()
}

/// `;`-separated rows of comma-separated numbers.
pub fn rows(e: &Entry) -> Result<Vec<Vec<f64>>> {
    e.value
        .split(';')
        .filter(|r| !r.trim().is_empty())
        .map(|r| {
            r.split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::config(&e.key, format!("cannot parse `{}`", s.trim())))
                })
                .collect()
        })
        .collect()
}

pub fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}
