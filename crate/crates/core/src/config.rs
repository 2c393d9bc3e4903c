// SPDX-License-Identifier: MIT OR Apache-2.0

//! `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment that runs to the end of the
//! line; blank lines are ignored. Keys may contain letters, digits, `_`,
//! `-` and `.`. Values are trimmed and may be wrapped in double quotes to
//! keep a literal `#` or surrounding spaces.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    origin: String,
    /// key -> (value, 1-based line)
    entries: BTreeMap<String, (String, usize)>,
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl KeyValues {
    pub fn parse(text: &str, origin: &str) -> Result<KeyValues> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(n, format!("expected `key = value`, found {line:?}")))?;
            let key = key.trim();
            if !valid_key(key) {
                return Err(err(n, format!("invalid key {key:?}")));
            }
            let mut value = value.trim();
            if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
                value = &value[1..value.len() - 1];
            } else if value.contains('"') {
                return Err(err(n, format!("unbalanced quotes in value for {key}")));
            }
            if let Some((_, first)) = entries.insert(key.to_string(), (value.to_string(), n)) {
                return Err(err(n, format!("duplicate key {key} (first set on line {first})")));
            }
        }
        Ok(KeyValues {
            origin: origin.to_string(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<KeyValues> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KeyValues::parse(&text, &path.display().to_string())
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    /// Typed value of `key`; a value that does not parse is an error that
    /// names the line.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        let Some((value, line)) = self.entries.get(key) else {
            return Ok(None);
        };
        value.parse().map(Some).map_err(|e| Error::Parse {
            path: self.origin.clone(),
            line: *line,
            message: format!("{key}: {e}"),
        })
    }

    /// Comma-separated list value of `key`.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some((value, line)) = self.entries.get(key) else {
            return Ok(None);
        };
        value
            .split(',')
            .map(|v| v.trim().parse())
            .collect::<std::result::Result<Vec<T>, _>>()
            .map(Some)
            .map_err(|e| Error::Parse {
                path: self.origin.clone(),
                line: *line,
                message: format!("{key}: {e}"),
            })
    }

    /// Fails on the first key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for (key, (_, line)) in &self.entries {
            if !known.contains(&key.as_str()) {
                return Err(Error::Parse {
                    path: self.origin.clone(),
                    line: *line,
                    message: format!("unknown key {key}"),
                });
            }
        }
        Ok(())
    }
}
