//! Flat `key = value` configuration files with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{HglError, Result};

/// Parsed entries, remembering the line each key came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| HglError::Parse {
                line: line_no,
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(HglError::Parse {
                    line: line_no,
                    reason: format!("bad key `{k}`"),
                });
            }
            if entries.insert(k.to_string(), (v.to_string(), line_no)).is_some() {
                return Err(HglError::Parse {
                    line: line_no,
                    reason: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HglError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    /// Parses `key` into `slot` when present.
    pub fn read<T>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some((v, line)) = self.entries.get(key) {
            *slot = v.parse().map_err(|e| HglError::Parse {
                line: *line,
                reason: format!("`{key}`: {e}"),
            })?;
        }
        Ok(())
    }

    /// Like [`read`](Self::read) with a custom parser.
    pub fn read_with<T>(&self, key: &str, slot: &mut T, parse: impl Fn(&str) -> Option<T>) -> Result<()> {
        if let Some((v, line)) = self.entries.get(key) {
            *slot = parse(v).ok_or_else(|| HglError::Parse {
                line: *line,
                reason: format!("`{key}`: unrecognized value `{v}`"),
            })?;
        }
        Ok(())
    }

    /// Errors on the first key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for (k, (_, line)) in &self.entries {
            if !known.contains(&k.as_str()) {
                return Err(HglError::Parse {
                    line: *line,
                    reason: format!("unknown key `{k}`"),
                });
            }
        }
        Ok(())
    }
}

/// Renders pairs as `key = value` lines.
pub fn render(pairs: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

pub fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}
