//! `key = value` configuration files with `[section]` headers and dotted keys.

use crate::error::{Result, WfpError};
use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

/// Line number used for values supplied with `--override`.
pub const OVERRIDE_LINE: usize = 0;

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed configuration: fully qualified keys mapped to raw values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, Entry>,
}

fn config_error(line: usize, message: impl Into<String>) -> WfpError {
    WfpError::Config { line, message: message.into() }
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key.split('.').all(|part| !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    if v.len() >= 2 && ((v.starts_with('"') && v.ends_with('"')) || (v.starts_with('\'') && v.ends_with('\''))) {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| config_error(line_no, "section header is missing ']'"))?
                    .trim();
                if !name.is_empty() && !valid_key(name) {
                    return Err(config_error(line_no, format!("invalid section name '{name}'")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_error(line_no, format!("expected 'key = value', got '{line}'")))?;
            let key = key.trim();
            if !valid_key(key) {
                return Err(config_error(line_no, format!("invalid key '{key}'")));
            }
            let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            let entry = Entry { value: unquote(value).to_string(), line: line_no };
            if let Some(prev) = entries.insert(full.clone(), entry) {
                return Err(config_error(line_no, format!("duplicate key '{full}' (first set on line {})", prev.line)));
            }
        }
        Ok(Self { entries })
    }

    /// Apply a `key=value` override, replacing any value from the file.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| config_error(OVERRIDE_LINE, format!("override '{assignment}' is not of the form key=value")))?;
        let key = key.trim();
        if !valid_key(key) {
            return Err(config_error(OVERRIDE_LINE, format!("invalid override key '{key}'")));
        }
        self.entries.insert(key.to_string(), Entry { value: unquote(value).to_string(), line: OVERRIDE_LINE });
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn reader(&self) -> ConfigReader<'_> {
        ConfigReader { file: self, used: RefCell::new(BTreeSet::new()) }
    }
}

/// Typed access that records which keys were consumed.
pub struct ConfigReader<'a> {
    file: &'a ConfigFile,
    used: RefCell<BTreeSet<String>>,
}

impl ConfigReader<'_> {
    fn entry(&self, key: &str) -> Option<&Entry> {
        let e = self.file.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(e)
    }

    pub fn has(&self, key: &str) -> bool {
        self.file.entries.contains_key(key)
    }

    /// Line of `key`, or `OVERRIDE_LINE` when absent or overridden.
    pub fn line_of(&self, key: &str) -> usize {
        self.file.entries.get(key).map_or(OVERRIDE_LINE, |e| e.line)
    }

    pub fn error(&self, key: &str, message: impl std::fmt::Display) -> WfpError {
        config_error(self.line_of(key), format!("{key}: {message}"))
    }

    pub fn string(&self, key: &str) -> Option<String> {
        self.entry(key).map(|e| e.value.clone())
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse::<T>()
                .map(Some)
                .map_err(|err| config_error(e.line, format!("{key}: cannot parse '{}': {err}", e.value))),
        }
    }

    pub fn parsed_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        let v: f64 = self.parsed_or(key, default)?;
        if !v.is_finite() {
            return Err(self.error(key, "must be finite"));
        }
        Ok(v)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.entry(key) {
            None => Ok(default),
            Some(e) => match e.value.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                other => Err(config_error(e.line, format!("{key}: expected a boolean, got '{other}'"))),
            },
        }
    }

    /// Comma-separated list of reals.
    pub fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        let Some(e) = self.entry(key) else { return Ok(None) };
        e.value
            .split(',')
            .map(|s| {
                let s = s.trim();
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| config_error(e.line, format!("{key}: '{s}' is not a finite number")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Error on the first key nobody asked for.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.file.entries.iter().find(|(k, _)| !used.contains(*k)) {
            Some((k, e)) => Err(config_error(e.line, format!("unknown key '{k}'"))),
            None => Ok(()),
        }
    }
}
