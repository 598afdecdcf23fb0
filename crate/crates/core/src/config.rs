//! Flat `key=value` configuration text.
//!
//! One entry per line; blank lines and lines starting with `#` are ignored;
//! whitespace around keys and values is trimmed. Duplicate keys are errors.
//! Consumers take the keys they understand and call [`KeyValues::finish`] to
//! reject anything left over.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {}: expected key=value, got {raw:?}", i + 1))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::invalid(format!("config line {}: empty key", i + 1)));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::invalid(format!("config key {k:?} given twice")));
            }
        }
        Ok(Self { entries })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Sets or replaces an entry (command-line overrides).
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Removes and parses `key`.
    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::invalid(format!("config key {key}: {v:?}: {e}"))),
        }
    }

    /// Removes and parses `key`, falling back to `default`.
    pub fn take_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Removes a comma-separated list.
    pub fn take_list<T>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| Error::invalid(format!("config key {key}: {s:?}: {e}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Removes a list of exactly `N` values.
    pub fn take_array<T, const N: usize>(&mut self, key: &str) -> Result<Option<[T; N]>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.take_list::<T>(key)? {
            None => Ok(None),
            Some(v) => {
                let n = v.len();
                v.try_into()
                    .map(Some)
                    .map_err(|_| Error::invalid(format!("config key {key}: expected {N} values, got {n}")))
            }
        }
    }

    /// Errors if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.entries.keys().map(String::as_str).collect();
        Err(Error::invalid(format!(
            "unknown config keys: {}",
            keys.join(", ")
        )))
    }
}

/// Renders ordered entries as `key=value` lines.
pub fn render(entries: &[(&str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Comma-joins values for list entries.
pub fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}
