//! Plain-text `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Keys are dotted
//! (`network.dense_layers`, `train.lr0`) so one file can configure every
//! stage of a run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type KeyValues = BTreeMap<String, String>;

pub fn parse_key_values(text: &str) -> Result<KeyValues> {
    let mut out = KeyValues::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value", lineno + 1)))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::config(format!("line {}: empty key", lineno + 1)));
        }
        if out.insert(key.to_owned(), v.trim().to_owned()).is_some() {
            return Err(Error::config(format!(
                "line {}: duplicate key {key}",
                lineno + 1
            )));
        }
    }
    Ok(out)
}

pub fn read_key_values(path: impl AsRef<Path>) -> Result<KeyValues> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_key_values(&text)
}

pub(crate) fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

/// Something settable from `key = value` pairs.
pub trait Configurable {
    /// Section prefix, e.g. `network`.
    const SECTION: &'static str;

    /// Sets one field by its bare name; unknown names are an error.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    fn validate(&self) -> Result<()>;

    /// Applies every `SECTION.key` entry, ignoring other sections.
    fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        let prefix = format!("{}.", Self::SECTION);
        for (k, v) in kv {
            if let Some(field) = k.strip_prefix(&prefix) {
                self.set(field, v)?;
            }
        }
        self.validate()
    }
}
