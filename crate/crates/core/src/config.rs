//! Plain-text `key = value` configuration files.
//!
//! One assignment per line. `#` starts a comment; blank lines are ignored.
//! Keys are dotted paths (`oracle.click_interest = 2.0`). Unknown keys are an
//! error so that typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", idx + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", idx + 1)));
            }
            if entries
                .insert(key.to_string(), (idx + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", idx + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Overwrites `slot` when `key` is present.
    pub fn take<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some((line, value)) = self.entries.get(key) {
            *slot = value.parse().map_err(|_| {
                Error::Config(format!("line {line}: cannot parse `{value}` for `{key}`"))
            })?;
        }
        Ok(())
    }

    pub fn take_list<T: FromStr>(&self, key: &str, slot: &mut Vec<T>) -> Result<()> {
        if let Some((line, value)) = self.entries.get(key) {
            let mut out = Vec::new();
            for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                out.push(part.parse().map_err(|_| {
                    Error::Config(format!("line {line}: cannot parse `{part}` in `{key}`"))
                })?);
            }
            *slot = out;
        }
        Ok(())
    }

    /// Keys under `prefix.` that the caller did not recognise.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            if !known.contains(&key.as_str()) {
                return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, (_, value)) in &self.entries {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(value);
            out.push('\n');
        }
        out
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let kv = KeyValues::parse("# header\na = 3\nb = 1.5, 2 # trailing\n\n").unwrap();
        let mut a = 0u32;
        let mut b: Vec<f64> = vec![];
        kv.take("a", &mut a).unwrap();
        kv.take_list("b", &mut b).unwrap();
        assert_eq!(a, 3);
        assert_eq!(b, vec![1.5, 2.0]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(KeyValues::parse("novalue").is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        let kv = KeyValues::parse("a = x").unwrap();
        let mut a = 0u32;
        assert!(kv.take("a", &mut a).is_err());
        assert!(kv.check_known(&["b"]).is_err());
    }
}
