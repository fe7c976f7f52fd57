//! Flat `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment; later assignments win.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected key=value, got {line:?}"),
                });
            };
            kv.set(k.trim(), v.trim());
        }
        Ok(kv)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses a single `key=value` override.
    pub fn parse_override(s: &str) -> Result<(String, String)> {
        s.split_once('=')
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .ok_or_else(|| Error::Invalid(format!("override {s:?} is not key=value")))
    }

    /// Sets `key`, replacing any earlier value.
    pub fn set(&mut self, key: &str, value: &str) {
        if let Some(e) = self.entries.iter_mut().find(|(k, _)| k == key) {
            e.1 = value.to_string();
        } else {
            self.entries.push((key.to_string(), value.to_string()));
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }

    /// Entries whose key is in `keys`, and the rest.
    pub fn partition(&self, keys: &[&str]) -> (KeyValues, KeyValues) {
        let mut hit = KeyValues::new();
        let mut rest = KeyValues::new();
        for (k, v) in self.iter() {
            if keys.contains(&k) {
                hit.set(k, v);
            } else {
                rest.set(k, v);
            }
        }
        (hit, rest)
    }

    pub fn to_text(&self) -> String {
        self.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Invalid(format!("bad value {value:?} for {key}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let kv = KeyValues::parse("# header\nlr = 0.01\n\nbatch=8 # trailing\nlr=0.5\n").unwrap();
        assert_eq!(kv.get("lr"), Some("0.5"));
        assert_eq!(kv.get("batch"), Some("8"));
        assert_eq!(kv.iter().count(), 2);
        assert!(KeyValues::parse("oops").is_err());
        assert_eq!(parse::<usize>("batch", "8").unwrap(), 8);
        assert!(parse::<usize>("batch", "x").is_err());
    }
}
