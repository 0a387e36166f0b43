//! Flat `key = value` configuration files.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored. Keys
//! may appear only once.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Parse { line, msg: format!("expected `key = value`, got {content:?}") })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse { line, msg: "empty key".into() });
            }
            if entries.insert(key.to_owned(), (line, value.trim().to_owned())).is_some() {
                return Err(Error::Parse { line, msg: format!("duplicate key {key:?}") });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_owned(), (0, value.into()));
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Parse { line: *line, msg: format!("invalid value for {key}: {v:?}") }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::MissingField(key.to_owned()))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some((line, v)) = self.entries.get(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|_| Error::Parse { line: *line, msg: format!("invalid list item for {key}: {s:?}") })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Rejects keys outside `known`.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            if !known.contains(&key.as_str()) {
                return Err(Error::Parse { line: *line, msg: format!("unknown key {key:?}") });
            }
        }
        Ok(())
    }
}
