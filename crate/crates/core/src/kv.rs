//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique;
//! a repeated key overrides the earlier value.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1))
            })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn set_list<T: Display>(&mut self, key: &str, values: &[T]) {
        let joined = values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        self.entries.insert(key.to_string(), joined);
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parses `key` if present, otherwise returns `default`.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}"))),
        }
    }

    /// Comma-separated list; an empty value yields an empty list.
    pub fn get_list_or<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) if v.trim().is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad list item for {key}: {s:?}")))
                })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Copies every entry of `other` over this config.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in other.iter() {
            self.entries.insert(k.to_string(), v.to_string());
        }
    }

    /// Entries whose key starts with `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KvConfig {
        let dotted = format!("{prefix}.");
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&dotted).map(|s| (s.to_string(), v.clone())))
            .collect();
        KvConfig { entries }
    }

    /// Adds every entry of `other` under `prefix.`.
    pub fn nest(&mut self, prefix: &str, other: &KvConfig) {
        for (k, v) in other.iter() {
            self.entries.insert(format!("{prefix}.{k}"), v.to_string());
        }
    }
}

impl std::fmt::Display for KvConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let cfg = KvConfig::parse("# c\nseed = 7\nalphas = 0, 0.5,1\n\nname=x y\n").unwrap();
        assert_eq!(cfg.get_or("seed", 0u64).unwrap(), 7);
        assert_eq!(cfg.get_list_or::<f64>("alphas", vec![]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(cfg.raw("name"), Some("x y"));
        assert_eq!(cfg.get_or("missing", 3i32).unwrap(), 3);
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert!(KvConfig::parse("seed 7").is_err());
    }

    #[test]
    fn display_round_trips() {
        let mut cfg = KvConfig::new();
        cfg.set("a", 1.5);
        cfg.set_list("b", &[1, 2, 3]);
        let back = KvConfig::parse(&cfg.to_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sections_nest_and_strip() {
        let mut inner = KvConfig::new();
        inner.set("lr", 0.1);
        let mut outer = KvConfig::new();
        outer.nest("stage1", &inner);
        assert_eq!(outer.raw("stage1.lr"), Some("0.1"));
        assert_eq!(outer.section("stage1"), inner);
    }
}
