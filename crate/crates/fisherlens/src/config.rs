//! Flat `key = value` run configuration with `[section]` headers.
//!
//! ```text
//! # comment
//! [model]
//! seed = 11
//! layers = 6
//! ```
//!
//! Keys are addressed as `section.key`; keys before any header have no
//! prefix. Later assignments override earlier ones.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| anyhow!("line {}: unclosed section header", n + 1))?;
                section = name.trim().to_string();
                if section.is_empty() || section.contains(char::is_whitespace) {
                    bail!("line {}: bad section name", n + 1);
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", n + 1))?;
            let key = key.trim();
            if key.is_empty() {
                bail!("line {}: empty key", n + 1);
            }
            let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            entries.insert(full, value.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| anyhow!("config key {key}: cannot parse {v:?}: {e}")),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Text form grouped by section; [`Config::parse`] reads it back to an
    /// equal value.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current: Option<&str> = None;
        // Keys without a section must come before any header.
        let mut split: Vec<(&str, &str, &String)> = self
            .entries
            .iter()
            .map(|(key, value)| {
                let (section, name) = key.rsplit_once('.').unwrap_or(("", key));
                (section, name, value)
            })
            .collect();
        split.sort_by_key(|&(section, name, _)| (!section.is_empty(), section, name));
        for (section, name, value) in split {
            if current != Some(section) {
                if !section.is_empty() {
                    if current.is_some() {
                        out.push('\n');
                    }
                    out.push_str(&format!("[{section}]\n"));
                }
                current = Some(section);
            }
            out.push_str(&format!("{name} = {value}\n"));
        }
        out
    }
}
