//! Plain-text `key = value` documents. `#` starts a comment; blank lines are
//! ignored. Unknown keys produce a warning, never an error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{config, Result};

#[derive(Debug, Clone, Default)]
pub struct KvDoc {
    entries: BTreeMap<String, (String, usize)>,
    source: String,
}

impl KvDoc {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(config(format!("{source}:{}: expected key = value", i + 1)));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(config(format!("{source}:{}: empty key", i + 1)));
            }
            if entries.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(config(format!("{source}:{}: duplicate key '{key}'", i + 1)));
            }
        }
        Ok(Self {
            entries,
            source: source.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|e| config(format!("{}:{line}: bad value for {key}: {e}", self.source))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| config(format!("{}: missing required key '{key}'", self.source)))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some((v, line)) = self.entries.get(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| config(format!("{}:{line}: bad item '{s}' in {key}: {e}", self.source)))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Logs a warning for every key not in `known`; returns those keys.
    pub fn warn_unknown(&self, known: &[&str]) -> Vec<String> {
        let unknown: Vec<String> = self
            .entries
            .keys()
            .filter(|k| !known.contains(&k.as_str()))
            .cloned()
            .collect();
        for k in &unknown {
            log::warn!("{}: ignoring unknown key '{k}'", self.source);
        }
        unknown
    }

    pub fn to_json(&self) -> serde_json::Value {
        self.entries
            .iter()
            .map(|(k, (v, _))| (k.clone(), serde_json::Value::String(v.clone())))
            .collect::<serde_json::Map<_, _>>()
            .into()
    }
}
