//! Resolution of `key=value` run settings.
//!
//! Every setting a command reads is resolved as flag value, else config-file
//! value, else built-in default, and recorded. Config-file keys the command
//! never asked for are rejected once resolution is finished.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
}

/// Parse `key=value` lines. Blank lines and `#` comments are ignored.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected key=value", i + 1))?;
        let key = k.trim().replace('-', "_");
        if key.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            bail!("config line {}: duplicate key '{key}'", i + 1);
        }
    }
    Ok(out)
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config '{}'", p.display()))?;
                parse_config(&text).with_context(|| format!("in config '{}'", p.display()))?
            }
            None => BTreeMap::new(),
        };
        Ok(Self {
            file,
            ..Self::default()
        })
    }

    /// Resolve `key`, recording the value that was used.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        let value = match (flag, self.file.get(key)) {
            (Some(v), _) => v,
            (None, Some(text)) => text
                .parse::<T>()
                .map_err(|e| anyhow!("config key '{key}': cannot parse '{text}': {e}"))?,
            (None, None) => default,
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Like [`get`](Self::get) but without a default; absent means `None`.
    pub fn get_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        let value = match (flag, self.file.get(key)) {
            (Some(v), _) => Some(v),
            (None, Some(text)) => Some(
                text.parse::<T>()
                    .map_err(|e| anyhow!("config key '{key}': cannot parse '{text}': {e}"))?,
            ),
            (None, None) => None,
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    /// Boolean switch: a set flag wins, otherwise the file value.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        let v = self.get(key, flag.then_some(true), false)?;
        Ok(v)
    }

    /// Record a derived value in the resolved config.
    pub fn record(&mut self, key: &str, value: impl Display) {
        self.resolved.insert(key.to_string(), value.to_string());
    }

    /// Fail on config-file keys that no setting consumed.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .file
            .keys()
            .filter(|k| !self.used.contains(*k))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            bail!("unknown config key(s): {}", unknown.join(", "));
        }
        Ok(())
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }

    /// `# config k=v ...` with values escaped so the line stays single.
    pub fn header(&self) -> String {
        let mut s = String::from("# config");
        for (k, v) in &self.resolved {
            s.push(' ');
            s.push_str(k);
            s.push('=');
            s.push_str(&difflm::data::escape_field(v).replace(' ', "\\x20"));
        }
        s
    }
}
