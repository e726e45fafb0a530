//! Flat key=value settings with layered overrides.
//!
//! Every subcommand that takes tunable knobs resolves them the same way:
//! built-in defaults, then an optional `--config` file, then repeatable
//! `--set key=value` flags, then dedicated flags. The resolved map is
//! snapshotted into the run directory so a run can always be replayed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use xmatch_core::Error;

/// A sorted key=value map. Later writes win; iteration order is stable.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn with_defaults(defaults: &[(&str, &str)]) -> Self {
        let mut s = Settings::default();
        for (k, v) in defaults {
            s.set(k, *v);
        }
        s
    }

    /// Parse a flat key=value file. Blank lines and `#` comments are
    /// skipped; everything else must contain `=`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let mut out = Settings::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "{} line {}: expected key=value, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            out.set(key.trim(), value.trim());
        }
        Ok(out)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    /// Apply one `key=value` override as written on the command line.
    pub fn set_kv(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects key=value, got {spec:?}")))?;
        self.set(key.trim(), value.trim());
        Ok(())
    }

    pub fn merge(&mut self, other: &Settings) {
        for (k, v) in &other.values {
            self.set(k, v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn str_of(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::config(format!("missing setting {key:?}")).into())
    }

    pub fn usize_of(&self, key: &str) -> Result<usize> {
        let raw = self.str_of(key)?;
        raw.parse()
            .map_err(|_| Error::config(format!("setting {key}={raw:?} is not a count")).into())
    }

    pub fn u64_of(&self, key: &str) -> Result<u64> {
        let raw = self.str_of(key)?;
        raw.parse()
            .map_err(|_| Error::config(format!("setting {key}={raw:?} is not an integer")).into())
    }

    pub fn f64_of(&self, key: &str) -> Result<f64> {
        let raw = self.str_of(key)?;
        raw.parse()
            .map_err(|_| Error::config(format!("setting {key}={raw:?} is not a number")).into())
    }

    pub fn bool_of(&self, key: &str) -> Result<bool> {
        let raw = self.str_of(key)?;
        match raw {
            "1" | "true" | "yes" => Ok(true),
            "0" | "false" | "no" => Ok(false),
            _ => Err(Error::config(format!("setting {key}={raw:?} is not a flag (use 0/1)")).into()),
        }
    }

    /// Reject keys outside the allowed set, so a typo in a config file
    /// fails loudly instead of silently using a default.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for key in self.values.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::config(format!(
                    "unknown setting {key:?}; known settings: {}",
                    allowed.join(", ")
                ))
                .into());
            }
        }
        Ok(())
    }

    /// The whole map as `key=value` lines.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.snapshot())
            .with_context(|| format!("writing config snapshot {}", path.display()))
    }
}
