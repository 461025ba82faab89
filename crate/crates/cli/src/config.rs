//! Key-value run configuration.
//!
//! A config file holds one `key = value` pair per line; `#` starts a
//! comment. Values are resolved in this order, later winning: built-in
//! defaults, the config file, the `PVQ_SEED` environment variable (for
//! `seed` only), then command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::CliError;

pub const SEED_ENV: &str = "PVQ_SEED";

/// One accepted key. An empty default means "unset".
#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

/// Flag spelling of a key: `synth.dim` becomes `synth-dim`.
pub fn flag_name(key: &str) -> String {
    key.replace(['.', '_'], "-")
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    command: &'static str,
    values: BTreeMap<&'static str, String>,
}

/// Parse the text of a config file into ordered pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`, got `{raw}`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(CliError::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn defaults(command: &'static str, keys: &[Key]) -> Self {
        RunConfig { command, values: keys.iter().map(|k| (k.name, k.default.to_string())).collect() }
    }

    /// Defaults, then `file`, then the seed variable, then `flags`.
    pub fn resolve(
        command: &'static str,
        keys: &[Key],
        file: Option<&Path>,
        seed_env: Option<String>,
        flags: &[(String, String)],
    ) -> Result<Self, CliError> {
        let mut cfg = RunConfig::defaults(command, keys);
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_pairs(&text)? {
                cfg.set(&k, v)?;
            }
        }
        if let Some(seed) = seed_env {
            u64::from_str(seed.trim()).map_err(|_| CliError::Config(format!("{SEED_ENV}=`{seed}` is not an integer")))?;
            cfg.set("seed", seed.trim().to_string())?;
        }
        for (k, v) in flags {
            cfg.set(k, v.clone())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: String) -> Result<(), CliError> {
        let slot = self
            .values
            .iter_mut()
            .find(|(k, _)| **k == key)
            .ok_or_else(|| CliError::Config(format!("unknown key `{key}` for `{}`", self.command)))?;
        *slot.1 = value;
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("key `{key}` not declared for `{}`", self.command))
    }

    pub fn is_set(&self, key: &str) -> bool {
        !self.raw(key).is_empty()
    }

    /// Required value parsed as `T`.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Err(CliError::Config(format!("`{key}` is required")));
        }
        raw.parse().map_err(|e| CliError::Config(format!("bad value `{raw}` for `{key}`: {e}")))
    }

    /// Optional value; an empty string is `None`.
    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if self.is_set(key) {
            self.get(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| p.trim().parse().map_err(|e| CliError::Config(format!("bad list entry `{p}` in `{key}`: {e}"))))
            .collect()
    }

    /// The resolved config in file syntax, keys sorted.
    pub fn render(&self) -> String {
        let mut out = format!("# vqtok {}\n", self.command);
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
