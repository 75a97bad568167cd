//! Flat key-value run configuration.
//!
//! The format is one `key = value` pair per line. Blank lines are skipped,
//! `#` starts a comment (either a whole line or a trailing comment preceded
//! by whitespace), keys are lowercase snake_case, and values run to the end
//! of the line. Lists are comma-separated inside a single value.
//!
//! Typed access goes through [`Config`]: each getter records the key it
//! consumed, and [`Config::ensure_consumed`] turns any leftover key into a
//! hard error. Experiment drivers read every key they understand and then
//! call `ensure_consumed`, so a typo in a config file fails the run instead
//! of silently falling back to a default.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// A parsed key-value configuration with consumption tracking.
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
    consumed: BTreeSet<String>,
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(0) => "",
        Some(i) if line[..i].ends_with(|c: char| c.is_whitespace()) => &line[..i],
        _ => line,
    }
}

impl Config {
    /// Parses configuration text. Duplicate keys and lines without `=` are
    /// errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {lineno}: expected `key = value`, got {line:?}"
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {lineno}: bad key {key:?}")));
            }
            if value.is_empty() {
                return Err(Error::Config(format!("line {lineno}: key {key:?} has no value")));
            }
            if values.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!("line {lineno}: duplicate key {key:?}")));
            }
        }
        Ok(Self { values, consumed: BTreeSet::new() })
    }

    /// Parses the file at `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Raw string value, marking the key consumed.
    pub fn get_str(&mut self, key: &str) -> Option<String> {
        let v = self.values.get(key).cloned();
        if v.is_some() {
            self.consumed.insert(key.to_string());
        }
        v
    }

    /// String value with a default.
    pub fn str_or(&mut self, key: &str, default: &str) -> String {
        self.get_str(key).unwrap_or_else(|| default.to_string())
    }

    /// Path value, present or not.
    pub fn get_path(&mut self, key: &str) -> Option<PathBuf> {
        self.get_str(key).map(PathBuf::from)
    }

    fn parse_one<T: std::str::FromStr>(key: &str, raw: &str, what: &str) -> Result<T> {
        raw.parse().map_err(|_| {
            Error::Config(format!("key {key:?}: expected {what}, got {raw:?}"))
        })
    }

    /// Float value, present or not.
    pub fn get_f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.get_str(key)
            .map(|raw| Self::parse_one(key, &raw, "a number"))
            .transpose()
    }

    /// Float value with a default.
    pub fn f64_or(&mut self, key: &str, default: f64) -> Result<f64> {
        Ok(self.get_f64(key)?.unwrap_or(default))
    }

    /// Unsigned integer value, present or not.
    pub fn get_u64(&mut self, key: &str) -> Result<Option<u64>> {
        self.get_str(key)
            .map(|raw| Self::parse_one(key, &raw, "an unsigned integer"))
            .transpose()
    }

    /// Unsigned integer value with a default.
    pub fn u64_or(&mut self, key: &str, default: u64) -> Result<u64> {
        Ok(self.get_u64(key)?.unwrap_or(default))
    }

    /// Count value with a default.
    pub fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        Ok(self
            .get_str(key)
            .map(|raw| Self::parse_one(key, &raw, "an unsigned integer"))
            .transpose()?
            .unwrap_or(default))
    }

    /// Boolean value (`true`/`false`) with a default.
    pub fn bool_or(&mut self, key: &str, default: bool) -> Result<bool> {
        Ok(self
            .get_str(key)
            .map(|raw| Self::parse_one(key, &raw, "true or false"))
            .transpose()?
            .unwrap_or(default))
    }

    /// Comma-separated float list with a default.
    pub fn f64_list_or(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.get_str(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|item| Self::parse_one(key, item.trim(), "a number"))
                .collect(),
        }
    }

    /// Comma-separated count list with a default.
    pub fn usize_list_or(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.get_str(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|item| Self::parse_one(key, item.trim(), "an unsigned integer"))
                .collect(),
        }
    }

    /// Errors if any key was never consumed by a getter, listing the
    /// offenders so typos surface immediately.
    pub fn ensure_consumed(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !self.consumed.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }

    /// Every key-value pair in key order, for echoing into summaries.
    pub fn echo(&self) -> Vec<(String, String)> {
        self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Whether the config carries no keys at all.
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_comments_and_lists() {
        let text = "\
# run settings
total_iters = 500
z_tgt_list = 0.4, 0.2 , 0.1
lr = 3e-4   # decayed in thirds
name = funnel run
";
        let mut cfg = Config::parse(text).unwrap();
        assert_eq!(cfg.u64_or("total_iters", 0).unwrap(), 500);
        assert_eq!(cfg.f64_list_or("z_tgt_list", &[]).unwrap(), vec![0.4, 0.2, 0.1]);
        assert_eq!(cfg.f64_or("lr", 0.0).unwrap(), 3e-4);
        assert_eq!(cfg.get_str("name").unwrap(), "funnel run");
        cfg.ensure_consumed().unwrap();
    }

    #[test]
    fn defaults_apply_only_when_the_key_is_absent() {
        let mut cfg = Config::parse("s = 8\n").unwrap();
        assert_eq!(cfg.usize_or("s", 2).unwrap(), 8);
        assert_eq!(cfg.usize_or("batch", 32).unwrap(), 32);
        assert!(cfg.bool_or("learn_theta", false).unwrap() == false);
    }

    #[test]
    fn unconsumed_keys_are_a_hard_error() {
        let mut cfg = Config::parse("total_iters = 10\ntotl_iters = 20\n").unwrap();
        let _ = cfg.u64_or("total_iters", 0).unwrap();
        let err = cfg.ensure_consumed().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("totl_iters"), "{msg}");
        assert!(!msg.contains("total_iters,"), "{msg}");
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(Config::parse("just words\n").is_err());
        assert!(Config::parse("a = 1\na = 2\n").is_err());
        assert!(Config::parse("key =\n").is_err());
        assert!(Config::parse("two words = 3\n").is_err());
        let mut cfg = Config::parse("x = abc\n").unwrap();
        assert!(cfg.get_f64("x").is_err());
    }

    #[test]
    fn trailing_comment_requires_whitespace() {
        let mut cfg = Config::parse("path = runs/a#b\n").unwrap();
        assert_eq!(cfg.get_str("path").unwrap(), "runs/a#b");
    }
}
