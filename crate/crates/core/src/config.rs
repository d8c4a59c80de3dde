//! Plain-text `key = value` configuration files with includes.
//!
//! Syntax: one `key = value` pair per line; `#` starts a comment; blank
//! lines are skipped. A line `include <path>` splices another file,
//! resolved relative to the including file. Later assignments override
//! earlier ones, so includes naturally provide defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::HgcpError;
use crate::Result;

/// Parsed configuration: a flat string map with typed accessors.
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse a file, following `include` lines (up to a fixed depth).
    pub fn from_file(path: &Path) -> Result<Config> {
        let mut cfg = Config::new();
        cfg.load(path, 0)?;
        Ok(cfg)
    }

    /// Parse from a string (no includes allowed without a base directory).
    pub fn from_str_contents(text: &str) -> Result<Config> {
        let mut cfg = Config::new();
        cfg.parse_lines(text, None, 0)?;
        Ok(cfg)
    }

    fn load(&mut self, path: &Path, depth: usize) -> Result<()> {
        if depth > 8 {
            return Err(HgcpError::Config(format!(
                "include depth exceeded at {}",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(path).map_err(|e| {
            HgcpError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let base = path.parent().map(PathBuf::from);
        self.parse_lines(&text, base.as_deref(), depth)
    }

    fn parse_lines(&mut self, text: &str, base: Option<&Path>, depth: usize) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("include ") {
                let rel = rest.trim();
                let target = match base {
                    Some(b) => b.join(rel),
                    None => {
                        return Err(HgcpError::Parse {
                            line: idx + 1,
                            msg: "include requires a file-based config".into(),
                        })
                    }
                };
                self.load(&target, depth + 1)?;
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(HgcpError::Parse {
                    line: idx + 1,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = line[..eq].trim();
            let value = line[eq + 1..].trim();
            if key.is_empty() {
                return Err(HgcpError::Parse {
                    line: idx + 1,
                    msg: "empty key".into(),
                });
            }
            self.values.insert(key.to_string(), value.to_string());
        }
        Ok(())
    }

    /// Set a value programmatically (CLI overrides).
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| HgcpError::Config(format!("{key}: `{s}` is not a number"))),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| HgcpError::Config(format!("{key}: `{s}` is not an integer"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.u64_or(key, default as u64)? as usize)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(s) => Err(HgcpError::Config(format!("{key}: `{s}` is not a boolean"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_comments_and_blanks() {
        let cfg = Config::from_str_contents(
            "# run settings\n\nsteps = 1000\nlr=3e-4\nname = speed run # trailing\n",
        )
        .unwrap();
        assert_eq!(cfg.u64_or("steps", 0).unwrap(), 1000);
        assert_eq!(cfg.f64_or("lr", 0.0).unwrap(), 3e-4);
        assert_eq!(cfg.get("name"), Some("speed run"));
        assert_eq!(cfg.f64_or("missing", 2.5).unwrap(), 2.5);
    }

    #[test]
    fn later_keys_override_earlier() {
        let cfg = Config::from_str_contents("a = 1\na = 2\n").unwrap();
        assert_eq!(cfg.u64_or("a", 0).unwrap(), 2);
    }

    #[test]
    fn includes_splice_relative_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.cfg"), "lr = 0.001\nsteps = 50\n").unwrap();
        std::fs::write(
            dir.path().join("run.cfg"),
            "include base.cfg\nsteps = 99\n",
        )
        .unwrap();
        let cfg = Config::from_file(&dir.path().join("run.cfg")).unwrap();
        assert_eq!(cfg.f64_or("lr", 0.0).unwrap(), 0.001);
        assert_eq!(cfg.u64_or("steps", 0).unwrap(), 99); // override wins
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = Config::from_str_contents("ok = 1\nbroken line\n").unwrap_err();
        match err {
            HgcpError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn include_cycle_is_cut_off() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.cfg"), "include b.cfg\n").unwrap();
        std::fs::write(dir.path().join("b.cfg"), "include a.cfg\n").unwrap();
        assert!(Config::from_file(&dir.path().join("a.cfg")).is_err());
    }
}
