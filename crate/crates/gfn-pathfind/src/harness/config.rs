//! Plain `key = value` experiment configuration.
//!
//! One assignment per line, `#` comments, no sections, no nesting. Unknown
//! keys are errors rather than warnings so that typos cannot silently fall
//! back to defaults, and parse errors carry line numbers.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing config key `{0}`")]
    MissingKey(&'static str),
    #[error("line {line}: unknown config key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("key `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Parsed assignments in file order, with line numbers for diagnostics.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    entries: Vec<(String, String, usize)>,
    consumed: BTreeSet<String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: idx + 1,
                msg: "expected `key = value`".into(),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Parse {
                    line: idx + 1,
                    msg: "empty key".into(),
                });
            }
            if let Some((_, _, prev)) = entries.iter().find(|(k, _, _)| *k == key) {
                return Err(ConfigError::Parse {
                    line: idx + 1,
                    msg: format!("key `{key}` already set on line {prev}"),
                });
            }
            entries.push((key, value, idx + 1));
        }
        Ok(RawConfig {
            entries,
            consumed: BTreeSet::new(),
        })
    }

    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    fn lookup(&mut self, key: &'static str) -> Option<&str> {
        self.consumed.insert(key.to_string());
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, _)| v.as_str())
    }

    pub fn opt_str(&mut self, key: &'static str) -> Option<String> {
        self.lookup(key).map(str::to_string)
    }

    pub fn require_str(&mut self, key: &'static str) -> Result<String, ConfigError> {
        self.opt_str(key).ok_or(ConfigError::MissingKey(key))
    }

    fn parse_with<T>(
        &mut self,
        key: &'static str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<Option<T>, ConfigError> {
        match self.lookup(key) {
            None => Ok(None),
            Some(v) => parse(v).map(Some).map_err(|msg| ConfigError::BadValue {
                key: key.to_string(),
                msg,
            }),
        }
    }

    pub fn opt_u64(&mut self, key: &'static str) -> Result<Option<u64>, ConfigError> {
        self.parse_with(key, |v| {
            v.parse::<u64>().map_err(|_| format!("`{v}` is not an integer"))
        })
    }

    pub fn opt_usize(&mut self, key: &'static str) -> Result<Option<usize>, ConfigError> {
        Ok(self.opt_u64(key)?.map(|v| v as usize))
    }

    pub fn opt_f64(&mut self, key: &'static str) -> Result<Option<f64>, ConfigError> {
        self.parse_with(key, |v| {
            v.parse::<f64>().map_err(|_| format!("`{v}` is not a number"))
        })
    }

    pub fn require_u64(&mut self, key: &'static str) -> Result<u64, ConfigError> {
        self.opt_u64(key)?.ok_or(ConfigError::MissingKey(key))
    }

    pub fn require_usize(&mut self, key: &'static str) -> Result<usize, ConfigError> {
        self.opt_usize(key)?.ok_or(ConfigError::MissingKey(key))
    }

    pub fn require_f64(&mut self, key: &'static str) -> Result<f64, ConfigError> {
        self.opt_f64(key)?.ok_or(ConfigError::MissingKey(key))
    }

    pub fn opt_path(&mut self, key: &'static str) -> Option<PathBuf> {
        self.opt_str(key).map(PathBuf::from)
    }

    /// Comma-separated list of numbers.
    pub fn opt_f64_list(&mut self, key: &'static str) -> Result<Option<Vec<f64>>, ConfigError> {
        self.parse_with(key, |v| {
            v.split(',')
                .map(|t| {
                    let t = t.trim();
                    t.parse::<f64>().map_err(|_| format!("`{t}` is not a number"))
                })
                .collect()
        })
    }

    pub fn opt_usize_list(&mut self, key: &'static str) -> Result<Option<Vec<usize>>, ConfigError> {
        self.parse_with(key, |v| {
            v.split(',')
                .map(|t| {
                    let t = t.trim();
                    t.parse::<usize>()
                        .map_err(|_| format!("`{t}` is not an integer"))
                })
                .collect()
        })
    }

    pub fn opt_str_list(&mut self, key: &'static str) -> Option<Vec<String>> {
        self.lookup(key)
            .map(|v| v.split(',').map(|t| t.trim().to_string()).collect())
    }

    /// Errors on the first key that no extractor asked about.
    pub fn finish(self) -> Result<(), ConfigError> {
        for (key, _, line) in &self.entries {
            if !self.consumed.contains(key) {
                return Err(ConfigError::UnknownKey {
                    key: key.clone(),
                    line: *line,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_assignments_and_comments() {
        let mut cfg = RawConfig::parse("# top\na = 1\n\nb = swap:5\nc = 1e-3\n").unwrap();
        assert_eq!(cfg.require_u64("a").unwrap(), 1);
        assert_eq!(cfg.require_str("b").unwrap(), "swap:5");
        assert_eq!(cfg.require_f64("c").unwrap(), 1e-3);
        cfg.finish().unwrap();
    }

    #[test]
    fn missing_key_is_named() {
        let mut cfg = RawConfig::parse("a = 1\n").unwrap();
        match cfg.require_str("environment") {
            Err(ConfigError::MissingKey(k)) => assert_eq!(k, "environment"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_errors_with_line() {
        let mut cfg = RawConfig::parse("a = 1\nbogus = 2\n").unwrap();
        let _ = cfg.require_u64("a");
        match cfg.finish() {
            Err(ConfigError::UnknownKey { key, line }) => {
                assert_eq!(key, "bogus");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match RawConfig::parse("a = 1\nnot an assignment\n") {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match RawConfig::parse("a = 1\na = 2\n") {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lists_parse() {
        let mut cfg = RawConfig::parse("widths = 1, 4, 256\nls = 1e-4,1e-2\n").unwrap();
        assert_eq!(cfg.opt_usize_list("widths").unwrap().unwrap(), vec![1, 4, 256]);
        assert_eq!(cfg.opt_f64_list("ls").unwrap().unwrap(), vec![1e-4, 1e-2]);
        cfg.finish().unwrap();
    }
}
