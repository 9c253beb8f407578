//! `key = value` config files. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    /// Parses `text`, rejecting keys outside `allowed` and repeated keys.
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                msg: format!("expected `key = value`, got `{}`", line),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !allowed.contains(&key) {
                return Err(Error::Config {
                    line: line_no,
                    msg: format!("unknown key `{}`", key),
                });
            }
            if entries.insert(key.to_string(), (line_no, value.to_string())).is_some() {
                return Err(Error::Config {
                    line: line_no,
                    msg: format!("duplicate key `{}`", key),
                });
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    /// Typed value, if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| Error::Config {
                line: *line,
                msg: format!("cannot parse `{}` for key `{}`", v, key),
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    /// Line number of `key`, for validation messages.
    pub fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |(l, _)| *l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports_lines() {
        let kv = KeyValues::parse("# c\na = 1\n\nb=x # tail\n", &["a", "b"]).unwrap();
        assert_eq!(kv.require::<u32>("a").unwrap(), 1);
        assert_eq!(kv.raw("b"), Some("x"));
        assert_eq!(kv.line("b"), 4);
        match KeyValues::parse("a = 1\nzz = 2\n", &["a"]) {
            Err(Error::Config { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("zz"));
            }
            other => panic!("{:?}", other),
        }
        assert!(matches!(kv.require::<u32>("c"), Err(Error::MissingKey(k)) if k == "c"));
        assert!(matches!(kv.get::<u32>("b"), Err(Error::Config { line: 4, .. })));
    }
}
