//! `key = value` line format used for configs, threshold sets and reports.
//!
//! Blank lines and lines starting with `#` are ignored. Keys keep their
//! insertion order when written, so emitted files are stable.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, FormatError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvDoc {
    entries: IndexMap<String, String>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = IndexMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(FormatError::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected `key = value`, got {line:?}"),
                }
                .into());
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(FormatError::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    msg: "empty key".into(),
                }
                .into());
            }
            entries.insert(key.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.entries
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
            })
            .transpose()
    }

    /// Parses and removes `key`, leaving `slot` untouched when absent.
    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.get::<T>(key)? {
            *slot = v;
        }
        self.entries.shift_remove(key);
        Ok(())
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.shift_remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends all entries of `other`, overriding existing keys in place.
    pub fn merge(&mut self, other: &KvDoc) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Adds every entry of `section` under `prefix`.
    pub fn insert_section(&mut self, prefix: &str, section: &KvDoc) {
        for (k, v) in &section.entries {
            self.entries.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Removes and returns the entries whose key starts with `prefix`, with
    /// the prefix stripped.
    pub fn take_section(&mut self, prefix: &str) -> KvDoc {
        let mut out = KvDoc::new();
        self.entries.retain(|k, v| match k.strip_prefix(prefix) {
            Some(rest) => {
                out.entries.insert(rest.to_string(), v.clone());
                false
            }
            None => true,
        });
        out
    }

    /// Errors if any key was not consumed.
    pub fn expect_consumed(&self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(_) => Err(Error::Config(format!(
                "unknown keys: {}",
                self.entries.keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }
}

/// Formats a list as comma-separated values.
pub fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

pub fn split<T: FromStr>(key: &str, s: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|e| Error::Config(format!("{key}: {p:?}: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip_and_errors() {
        let text = "# comment\nseed = 7\n\nname = a b c\nratio=0.1\n";
        let doc = KvDoc::parse(text, Path::new("x")).unwrap();
        assert_eq!(doc.get::<u64>("seed").unwrap(), Some(7));
        assert_eq!(doc.get_str("name"), Some("a b c"));
        assert_eq!(doc.get::<f64>("ratio").unwrap(), Some(0.1));
        let again = KvDoc::parse(&doc.to_text(), Path::new("x")).unwrap();
        assert_eq!(again, doc);

        assert!(KvDoc::parse("novalue\n", Path::new("x")).is_err());
        assert!(doc.get::<u64>("name").is_err());
    }

    #[test]
    fn floats_roundtrip_exactly() {
        let mut doc = KvDoc::new();
        let v: f64 = 0.1 + 0.2;
        doc.set("v", v);
        let back = KvDoc::parse(&doc.to_text(), Path::new("x")).unwrap();
        assert_eq!(back.get::<f64>("v").unwrap().unwrap().to_bits(), v.to_bits());
    }

    #[test]
    fn sections_roundtrip() {
        let mut inner = KvDoc::new();
        inner.set("a", 1);
        inner.set("b", 2);
        let mut doc = KvDoc::new();
        doc.set("top", 0);
        doc.insert_section("s.", &inner);
        assert_eq!(doc.to_text(), "top = 0\ns.a = 1\ns.b = 2\n");
        assert_eq!(doc.take_section("s."), inner);
        assert_eq!(doc.to_text(), "top = 0\n");
    }

    #[test]
    fn unconsumed_keys_are_reported() {
        let mut doc = KvDoc::parse("a = 1\nb = 2\n", Path::new("x")).unwrap();
        let mut a = 0u32;
        doc.take_into("a", &mut a).unwrap();
        assert_eq!(a, 1);
        let err = doc.expect_consumed().unwrap_err().to_string();
        assert!(err.contains('b'));
    }
}
