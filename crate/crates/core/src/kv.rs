//! Flat `key = value` text files, one entry per line, `#` comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                detail: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    detail: "empty key".into(),
                });
            }
            if entries
                .insert(k.to_string(), (v.trim().to_string(), line_no))
                .is_some()
            {
                return Err(Error::Parse {
                    line: line_no,
                    detail: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::input(path, e))?;
        Self::parse(&text).map_err(|e| Error::input(path, e))
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|e| Error::Parse {
                line: *line,
                detail: format!("bad value for `{key}`: {e}"),
            }),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let line = self.entries.len() + 1;
        self.entries
            .insert(key.to_string(), (value.to_string(), line));
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, (v, _))| format!("{k} = {v}\n"))
            .collect()
    }
}
