//! Flag/config-file merging. A config file is either flat `key=value` lines
//! or a previously written `manifest.json`, whose `config` block is read back
//! verbatim; command-line flags always win.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub fn parse_config_text(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    if text.trim_start().starts_with('{') {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let cfg = v.get("config").and_then(|c| c.as_object()).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "JSON config must carry a \"config\" object".into(),
        })?;
        return cfg
            .iter()
            .map(|(k, v)| match v {
                serde_json::Value::String(s) => Ok((k.clone(), s.clone())),
                other => Ok((k.clone(), other.to_string())),
            })
            .collect();
    }
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        let k = k.trim().replace('_', "-");
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("duplicate key {k}"),
            });
        }
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text, path)
}

/// Resolves each setting from flag, then file, then default, and keeps the
/// effective value of everything it resolved.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    effective: BTreeMap<String, String>,
}

impl Settings {
    pub fn new(file: BTreeMap<String, String>) -> Self {
        Settings {
            file,
            effective: BTreeMap::new(),
        }
    }

    pub fn value<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match (flag, self.file.get(key)) {
            (Some(v), _) => v,
            (None, Some(s)) => s
                .parse::<T>()
                .map_err(|e| Error::Usage(format!("config key {key}: cannot parse {s:?}: {e}")))?,
            (None, None) => default,
        };
        self.effective.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Like [`Self::value`] with no default: absent everywhere is an error.
    pub fn required<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match (flag, self.file.get(key)) {
            (Some(v), _) => v,
            (None, Some(s)) => s
                .parse::<T>()
                .map_err(|e| Error::Usage(format!("config key {key}: cannot parse {s:?}: {e}")))?,
            (None, None) => return Err(Error::Usage(format!("--{key} is required"))),
        };
        self.effective.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// A switch set on the command line or by `key=true` in the file.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        let v = flag
            || match self.file.get(key).map(String::as_str) {
                None | Some("false") => false,
                Some("true") => true,
                Some(other) => return Err(Error::Usage(format!("config key {key}: expected true or false, got {other:?}"))),
            };
        self.effective.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn has_file_key(&self, key: &str) -> bool {
        self.file.contains_key(key)
    }

    /// Fails on file keys that no setting consumed.
    pub fn finish(self) -> Result<BTreeMap<String, String>> {
        let unknown: Vec<&String> = self.file.keys().filter(|k| !self.effective.contains_key(*k)).collect();
        if !unknown.is_empty() {
            return Err(Error::Usage(format!("unknown config keys: {unknown:?}")));
        }
        Ok(self.effective)
    }
}
