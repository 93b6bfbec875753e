//! Flag > file > default resolution.
//!
//! A config file is either flat TOML (`key = value`, one table, no
//! sections) or a manifest JSON written by an earlier run of the same
//! command, whose resolved values are replayed (values that came from a
//! dataset or checkpoint are left to be read from those again).

use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Flag,
    File,
    Default,
    Dataset,
    Checkpoint,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Flag => "flag",
            Source::File => "file",
            Source::Default => "default",
            Source::Dataset => "dataset",
            Source::Checkpoint => "checkpoint",
        })
    }
}

/// Loads the file layer for `command`; `None` path gives an empty layer.
pub fn load_file<T: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        let manifest: Value =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let found = manifest.get("command").and_then(Value::as_str).unwrap_or("");
        if found != command {
            return Err(CliError::config(format!(
                "{}: manifest is for command `{found}`, not `{command}`",
                path.display()
            )));
        }
        let entries = manifest
            .get("config")
            .and_then(Value::as_object)
            .ok_or_else(|| CliError::config(format!("{}: manifest has no config object", path.display())))?;
        let replay: Map<String, Value> = entries
            .iter()
            .filter(|(_, v)| matches!(v.get("source").and_then(Value::as_str), Some("flag" | "file" | "default")))
            .filter_map(|(k, v)| v.get("value").filter(|x| !x.is_null()).map(|x| (k.clone(), x.clone())))
            .collect();
        serde_json::from_value(Value::Object(replay)).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| {
            let detail = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            CliError::config(format!("{}: {detail}", path.display()))
        })
    }
}

/// Resolved values in insertion order, each tagged with its source.
#[derive(Default)]
pub struct Resolved {
    entries: Vec<(String, Value, Source)>,
}

impl Resolved {
    pub fn pick<T: Serialize + Clone>(&mut self, key: &str, flag: Option<T>, file: Option<T>, default: T) -> T {
        let (value, source) = match (flag, file) {
            (Some(v), _) => (v, Source::Flag),
            (None, Some(v)) => (v, Source::File),
            (None, None) => (default, Source::Default),
        };
        self.record(key, &value, source);
        value
    }

    /// Like [`pick`](Self::pick) for keys with no default.
    pub fn pick_opt<T: Serialize + Clone>(&mut self, key: &str, flag: Option<T>, file: Option<T>) -> Option<T> {
        let (value, source) = match (flag, file) {
            (Some(v), _) => (Some(v), Source::Flag),
            (None, Some(v)) => (Some(v), Source::File),
            (None, None) => (None, Source::Default),
        };
        self.record(key, &value, source);
        value
    }

    pub fn record<T: Serialize>(&mut self, key: &str, value: &T, source: Source) {
        let v = serde_json::to_value(value).expect("config values serialize");
        self.entries.retain(|(k, _, _)| k != key);
        self.entries.push((key.to_string(), v, source));
    }

    pub fn source(&self, key: &str) -> Option<Source> {
        self.entries.iter().find(|(k, _, _)| k == key).map(|(_, _, s)| *s)
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        for (k, v, s) in &self.entries {
            m.insert(k.clone(), json!({ "value": v, "source": s.to_string() }));
        }
        Value::Object(m)
    }
}
