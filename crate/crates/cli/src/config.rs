//! `--config` files: flat `key=value` lines (`#` comments), or a previous
//! run's `manifest.json`, whose `config` object is replayed.
//!
//! Entries become `--key value` arguments placed right after the subcommand,
//! ahead of the real command-line flags, so explicit flags win.

use std::ffi::OsString;
use std::path::Path;

use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config {path} line {line}: expected key=value")]
    Syntax { path: String, line: usize },
    #[error("config {path}: {msg}")]
    Manifest { path: String, msg: String },
    #[error("--config needs a value")]
    MissingValue,
}

/// Parses a `key=value` file into `(key, value)` pairs.
pub fn parse_pairs(text: &str, path: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax {
            path: path.into(),
            line: i + 1,
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                path: path.into(),
                line: i + 1,
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Pairs from the `config` object of a run manifest; `null` entries (unset
/// optional flags) are skipped and arrays are joined with commas.
pub fn manifest_pairs(text: &str, path: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let err = |msg: String| ConfigError::Manifest {
        path: path.into(),
        msg,
    };
    let v: Value = serde_json::from_str(text).map_err(|e| err(e.to_string()))?;
    let cfg = v
        .get("config")
        .and_then(Value::as_object)
        .ok_or_else(|| err("no `config` object".into()))?;
    let scalar = |v: &Value| -> Option<String> {
        match v {
            Value::String(s) => Some(s.clone()),
            Value::Number(n) => Some(n.to_string()),
            Value::Bool(b) => Some(b.to_string()),
            _ => None,
        }
    };
    let mut out = Vec::new();
    for (k, v) in cfg {
        let value = match v {
            Value::Null => continue,
            Value::Array(items) => items
                .iter()
                .map(|i| scalar(i).ok_or_else(|| err(format!("unsupported value in `{k}`"))))
                .collect::<Result<Vec<_>, _>>()?
                .join(","),
            other => scalar(other).ok_or_else(|| err(format!("unsupported value in `{k}`")))?,
        };
        out.push((k.clone(), value));
    }
    Ok(out)
}

fn load(path: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: shown.clone(),
        source,
    })?;
    if text.trim_start().starts_with('{') {
        manifest_pairs(&text, &shown)
    } else {
        parse_pairs(&text, &shown)
    }
}

/// Removes `--config FILE` / `--config=FILE` from `args` and splices the
/// file's entries in after the subcommand (the first non-flag argument).
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>, ConfigError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut files = Vec::new();
    let mut it = args.into_iter();
    if let Some(prog) = it.next() {
        rest.push(prog);
    }
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            files.push(it.next().ok_or(ConfigError::MissingValue)?);
        } else if let Some(v) = s.strip_prefix("--config=") {
            files.push(OsString::from(v));
        } else {
            rest.push(a);
        }
    }
    if files.is_empty() {
        return Ok(rest);
    }
    let mut injected = Vec::new();
    for f in &files {
        for (k, v) in load(Path::new(f))? {
            injected.push(OsString::from(format!("--{}", k.replace('_', "-"))));
            injected.push(OsString::from(v));
        }
    }
    // First positional after the program name is the subcommand; global
    // flags before it take a value only for --threads.
    let mut at = 1;
    while at < rest.len() {
        let s = rest[at].to_string_lossy();
        if s == "--threads" {
            at += 2;
        } else if s.starts_with('-') {
            at += 1;
        } else {
            break;
        }
    }
    let at = (at + 1).min(rest.len());
    let mut out: Vec<OsString> = rest[..at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&rest[at..]);
    Ok(out)
}
