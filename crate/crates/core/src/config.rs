//! Flat `section.key = value` configuration files (a TOML subset) and their
//! resolved echo.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io;

pub fn parse_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = io::read_text(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Every leaf of `value` as a sorted `a.b.c = v` line, so a resolved
/// configuration can be echoed, diffed, and parsed back.
pub fn echo<T: Serialize>(value: &T) -> Result<String> {
    let v = toml::Value::try_from(value).map_err(|e| Error::Config(e.to_string()))?;
    let mut lines = Vec::new();
    flatten("", &v, &mut lines);
    lines.sort();
    let mut out = lines.join("\n");
    out.push('\n');
    Ok(out)
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        leaf => out.push(format!("{prefix} = {leaf}")),
    }
}
