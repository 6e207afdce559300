//! Flat `key = value` run files. Keys are long flag names without dashes.

use std::collections::BTreeMap;
use std::ffi::OsString;

use crate::{AimError, Result};

pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: &str| AimError::ConfFile {
            line: i + 1,
            message: message.to_string(),
        };
        let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`"))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.starts_with('-') {
            return Err(err("bad key"));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(err(&format!("`{k}` given twice")));
        }
    }
    Ok(out)
}

pub fn render(entries: &BTreeMap<String, String>) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Flag arguments equivalent to `entries`; `true`/`false` values become a
/// bare switch or nothing.
pub fn to_args(entries: &BTreeMap<String, String>) -> Vec<OsString> {
    let mut args = Vec::new();
    for (k, v) in entries {
        match v.as_str() {
            "true" => args.push(format!("--{k}").into()),
            "false" => {}
            _ => {
                args.push(format!("--{k}").into());
                args.push(v.into());
            }
        }
    }
    args
}
