//! Flat `key=value` text files (manifests, checkpoint descriptors).

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};

pub type Pairs = Vec<(String, String)>;

pub fn render(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}

pub fn parse(text: &str) -> std::result::Result<Pairs, FormatError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| FormatError::Manifest {
            line: n + 1,
            message: "expected key=value".into(),
        })?;
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(FormatError::Manifest {
                line: n + 1,
                message: format!("bad key `{k}`"),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn write(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    fs::write(path, render(pairs)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Pairs> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse(&text)?)
}

pub fn get<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
}

pub fn get_parsed<T: std::str::FromStr>(pairs: &[(String, String)], key: &str) -> Result<T> {
    let v = get(pairs, key)?;
    v.parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`")))
}
