//! Run manifests: everything needed to redo a run, as a flat `key=value` file.
//!
//! ```text
//! command=sample
//! tool_version=0.1.0
//! config_hash=<sha256 of the canonical config rendering>
//! config.<key>=<value>          every configuration key, canonical order
//! setting.<key>=<value>         command flags and derived extractor specs
//! input.<name>.path=<path>
//! input.<name>.sha256=<hex>     files hash their bytes; directories hash a listing
//! output.<file>=<sha256>        relative to the output directory
//! timing.<name>=<seconds>
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::config::Config;
use super::kv;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq)]
pub struct InputDigest {
    pub name: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Config,
    pub settings: Vec<(String, String)>,
    pub inputs: Vec<InputDigest>,
    /// File name and digest of every output.
    pub outputs: Vec<(String, String)>,
    pub timings: Vec<(String, f64)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Digest of a file, or of a directory as the sorted `relative-path digest`
/// listing of every file below it.
pub fn digest_path(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return digest_file(path);
    }
    let mut listing = Vec::new();
    collect_files(path, path, &mut listing)?;
    listing.sort();
    let mut text = String::new();
    for (rel, d) in listing {
        text.push_str(&format!("{rel} {d}\n"));
    }
    Ok(sha256_hex(text.as_bytes()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p
                .strip_prefix(root)
                .expect("below root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push((rel, digest_file(&p)?));
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn new(command: &str, config: Config) -> Self {
        Self {
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config,
            settings: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn setting(&mut self, key: &str, value: impl ToString) {
        self.settings.push((key.to_string(), value.to_string()));
    }

    pub fn get_setting(&self, key: &str) -> Result<&str> {
        kv::get(&self.settings, key)
    }

    pub fn add_input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.push(InputDigest {
            name: name.to_string(),
            path: path.to_path_buf(),
            sha256: digest_path(path)?,
        });
        Ok(())
    }

    pub fn input(&self, name: &str) -> Result<&InputDigest> {
        self.inputs
            .iter()
            .find(|i| i.name == name)
            .ok_or_else(|| Error::Config(format!("manifest has no input `{name}`")))
    }

    /// Record a file already written under `dir`.
    pub fn add_output(&mut self, dir: &Path, file: &str) -> Result<()> {
        self.outputs.push((file.to_string(), digest_file(&dir.join(file))?));
        Ok(())
    }

    pub fn timing(&mut self, name: &str, seconds: f64) {
        self.timings.push((name.to_string(), seconds));
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut p = vec![
            ("command".to_string(), self.command.clone()),
            ("tool_version".to_string(), self.tool_version.clone()),
            ("config_hash".to_string(), self.config_hash()),
        ];
        p.extend(self.config.pairs().into_iter().map(|(k, v)| (format!("config.{k}"), v)));
        p.extend(self.settings.iter().map(|(k, v)| (format!("setting.{k}"), v.clone())));
        for i in &self.inputs {
            p.push((format!("input.{}.path", i.name), i.path.display().to_string()));
            p.push((format!("input.{}.sha256", i.name), i.sha256.clone()));
        }
        p.extend(self.outputs.iter().map(|(f, d)| (format!("output.{f}"), d.clone())));
        p.extend(
            self.timings
                .iter()
                .map(|(n, s)| (format!("timing.{n}"), format!("{s:?}"))),
        );
        p
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut config_text = String::new();
        let mut m = RunManifest::new(kv::get(pairs, "command")?, Config::default());
        m.tool_version = kv::get(pairs, "tool_version")?.to_string();
        let mut input_paths: Vec<(String, PathBuf)> = Vec::new();
        let mut input_digests: Vec<(String, String)> = Vec::new();
        for (k, v) in pairs {
            if let Some(c) = k.strip_prefix("config.") {
                config_text.push_str(&format!("{c} = {v}\n"));
            } else if let Some(s) = k.strip_prefix("setting.") {
                m.settings.push((s.to_string(), v.clone()));
            } else if let Some(name) = k.strip_prefix("input.").and_then(|r| r.strip_suffix(".path")) {
                input_paths.push((name.to_string(), PathBuf::from(v)));
            } else if let Some(name) = k.strip_prefix("input.").and_then(|r| r.strip_suffix(".sha256")) {
                input_digests.push((name.to_string(), v.clone()));
            } else if let Some(f) = k.strip_prefix("output.") {
                m.outputs.push((f.to_string(), v.clone()));
            } else if let Some(n) = k.strip_prefix("timing.") {
                let s = v
                    .parse()
                    .map_err(|_| Error::Config(format!("manifest timing `{n}`: bad value `{v}`")))?;
                m.timings.push((n.to_string(), s));
            }
        }
        m.config = Config::parse(&config_text)?;
        let recorded = kv::get(pairs, "config_hash")?;
        if recorded != m.config_hash() {
            return Err(Error::Config(format!(
                "manifest config hash {recorded} does not match its config ({})",
                m.config_hash()
            )));
        }
        for (name, path) in input_paths {
            let sha256 = input_digests
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, d)| d.clone())
                .ok_or_else(|| Error::Config(format!("manifest input `{name}` has no digest")))?;
            m.inputs.push(InputDigest { name, path, sha256 });
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        kv::write(path, &self.to_pairs())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_pairs(&kv::read(path)?)
    }

    /// Fail if any recorded input no longer has its recorded digest.
    pub fn verify_inputs(&self) -> Result<()> {
        for i in &self.inputs {
            let now = digest_path(&i.path)?;
            if now != i.sha256 {
                return Err(Error::Config(format!(
                    "input `{}` ({}) changed since the run: digest {now}, recorded {}",
                    i.name,
                    i.path.display(),
                    i.sha256
                )));
            }
        }
        Ok(())
    }

    /// Fail unless `other` lists the same outputs with the same digests.
    pub fn verify_outputs_match(&self, other: &RunManifest) -> Result<()> {
        if self.outputs != other.outputs {
            let diff: Vec<&str> = self
                .outputs
                .iter()
                .filter(|o| !other.outputs.contains(o))
                .map(|(f, _)| f.as_str())
                .collect();
            return Err(Error::Config(format!(
                "replay outputs differ from the record: {diff:?}"
            )));
        }
        Ok(())
    }
}
