//! Output-directory bookkeeping: every artifact is hashed and listed in a
//! `<command>.run.json` record next to the config hash and seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;

/// Embedded in report artifacts so each can be traced to its run.
#[derive(Debug, Clone, Serialize)]
pub struct Stamp {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_hash: String,
    pub seed: u64,
}

/// A report artifact: the stamp plus the payload.
#[derive(Serialize)]
pub struct Stamped<'a, T: Serialize> {
    pub run: &'a Stamp,
    #[serde(flatten)]
    pub body: T,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    #[serde(flatten)]
    stamp: &'a Stamp,
    inputs: &'a BTreeMap<String, String>,
    artifacts: &'a BTreeMap<String, String>,
}

pub struct Run {
    command: &'static str,
    out: PathBuf,
    pub stamp: Stamp,
    inputs: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Run {
    pub fn new(command: &'static str, out: &Path, cfg: &PipelineConfig) -> anyhow::Result<Self> {
        std::fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
        Ok(Run {
            command,
            out: out.to_path_buf(),
            stamp: Stamp {
                tool: "qflaw",
                version: env!("CARGO_PKG_VERSION"),
                config_hash: cfg.hash(),
                seed: cfg.seed,
            },
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Records the content hash of an input file under a logical name.
    pub fn input(&mut self, name: &str, path: &Path) -> anyhow::Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.insert(name.to_string(), digest);
        Ok(())
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(path)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> anyhow::Result<PathBuf> {
        self.write_bytes(name, text.as_bytes())
    }

    /// Pretty JSON with a trailing newline, written as-is (schema-defined files).
    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write_text(name, &s)
    }

    /// JSON report with the run stamp embedded under `run`.
    pub fn write_report<T: Serialize>(&mut self, name: &str, body: T) -> anyhow::Result<PathBuf> {
        let stamp = self.stamp.clone();
        self.write_json(name, &Stamped { run: &stamp, body })
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> anyhow::Result<PathBuf> {
        let mut s = String::new();
        for r in rows {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        self.write_text(name, &s)
    }

    /// Records a file some library call already wrote into the output directory.
    pub fn adopt(&mut self, name: &str) -> anyhow::Result<()> {
        let digest = sha256_file(&self.path(name))?;
        self.artifacts.insert(name.to_string(), digest);
        Ok(())
    }

    pub fn finish(self) -> anyhow::Result<PathBuf> {
        let record = RunRecord {
            command: self.command,
            stamp: &self.stamp,
            inputs: &self.inputs,
            artifacts: &self.artifacts,
        };
        let path = self.out.join(format!("{}.run.json", self.command));
        let mut s = serde_json::to_string_pretty(&record)?;
        s.push('\n');
        std::fs::write(&path, s).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
