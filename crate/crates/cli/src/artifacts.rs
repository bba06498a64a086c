//! Output writing. JSON artifacts carry the config hash and seed inline;
//! every output directory also gets a `run.json` listing inputs and outputs
//! with their SHA-256 digests.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fieldasr_core::corpus::{write_manifest, Manifest};
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::Loaded;

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn display_relative(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

pub struct Run<'a> {
    loaded: &'a Loaded,
    subcommand: &'static str,
    dir: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl<'a> Run<'a> {
    pub fn new(loaded: &'a Loaded, subcommand: &'static str, dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { loaded, subcommand, dir, inputs: Vec::new(), outputs: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<fs::File>> {
        let path = self.dir.join(name);
        let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        self.outputs.push(path);
        Ok(BufWriter::new(f))
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, items: impl IntoIterator<Item = T>) -> Result<()> {
        let mut w = self.create(name)?;
        for item in items {
            serde_json::to_writer(&mut w, &item)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Write a JSON object with `config_hash` and `seed` added.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut obj = match serde_json::to_value(value)? {
            Value::Object(m) => m,
            other => {
                let mut m = Map::new();
                m.insert("value".into(), other);
                m
            }
        };
        obj.insert("config_hash".into(), json!(self.loaded.hash));
        obj.insert("seed".into(), json!(self.loaded.config.seed));
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, &Value::Object(obj))?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let mut w = self.create(name)?;
        w.write_all(text.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn write_manifest(&mut self, name: &str, m: &Manifest) -> Result<()> {
        let w = self.create(name)?;
        write_manifest(m, w)?;
        Ok(())
    }

    /// Record a file some other writer produced inside the run directory.
    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Write `run.json` and return a one-line summary for stdout.
    pub fn finish(self, summary: Value) -> Result<Value> {
        let describe = |paths: &[PathBuf], base: &Path| -> Result<Vec<Value>> {
            paths
                .iter()
                .map(|p| Ok(json!({ "path": display_relative(p, base), "sha256": sha256_file(p)? })))
                .collect()
        };
        let record = json!({
            "subcommand": self.subcommand,
            "config_hash": self.loaded.hash,
            "seed": self.loaded.config.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "inputs": describe(&self.inputs, &self.loaded.base)?,
            "outputs": describe(&self.outputs, &self.dir)?,
            "summary": summary,
        });
        let path = self.dir.join("run.json");
        fs::write(&path, serde_json::to_string_pretty(&record)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(json!({
            "subcommand": self.subcommand,
            "config_hash": self.loaded.hash,
            "dir": self.dir.to_string_lossy(),
            "summary": record["summary"],
        }))
    }
}
