//! Atomic file emission and the run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::RunError;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Timing {
    pub op: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Failure {
    pub kind: String,
    pub detail: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub condition: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub status: String,
    pub wall_clock_seconds: f64,
    pub summary: toml::Table,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
    pub files: Vec<FileEntry>,
    pub timings: Vec<Timing>,
    pub config: toml::Table,
}

pub const MANIFEST: &str = "manifest.toml";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write `content` to `dir/name` through a temporary file in the same directory.
pub fn write_atomic(dir: &Path, name: &str, content: &[u8]) -> Result<(), RunError> {
    let io = |e: std::io::Error| RunError::Io(format!("{}: {e}", dir.join(name).display()));
    let mut tmp = tempfile::Builder::new()
        .prefix(&format!(".{name}."))
        .suffix(".tmp")
        .tempfile_in(dir)
        .map_err(io)?;
    tmp.write_all(content).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(dir.join(name)).map_err(|e| io(e.error))?;
    Ok(())
}

/// CSV text with `# key = value` metadata lines before the column header.
pub fn csv_with_meta(meta: &[(&str, String)], body: &str) -> String {
    let mut s = String::new();
    for (k, v) in meta {
        s.push_str(&format!("# {k} = {v}\n"));
    }
    s.push_str(body);
    s
}

/// Collects outputs, digests and timings for one run.
pub struct Outputs {
    pub dir: PathBuf,
    pub files: Vec<FileEntry>,
    pub timings: Vec<Timing>,
    pub summary: toml::Table,
}

impl Outputs {
    pub fn new(dir: PathBuf) -> Result<Self, RunError> {
        std::fs::create_dir_all(&dir).map_err(|e| RunError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Outputs { dir, files: Vec::new(), timings: Vec::new(), summary: toml::Table::new() })
    }

    pub fn write(&mut self, name: &str, content: &str) -> Result<(), RunError> {
        write_atomic(&self.dir, name, content.as_bytes())?;
        self.files.retain(|f| f.name != name);
        self.files.push(FileEntry {
            name: name.to_string(),
            sha256: sha256_hex(content.as_bytes()),
            bytes: content.len(),
        });
        Ok(())
    }

    pub fn timed<T>(&mut self, op: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.push(Timing { op: op.to_string(), seconds: start.elapsed().as_secs_f64() });
        out
    }

    pub fn note(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.summary.insert(key.to_string(), value.into());
    }
}

/// Floats that TOML cannot hold (NaN, ±∞) become strings.
pub fn float(x: f64) -> toml::Value {
    if x.is_finite() {
        toml::Value::Float(x)
    } else {
        toml::Value::String(format!("{x}"))
    }
}

pub fn floats(xs: &[f64]) -> toml::Value {
    toml::Value::Array(xs.iter().map(|&x| float(x)).collect())
}
