//! Artifact writers. Every CSV starts with a `# manifest:` comment line
//! holding the compact manifest JSON, then a header row.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Nine significant digits in scientific notation; NaN becomes an empty cell.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.8e}")
    }
}

/// Hex sha256 over `blob <len>\0<bytes>`, the git object layout.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn hash_file(path: &Path) -> Result<InputHash, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(InputHash {
        path: path.to_path_buf(),
        sha256: content_hash(&bytes),
    })
}

/// Everything that determines an artifact's contents. Output location and
/// thread count are deliberately absent.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<InputHash>,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &'static str, seed: u64, config: &C, inputs: Vec<InputHash>) -> Result<Self, CliError> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config: serde_json::to_value(config).map_err(fedml_core::Error::from)?,
            inputs,
        })
    }
}

pub struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self, manifest: &Manifest) -> Result<String, CliError> {
        let mut out = String::new();
        let json = serde_json::to_string(manifest).map_err(fedml_core::Error::from)?;
        let _ = writeln!(out, "# manifest: {json}");
        let _ = writeln!(out, "{}", self.header.join(","));
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.join(","));
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path, manifest: &Manifest) -> Result<(), CliError> {
        write_bytes(path, self.render(manifest)?.as_bytes())
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(fedml_core::Error::from)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}
