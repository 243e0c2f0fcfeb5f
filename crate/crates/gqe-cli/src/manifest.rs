//! Run manifests: one JSON file written next to every output, recording the
//! resolved flags, the digests of all input files, the tool version and the
//! wall-clock duration, so any run can be replayed bit-for-bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use gqe::{GqeError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub flags: BTreeMap<String, serde_json::Value>,
    pub inputs: BTreeMap<String, InputFile>,
    pub outputs: Vec<String>,
    pub duration_seconds: f64,
}

/// Collects flags/inputs/outputs during a subcommand run and writes the
/// manifest as `<output>.manifest.json` when the run succeeds.
pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(subcommand: &str) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                flags: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                duration_seconds: 0.0,
            },
            started: Instant::now(),
        }
    }

    pub fn flag(&mut self, key: &str, value: impl Into<serde_json::Value>) -> &mut Self {
        self.manifest.flags.insert(key.to_string(), value.into());
        self
    }

    pub fn path_flag(&mut self, key: &str, path: &Path) -> &mut Self {
        self.flag(key, path.display().to_string())
    }

    /// Record an input file under the flag it was passed with, digesting its
    /// current content.
    pub fn input(&mut self, flag: &str, path: &Path) -> Result<&mut Self> {
        self.path_flag(flag, path);
        let digest = sha256_file(path)?;
        self.manifest.inputs.insert(
            flag.to_string(),
            InputFile { path: path.display().to_string(), sha256: digest },
        );
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.manifest.outputs.push(path.display().to_string());
        self
    }

    /// Write `<primary>.manifest.json`; `primary` must already be recorded as
    /// an output.
    pub fn write(mut self, primary: &Path) -> Result<PathBuf> {
        self.manifest.duration_seconds = self.started.elapsed().as_secs_f64();
        let path = PathBuf::from(format!("{}.manifest.json", primary.display()));
        let mut w = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut w, &self.manifest)
            .map_err(|e| GqeError::Format(format!("manifest serialization: {e}")))?;
        writeln!(w)?;
        w.flush()?;
        Ok(path)
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| {
        GqeError::Format(format!("cannot read input {}: {e}", path.display()))
    })?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
