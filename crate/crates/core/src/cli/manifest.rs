use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// CSV columns holding wall-clock measurements.
const TIMING_COLUMNS: [&str; 2] = ["elapsed_s", "wall_time_s"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the output directory.
    pub path: String,
    /// Hash of the artifact with timing columns removed.
    pub sha256: String,
    /// The artifact is a plot or table of timings only.
    pub timing: bool,
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Hash of the resolved config text.
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<ArtifactRecord>,
    pub wall_time_s: f64,
    pub status: String,
    pub exit_code: i32,
}

impl RunManifest {
    pub fn append(&self, dir: &Path) -> std::io::Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(MANIFEST_FILE))?;
        let line = serde_json::to_string(self).map_err(std::io::Error::other)?;
        writeln!(f, "{line}")
    }

    pub fn read_all(dir: &Path) -> std::io::Result<Vec<RunManifest>> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
            .collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of an artifact ignoring wall-clock columns of CSV files.
pub fn stable_digest(name: &str, bytes: &[u8]) -> String {
    if !name.ends_with(".csv") {
        return sha256_hex(bytes);
    }
    let text = String::from_utf8_lossy(bytes);
    let mut lines = text.lines();
    let Some(header) = lines.next() else {
        return sha256_hex(bytes);
    };
    let keep: Vec<bool> = header.split(',').map(|c| !TIMING_COLUMNS.contains(&c)).collect();
    let mut out = String::new();
    for line in std::iter::once(header).chain(lines) {
        let fields: Vec<&str> = line
            .split(',')
            .zip(keep.iter().chain(std::iter::repeat(&true)))
            .filter(|(_, k)| **k)
            .map(|(f, _)| f)
            .collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    sha256_hex(out.as_bytes())
}
