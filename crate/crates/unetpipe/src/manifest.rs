//! Run manifests: every command records what it read, what it wrote, and
//! the digests of both. Digests are stable across reruns with identical
//! inputs; wall-clock time lives in its own field so reproducibility checks
//! can ignore it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub version: String,
    pub timestamp_unix: u64,
    pub inputs: Vec<(PathBuf, String)>,
    pub outputs: Vec<(PathBuf, String)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> RunManifest {
        let timestamp_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunManifest {
            command: command.to_string(),
            seed,
            version: TOOL_VERSION.to_string(),
            timestamp_unix,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path, contents: &str) {
        self.inputs.push((path.to_path_buf(), sha256_hex(contents.as_bytes())));
    }

    pub fn record_output(&mut self, path: &Path, contents: &str) {
        self.outputs.push((path.to_path_buf(), sha256_hex(contents.as_bytes())));
    }

    pub fn emit(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# unetpipe run manifest");
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "version = {}", self.version);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "timestamp = {}", self.timestamp_unix);
        for (path, digest) in &self.inputs {
            let _ = writeln!(s, "input {} sha256={digest}", path.display());
        }
        for (path, digest) in &self.outputs {
            let _ = writeln!(s, "output {} sha256={digest}", path.display());
        }
        s
    }
}
