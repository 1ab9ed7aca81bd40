//! Run manifests and content hashes.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

/// Keys with this prefix describe the run rather than the configuration.
pub const RUN_PREFIX: &str = "run.";

/// SHA-256 of `blob <len>\0<content>`, the git object framing.
pub fn content_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes
        .iter()
        .fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// `key=value` document: run metadata under `run.`, then the resolved
/// configuration. Fed back as `--config`, it reproduces the run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub run: Vec<(String, String)>,
    pub config: Vec<(String, String)>,
}

impl Manifest {
    pub fn run_value(&self, key: &str) -> Option<&str> {
        self.run
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# cawcl run manifest\n");
        for (k, v) in &self.run {
            let _ = writeln!(out, "{RUN_PREFIX}{k}={v}");
        }
        for (k, v) in &self.config {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Hash of the rendered manifest, used to key cached results.
    pub fn digest(&self) -> String {
        content_hash(self.render().as_bytes())
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.render())
    }
}
