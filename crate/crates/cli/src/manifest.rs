use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to re-run a command and check its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub inputs: Vec<InputHash>,
    pub seed: u64,
    pub version: String,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<PathBuf>,
    #[serde(skip)]
    clock: Option<Instant>,
}

impl RunManifest {
    pub fn start(subcommand: &str, seed: u64) -> RunManifest {
        RunManifest {
            subcommand: subcommand.to_string(),
            argv: std::env::args().collect(),
            inputs: Vec::new(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            wall_clock_seconds: 0.0,
            outputs: Vec::new(),
            clock: Some(Instant::now()),
        }
    }

    pub fn record_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(InputHash { path: path.to_path_buf(), sha256: format!("{:x}", Sha256::digest(bytes)) });
    }

    /// Path of the manifest written next to `output`.
    pub fn path_for(output: &Path) -> PathBuf {
        let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        output.with_file_name(name)
    }

    pub fn finish(mut self, output: &Path) -> std::io::Result<()> {
        self.wall_clock_seconds = self.clock.map(|c| c.elapsed().as_secs_f64()).unwrap_or(0.0);
        self.outputs.push(output.to_path_buf());
        let text = serde_json::to_string_pretty(&self).map_err(std::io::Error::other)?;
        std::fs::write(Self::path_for(output), text + "\n")
    }
}
