//! `manifest.json`: what produced a run's outputs and their digests.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, Resolved};
use crate::CliError;

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    args: &'a [String],
    seed: u64,
    config_sha256: String,
    config: &'a str,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    /// Files whose content varies between runs (wall-clock timings).
    volatile: Vec<String>,
}

fn digest(root: &Path, p: &Path) -> Result<FileDigest, CliError> {
    let bytes = std::fs::read(p).map_err(|e| CliError::Op(format!("hashing {}: {e}", p.display())))?;
    let shown = p.strip_prefix(root).unwrap_or(p);
    Ok(FileDigest {
        path: shown.display().to_string(),
        sha256: hex(&Sha256::digest(&bytes)),
    })
}

pub struct Run<'a> {
    pub command: &'a str,
    pub args: Vec<String>,
    pub config: &'a Resolved,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub volatile: Vec<PathBuf>,
}

impl Run<'_> {
    /// Writes `dir/manifest.json`. Output paths are recorded relative to
    /// `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let mut outputs = self.outputs.clone();
        outputs.sort();
        outputs.dedup();
        let m = Manifest {
            tool: "gsfix",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            args: &self.args,
            seed: self.config.config.seed,
            config_sha256: self.config.sha256(),
            config: &self.config.text,
            inputs: self.inputs.iter().map(|p| digest(Path::new(""), p)).collect::<Result<_, _>>()?,
            outputs: outputs.iter().map(|p| digest(dir, p)).collect::<Result<_, _>>()?,
            volatile: self
                .volatile
                .iter()
                .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
                .collect(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::Op(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
