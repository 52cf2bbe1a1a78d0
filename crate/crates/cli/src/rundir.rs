//! Run directories and their manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::commands::{CliError, CliResult};

pub const RUN_ROOT_VAR: &str = "STORBID_RUN_ROOT";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Resolves `--out`, defaulting to `runs/<command>-<hash>` under the root.
pub fn resolve(out: Option<&Path>, command: &str, config_hash: &str) -> PathBuf {
    let root = std::env::var_os(RUN_ROOT_VAR).map(PathBuf::from);
    let rel = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{command}-{}", &config_hash[..12])));
    match root {
        Some(r) if rel.is_relative() => r.join(rel),
        _ => rel,
    }
}

#[derive(Serialize)]
struct Versions {
    storbid: &'static str,
    checkpoint_format: &'static str,
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    argv: &'a [String],
    config_sha256: &'a str,
    seed: u64,
    config: &'a C,
    /// sha256 of every input file.
    inputs: BTreeMap<String, String>,
    versions: Versions,
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: PathBuf) -> CliResult<Self> {
        fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Self { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_manifest<C: Serialize>(
        &self,
        command: &str,
        argv: &[String],
        config: &C,
        config_hash: &str,
        seed: u64,
        inputs: &[&Path],
    ) -> CliResult<()> {
        let mut hashes = BTreeMap::new();
        for p in inputs {
            let bytes = fs::read(p).map_err(|e| CliError::io(p, e))?;
            hashes.insert(p.display().to_string(), sha256_hex(&bytes));
        }
        let m = Manifest {
            command,
            argv,
            config_sha256: config_hash,
            seed,
            config,
            inputs: hashes,
            versions: Versions {
                storbid: env!("CARGO_PKG_VERSION"),
                checkpoint_format: storbid::predictor::CHECKPOINT_FORMAT,
            },
        };
        let path = self.file("manifest.json");
        let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Core(e.into()))?;
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}
