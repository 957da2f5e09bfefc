use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct BackendInfo {
    pub role: String,
    pub id: String,
    /// SHA-256 of the executable, or the toolkit version for built-ins.
    pub version: String,
}

/// Everything needed to re-run a command: resolved configuration, content
/// hashes of its inputs, backend identities and the artifacts it wrote.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
    pub backends: Vec<BackendInfo>,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<Value>,
}

impl RunManifest {
    pub fn new(command: &str, config: Value, inputs: &[&Path]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), hash_path(p)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            run_id: String::new(),
            command: command.to_string(),
            config,
            inputs,
            backends: Vec::new(),
            outputs: Vec::new(),
            failures: Vec::new(),
        })
    }

    pub fn builtin(&mut self, role: &str, id: &str) {
        self.backends.push(BackendInfo {
            role: role.to_string(),
            id: id.to_string(),
            version: format!("srpose {}", env!("CARGO_PKG_VERSION")),
        });
    }

    pub fn external(&mut self, role: &str, exe: &Path) -> Result<()> {
        let id = exe.display().to_string();
        let version = hash_file(exe).with_context(|| format!("hashing backend {id}"))?;
        self.backends.push(BackendInfo {
            role: role.to_string(),
            id,
            version,
        });
        Ok(())
    }

    pub fn output(&mut self, path: impl AsRef<Path>) {
        self.outputs.push(path.as_ref().display().to_string());
    }

    /// Fixes the run id (a digest of command, config, inputs and backends)
    /// and writes `run_manifest.json` into `dir`.
    pub fn write(mut self, dir: &Path) -> Result<PathBuf> {
        let identity = serde_json::json!([self.command, self.config, self.inputs, self.backends]);
        let digest = Sha256::digest(identity.to_string().as_bytes());
        self.run_id = hex::encode(&digest[..8]);
        self.outputs.sort();
        let path = dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(&self)?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Content hash of a file, or of a directory's sorted relative paths and
/// file hashes.
pub fn hash_path(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return hash_file(path);
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(hash_file(&path.join(&rel))?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walk stays under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
