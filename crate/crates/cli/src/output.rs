//! Result directories: every file written through [`RunOutput`] is hashed
//! and listed in `manifest.json` together with the resolved configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use splitguard::image_io::encode_pnm;
use splitguard::Tensor;

use crate::config::ExperimentConfig;

pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "resolved.cfg";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub version: String,
    /// Every key with its resolved value.
    pub config: BTreeMap<String, String>,
    /// Files read by the run (checkpoints, dataset files).
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
}

pub struct RunOutput {
    dir: PathBuf,
    inputs: Vec<Artifact>,
    artifacts: Vec<Artifact>,
}

impl RunOutput {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(RunOutput {
            dir: dir.to_path_buf(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.retain(|a| a.file != name);
        self.artifacts.push(Artifact {
            file: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        self.write(name, text.as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    /// Writes a `[3,H,W]` image as PPM or a `[1,H,W]` image as PGM.
    pub fn write_image(&mut self, name: &str, img: &Tensor) -> Result<PathBuf> {
        self.write(name, &encode_pnm(img)?)
    }

    /// Records the checksum of a file the run read.
    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(Artifact {
            file: path.display().to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Writes the resolved config and the manifest.
    pub fn finish(mut self, cfg: &ExperimentConfig) -> Result<Manifest> {
        self.write_text(RESOLVED_CONFIG, &cfg.raw.resolved_text())?;
        let manifest = Manifest {
            command: cfg.command.name().to_string(),
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg
                .raw
                .resolved()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            inputs: self.inputs,
            artifacts: self.artifacts,
        };
        let mut s = serde_json::to_string_pretty(&manifest)?;
        s.push('\n');
        let path = self.dir.join(MANIFEST);
        fs::write(&path, s).with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}
