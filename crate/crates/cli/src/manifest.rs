//! Per-run record of what each stage read and wrote.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Paths relative to the run directory, mapped to SHA-256 digests.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Writes through a temporary sibling and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

impl Manifest {
    pub fn load(run: &Path) -> Result<Self> {
        let p = run.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&p)?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
    }

    pub fn save(&self, run: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        atomic_write(&run.join(MANIFEST_FILE), text.as_bytes())
    }

    /// The record of `stage`, failing with a message naming it when the
    /// stage never ran or its outputs have since disappeared.
    pub fn require(&self, run: &Path, stage: &str, needed_by: &str) -> Result<&StageRecord> {
        let Some(rec) = self.stages.get(stage) else {
            bail!("stage `{needed_by}` needs the output of stage `{stage}`, which has not run in {}", run.display());
        };
        for f in rec.outputs.keys() {
            if !run.join(f).exists() {
                bail!("stage `{needed_by}` needs {f} from stage `{stage}`, which is missing");
            }
        }
        Ok(rec)
    }

    /// Checks that every input recorded for `stage` still has the digest
    /// it had when the stage ran, and that it ran under `config_hash`.
    pub fn verify(&self, run: &Path, stage: &str, config_hash: &str) -> Result<()> {
        let rec = self.stages.get(stage).with_context(|| format!("stage `{stage}` has not run"))?;
        if rec.config_hash != config_hash {
            bail!("stage `{stage}` ran with a different configuration; rerun it");
        }
        for (f, h) in &rec.inputs {
            if sha256_file(&run.join(f))? != *h {
                bail!("input {f} of stage `{stage}` changed after it ran; rerun it");
            }
        }
        Ok(())
    }

    pub fn record(&mut self, run: &Path, stage: &str, config_hash: &str, inputs: &[String], outputs: &[String]) -> Result<()> {
        let digest = |fs: &[String]| -> Result<BTreeMap<String, String>> {
            fs.iter().map(|f| Ok((f.clone(), sha256_file(&run.join(f))?))).collect()
        };
        let rec = StageRecord { config_hash: config_hash.to_string(), inputs: digest(inputs)?, outputs: digest(outputs)? };
        self.stages.insert(stage.to_string(), rec);
        self.save(run)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_require_verify() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path();
        atomic_write(&run.join("a.csv"), b"x\n").unwrap();
        let mut m = Manifest::default();
        let err = m.require(run, "generate", "preprocess").unwrap_err().to_string();
        assert!(err.contains("`generate`"), "{err}");
        m.record(run, "generate", "h1", &[], &["a.csv".into()]).unwrap();
        atomic_write(&run.join("b.csv"), b"y\n").unwrap();
        m.record(run, "preprocess", "h1", &["a.csv".into()], &["b.csv".into()]).unwrap();
        assert!(m.require(run, "generate", "preprocess").is_ok());
        assert_eq!(Manifest::load(run).unwrap(), m);
        m.verify(run, "preprocess", "h1").unwrap();
        assert!(m.verify(run, "preprocess", "h2").is_err());
        atomic_write(&run.join("a.csv"), b"z\n").unwrap();
        assert!(m.verify(run, "preprocess", "h1").is_err());
        std::fs::remove_file(run.join("b.csv")).unwrap();
        assert!(m.require(run, "preprocess", "label").is_err());
    }
}
