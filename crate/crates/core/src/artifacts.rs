//! On-disk artifact conventions: stage-scoped paths, atomic writes, and
//! content digests for provenance chaining.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// FNV-1a over raw bytes; used for config and artifact provenance digests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn digest_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

pub fn file_digest(path: &Path) -> Result<u64> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(fnv1a64(&std::fs::read(path)?))
}

/// Write via a temp file in the same directory, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| Error::Config(format!("artifact path {path:?} has no parent")))?;
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "artifact".into())
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_required(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(std::fs::read(path)?)
}

/// Artifact layout under one root directory: `{stage}/{name}.{ext}`.
#[derive(Clone, Debug)]
pub struct ArtifactPaths {
    pub root: PathBuf,
}

impl ArtifactPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactPaths { root: root.into() }
    }

    pub fn pairs(&self) -> PathBuf {
        self.root.join("corpus").join("pairs.jsonl")
    }

    pub fn benign(&self) -> PathBuf {
        self.root.join("corpus").join("benign.jsonl")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("corpus").join("split.json")
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.root.join("pretrain").join("base.ckpt")
    }

    pub fn pretrain_trace(&self) -> PathBuf {
        self.root.join("pretrain").join("loss.json")
    }

    pub fn importance_json(&self) -> PathBuf {
        self.root.join("identify").join("importance.json")
    }

    pub fn importance_bin(&self) -> PathBuf {
        self.root.join("identify").join("importance.bin")
    }

    pub fn subspace(&self) -> PathBuf {
        self.root.join("identify").join("subspace.json")
    }

    pub fn clusters(&self) -> PathBuf {
        self.root.join("cluster").join("clusters.json")
    }

    pub fn delta(&self) -> PathBuf {
        self.root.join("finetune").join("delta.bin")
    }

    pub fn tuned_checkpoint(&self) -> PathBuf {
        self.root.join("finetune").join("tuned.ckpt")
    }

    pub fn train_stats(&self) -> PathBuf {
        self.root.join("finetune").join("stats.json")
    }

    pub fn eval_reports(&self) -> PathBuf {
        self.root.join("eval").join("reports.json")
    }

    pub fn report_summary(&self) -> PathBuf {
        self.root.join("report").join("summary.json")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report").join("summary.csv")
    }

    pub fn cluster_export_csv(&self) -> PathBuf {
        self.root.join("export").join("clusters.csv")
    }
}
