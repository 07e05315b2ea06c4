use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{decode_blob, encode_blob};
use crate::params::ParamTree;

/// Hex SHA-256 of a blob's bytes.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CheckpointRef(pub String);

impl fmt::Display for CheckpointRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Write-once, content-addressed blobs under a directory.
#[derive(Clone, Debug)]
pub struct CheckpointStore {
    root: PathBuf,
}

impl CheckpointStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(CheckpointStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn blob_path(&self, r: &CheckpointRef) -> PathBuf {
        self.root.join(format!("{}.blob", r.0))
    }

    pub fn put(&self, params: &ParamTree) -> Result<CheckpointRef> {
        let bytes = encode_blob(params);
        let r = CheckpointRef(hex::encode(Sha256::digest(&bytes)));
        let path = self.blob_path(&r);
        if !path.exists() {
            let tmp = self.root.join(format!("{}.tmp", r.0));
            std::fs::write(&tmp, &bytes)?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(r)
    }

    pub fn get(&self, r: &CheckpointRef) -> Result<ParamTree> {
        let path = self.blob_path(r);
        let bytes = std::fs::read(&path).map_err(|_| Error::MissingCheckpoint(r.0.clone()))?;
        if hex::encode(Sha256::digest(&bytes)) != r.0 {
            return Err(Error::CorruptCheckpoint {
                path,
                reason: "content hash mismatch".into(),
            });
        }
        decode_blob(&bytes).map_err(|e| match e {
            Error::CorruptCheckpoint { reason, .. } => Error::CorruptCheckpoint { path, reason },
            other => other,
        })
    }

    pub fn contains(&self, r: &CheckpointRef) -> bool {
        self.blob_path(r).exists()
    }
}
