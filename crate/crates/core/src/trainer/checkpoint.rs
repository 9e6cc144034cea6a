use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::scenario::hex_string;

use super::{AdamState, TrainError};

/// Trainable parameters plus optimizer state at a given epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub scenario_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub params: Vec<Tensor>,
    pub adam: AdamState,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk wrapper: the payload is kept as the exact JSON string that was
/// hashed, so verification is byte-precise.
#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    sha256: String,
    payload: String,
}

fn digest(payload: &str) -> String {
    let mut h = Sha256::new();
    h.update(payload.as_bytes());
    hex_string(&h.finalize())
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<(), TrainError> {
    let payload = serde_json::to_string(ck).map_err(TrainError::Encode)?;
    let file = CheckpointFile { sha256: digest(&payload), payload };
    let text = serde_json::to_string(&file).map_err(TrainError::Encode)?;
    std::fs::write(path, text).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(TrainError::Decode)?;
    if digest(&file.payload) != file.sha256 {
        return Err(TrainError::ChecksumMismatch { path: path.display().to_string() });
    }
    let ck: Checkpoint = serde_json::from_str(&file.payload).map_err(TrainError::Decode)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(TrainError::BadVersion { got: ck.version });
    }
    Ok(ck)
}
