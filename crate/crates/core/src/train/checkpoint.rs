use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, TrainConfig};
use crate::crts::CountMatrix;
use crate::error::{Error, Result};
use crate::model::Transformer;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SWAPLMC1";

/// Everything needed to continue a run bit-exactly. The per-step random
/// streams derive from `(seed, step)`, so no generator state is stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub seed: u64,
    pub train_config: TrainConfig,
    /// Hash of the run's configs and input artifacts.
    pub fingerprint: String,
    pub model: Transformer,
    pub optimizer: AdamState,
    pub generator: Option<(Transformer, AdamState)>,
    pub count_matrix: Option<CountMatrix>,
}

/// Hex SHA-256 over the JSON form of each part.
pub(crate) fn fingerprint(parts: &[&dyn erased::Json]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.json().as_bytes());
        h.update([0]);
    }
    format!("{:x}", h.finalize())
}

pub(crate) mod erased {
    pub trait Json {
        fn json(&self) -> String;
    }

    impl<T: serde::Serialize> Json for T {
        fn json(&self) -> String {
            serde_json::to_string(self).expect("config types serialize")
        }
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        bincode::serialize_into(&mut out, self)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointMismatch(format!(
                "{} is not a checkpoint",
                path.display()
            )));
        }
        let ck: Checkpoint = bincode::deserialize_from(input)?;
        ck.model.params.check_shapes(&ck.model.config)?;
        Ok(ck)
    }
}
