//! Binary checkpoint files.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diffusion::TrainSession;
use crate::{Error, Result};

const MAGIC: &str = "lnsynth-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    magic: String,
    kind: String,
    body: T,
}

pub fn save<T: Serialize>(path: &Path, kind: &str, body: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let env = Envelope { magic: MAGIC.to_string(), kind: kind.to_string(), body };
    bincode::serialize_into(BufWriter::new(file), &env)
        .map_err(|e| Error::Data(format!("{}: cannot write checkpoint: {e}", path.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let env: Envelope<T> = bincode::deserialize_from(BufReader::new(file))
        .map_err(|e| Error::Data(format!("{}: not a readable checkpoint: {e}", path.display())))?;
    if env.magic != MAGIC || env.kind != kind {
        return Err(Error::Data(format!("{}: expected a {kind} checkpoint, found {}", path.display(), env.kind)));
    }
    Ok(env.body)
}

/// Diffusion training state plus the run configuration that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionCheckpoint {
    pub session: TrainSession,
    /// The full run configuration, TOML.
    pub config_toml: String,
}

pub const DIFFUSION_KIND: &str = "diffusion";
pub const SEGMENTATION_KIND: &str = "segmentation";

/// Trained segmenter plus the run configuration that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentationCheckpoint {
    pub model: crate::seg::SegModel,
    pub config_toml: String,
}
