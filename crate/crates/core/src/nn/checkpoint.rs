//! JSON checkpoints for trained drift networks.
//!
//! Floats are written in shortest round-trip form, so a save/load cycle
//! reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::embedding::SinusoidalEmbedding;
use super::net::{Architecture, DriftNet};
use super::train::{TrainOptions, TrainReport};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "cpfas-drift-net";
pub const CHECKPOINT_VERSION: u32 = 1;

/// How a checkpoint was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub options: TrainOptions,
    pub report: TrainReport,
    /// Hash of the configuration that produced the training references.
    #[serde(default)]
    pub smoother_config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArchitectureRecord {
    dim: usize,
    width: usize,
    depth: usize,
    n_freqs: usize,
    activation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    architecture: ArchitectureRecord,
    frequencies: Vec<f64>,
    params: Vec<f64>,
    pub training: Option<TrainingManifest>,
}

impl Checkpoint {
    pub fn new(net: &DriftNet, training: Option<TrainingManifest>) -> Self {
        let a = net.architecture();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: ArchitectureRecord {
                dim: a.dim,
                width: a.width,
                depth: a.depth,
                n_freqs: net.embedding().n_freqs(),
                activation: "silu".into(),
            },
            frequencies: net.embedding().frequencies().to_vec(),
            params: net.params().to_vec(),
            training,
        }
    }

    /// Rebuild the network, rejecting anything inconsistent.
    pub fn to_net(&self) -> Result<DriftNet> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::CorruptModel(format!("unknown checkpoint format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::CorruptModel(format!("unsupported checkpoint version {}", self.version)));
        }
        let a = &self.architecture;
        if a.activation != "silu" {
            return Err(Error::CorruptModel(format!("unsupported activation {:?}", a.activation)));
        }
        if a.n_freqs != self.frequencies.len() {
            return Err(Error::CorruptModel(format!(
                "architecture declares {} frequencies, checkpoint stores {}",
                a.n_freqs,
                self.frequencies.len()
            )));
        }
        let arch = Architecture { dim: a.dim, width: a.width, depth: a.depth };
        DriftNet::from_parts(arch, SinusoidalEmbedding::new(self.frequencies.clone()), self.params.clone())
            .map_err(|e| match e {
                Error::Config(msg) => Error::CorruptModel(msg),
                other => other,
            })
    }
}

/// Write `net` to `path` atomically (temporary file plus rename).
pub fn save_checkpoint(path: &Path, net: &DriftNet, training: Option<TrainingManifest>) -> Result<()> {
    let text = serde_json::to_string(&Checkpoint::new(net, training))?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(DriftNet, Checkpoint)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptModel(format!("{}: {e}", path.display())))?;
    let net = ckpt.to_net()?;
    Ok((net, ckpt))
}
