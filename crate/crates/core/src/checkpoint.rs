//! `RNVC` checkpoint files: a JSON manifest followed by raw f32 blobs.
//!
//! Layout: magic `RNVC`, u64 LE manifest length, manifest bytes, then every
//! parameter tensor as little-endian f32 in manifest order. Offsets in the
//! manifest are byte offsets from the start of the blob section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusedConv;
use crate::model::{ModelConfig, RepNerv};
use crate::online_rep::{RepLayer, RepMode};
use crate::ops::ConvWeight;
use crate::rep_blocks::{BlockConfig, RepBlock};

const MAGIC: &[u8; 4] = b"RNVC";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub mode: RepMode,
    #[serde(flatten)]
    pub block: BlockConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 4],
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub layers: Vec<LayerRecord>,
    pub tensors: Vec<TensorRecord>,
}

/// A model snapshot plus the optimizer step it was taken at.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: RepNerv<f32>,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(model: RepNerv<f32>, step: u64) -> Self {
        Self { model, step }
    }

    pub fn manifest(&self) -> Manifest {
        let m = &self.model;
        let layers = m
            .stages()
            .iter()
            .map(|s| LayerRecord { mode: s.mode(), block: s.cfg().clone() })
            .collect();
        let mut offset = 0u64;
        let tensors = m
            .param_names()
            .into_iter()
            .zip(m.param_tensors())
            .map(|(name, t)| {
                let r = TensorRecord { name, shape: t.shape(), offset };
                offset += 4 * t.len() as u64;
                r
            })
            .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            config: m.config().clone(),
            step: self.step,
            layers,
            tensors,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let manifest = serde_json::to_vec_pretty(&self.manifest())?;
        w.write_all(MAGIC)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        for t in self.model.param_tensors() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("missing RNVC magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| Error::Format("manifest too large".into()))?;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let manifest: Manifest = serde_json::from_slice(&buf)?;
        let mut blobs = Vec::new();
        r.read_to_end(&mut blobs)?;
        Self::from_parts(manifest, &blobs)
    }

    /// Rebuilds the model described by `manifest` from the raw blob section.
    pub fn from_parts(manifest: Manifest, blobs: &[u8]) -> Result<Self> {
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", manifest.format_version)));
        }
        let mut model = skeleton(&manifest.config, &manifest.layers)?;
        let names = model.param_names();
        if names.len() != manifest.tensors.len() {
            return Err(Error::Format(format!(
                "manifest lists {} tensors, layout needs {}",
                manifest.tensors.len(),
                names.len()
            )));
        }
        for ((name, dst), rec) in names.iter().zip(model.param_tensors_mut()).zip(&manifest.tensors) {
            if *name != rec.name || dst.shape() != rec.shape {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    rec.name,
                    rec.shape,
                    name,
                    dst.shape()
                )));
            }
            let start = usize::try_from(rec.offset).map_err(|_| Error::Format("offset overflow".into()))?;
            let end = start + 4 * dst.len();
            let bytes = blobs
                .get(start..end)
                .ok_or_else(|| Error::Format(format!("tensor {name} runs past the end of the file")))?;
            for (v, b) in dst.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
        }
        Ok(Self { model, step: manifest.step })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Zero-valued model with the manifest's architecture and layer modes.
pub(crate) fn skeleton(cfg: &ModelConfig, layers: &[LayerRecord]) -> Result<RepNerv<f32>> {
    cfg.validate()?;
    if layers.len() != cfg.factors.len() {
        return Err(Error::Format("layer count does not match config".into()));
    }
    let stages = layers
        .iter()
        .map(|l| {
            l.block.validate()?;
            match l.mode {
                RepMode::Deployed => RepLayer::deployed(
                    l.block.clone(),
                    FusedConv(ConvWeight::zeros(l.block.out_channels, l.block.in_channels, 3, 3)),
                ),
                mode => RepLayer::train(RepBlock::zeros(&l.block), mode),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let pe = 2 * cfg.pe_levels;
    let mlp = [
        ConvWeight::zeros(cfg.mlp_hidden, pe, 1, 1),
        ConvWeight::zeros(cfg.mlp_out(), cfg.mlp_hidden, 1, 1),
    ];
    let head = ConvWeight::zeros(3, *cfg.channels.last().unwrap(), 3, 3);
    RepNerv::from_parts(cfg.clone(), mlp, stages, head)
}
