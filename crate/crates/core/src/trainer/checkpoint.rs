//! Binary artifact container for training checkpoints and inference
//! exports, plus the head-discard export itself.
//!
//! Layout: an 8-byte magic, a little-endian u64 header length, a JSON
//! header (kind, iteration, config snapshot, manifest, parameter table),
//! then raw little-endian f64 blobs in table order. Values round-trip
//! bit-exactly, which resuming relies on.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::model::SegModel;

const MAGIC: &[u8; 8] = b"SBNDART1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    /// Full training state: all parameters, buffers, and momenta.
    Training,
    /// Backbone + segmentation head only; momenta dropped.
    Inference,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub num_categories: usize,
    pub head_variant: String,
    pub fusion_mode: FusionMode,
    /// True when the boundary head was stripped at export.
    pub head_discarded: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 4],
    trainable: bool,
    has_momentum: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: ArtifactKind,
    iter: usize,
    config: RunConfig,
    manifest: Manifest,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct SavedParam {
    pub name: String,
    pub shape: [usize; 4],
    pub trainable: bool,
    pub values: Vec<f64>,
    pub momentum: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ArtifactKind,
    pub iter: usize,
    pub config: RunConfig,
    pub manifest: Manifest,
    pub params: Vec<SavedParam>,
}

impl Checkpoint {
    /// Snapshots the model's full state.
    pub fn capture(model: &SegModel, cfg: &RunConfig, iter: usize) -> Self {
        let params = model
            .store
            .iter()
            .map(|p| SavedParam {
                name: p.name.clone(),
                shape: dims(&p.value),
                trainable: p.trainable,
                values: p.value.iter().copied().collect(),
                momentum: p
                    .trainable
                    .then(|| p.momentum.iter().copied().collect()),
            })
            .collect();
        Self {
            kind: ArtifactKind::Training,
            iter,
            config: cfg.clone(),
            manifest: Manifest {
                config_digest: cfg.digest(),
                num_categories: cfg.dataset.num_categories,
                head_variant: cfg.head.variant.clone(),
                fusion_mode: cfg.fusion.mode,
                head_discarded: false,
            },
            params,
        }
    }

    /// Restores parameter values (and momenta, when present) into a model
    /// built from the same configuration.
    pub fn restore(&self, model: &mut SegModel) -> Result<()> {
        for saved in &self.params {
            let pid = self.lookup(model, &saved.name)?;
            let p = model.store.get_mut(pid);
            if dims(&p.value) != saved.shape {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    saved.name,
                    dims(&p.value),
                    saved.shape
                )));
            }
            p.value = from_vec(saved.shape, &saved.values);
            if let Some(m) = &saved.momentum {
                p.momentum = from_vec(saved.shape, m);
            }
        }
        Ok(())
    }

    fn lookup(&self, model: &SegModel, name: &str) -> Result<crate::autograd::ParamId> {
        model
            .store
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("model has no parameter '{name}'")))
    }

    /// Parameter values as `(name, array)` pairs for the by-name loading
    /// hook.
    pub fn named_values(&self) -> Vec<(String, Array4<f64>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), from_vec(p.shape, &p.values)))
            .collect()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.values.len())
            .sum()
    }

    /// Head-discard export: keeps only the backbone and segmentation head.
    /// Refused when fusion is enabled, because the segmentation path then
    /// depends on boundary-head weights and discarding them would change
    /// the predictions.
    pub fn export_inference(&self) -> Result<Checkpoint> {
        if self.config.fusion.mode != FusionMode::None {
            return Err(Error::ExportRefused(format!(
                "fusion mode {:?} makes the segmentation head depend on the boundary head; \
                 export the full checkpoint instead",
                self.config.fusion.mode
            )));
        }
        let params: Vec<SavedParam> = self
            .params
            .iter()
            .filter(|p| SegModel::is_inference_param(&p.name))
            .map(|p| SavedParam {
                momentum: None,
                ..p.clone()
            })
            .collect();
        Ok(Checkpoint {
            kind: ArtifactKind::Inference,
            iter: self.iter,
            config: self.config.clone(),
            manifest: Manifest {
                head_discarded: true,
                ..self.manifest.clone()
            },
            params,
        })
    }

    /// Configuration for rebuilding the exported model: no boundary head,
    /// no fusion, no auxiliary head.
    pub fn inference_config(&self) -> RunConfig {
        let mut cfg = self.config.clone();
        cfg.head.variant = "none".into();
        cfg.head.fcn_aux = false;
        cfg.fusion = Default::default();
        cfg
    }

    /// Builds a model matching this artifact and restores its weights: the
    /// full model for training checkpoints, the stripped one for exports.
    pub fn instantiate(&self) -> Result<SegModel> {
        let cfg = match self.kind {
            ArtifactKind::Training => self.config.clone(),
            ArtifactKind::Inference => self.inference_config(),
        };
        let mut model = SegModel::from_config(&cfg)?;
        self.restore(&mut model)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let header = Header {
            kind: self.kind,
            iter: self.iter,
            config: self.config.clone(),
            manifest: self.manifest.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.shape,
                    trainable: p.trainable,
                    has_momentum: p.momentum.is_some(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header_json.len() as u64).to_le_bytes())?;
        w.write_all(&header_json)?;
        for p in &self.params {
            write_f64s(&mut w, &p.values)?;
            if let Some(m) = &p.momentum {
                write_f64s(&mut w, m)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: not a model artifact (bad magic)",
                path.display()
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header_json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header_json)?;
        let header: Header = serde_json::from_slice(&header_json)?;
        let mut params = Vec::with_capacity(header.params.len());
        for e in header.params {
            let n = e.shape.iter().product();
            let values = read_f64s(&mut r, n)?;
            let momentum = if e.has_momentum {
                Some(read_f64s(&mut r, n)?)
            } else {
                None
            };
            params.push(SavedParam {
                name: e.name,
                shape: e.shape,
                trainable: e.trainable,
                values,
                momentum,
            });
        }
        Ok(Self {
            kind: header.kind,
            iter: header.iter,
            config: header.config,
            manifest: header.manifest,
            params,
        })
    }
}

fn dims(a: &Array4<f64>) -> [usize; 4] {
    let d = a.dim();
    [d.0, d.1, d.2, d.3]
}

fn from_vec(shape: [usize; 4], values: &[f64]) -> Array4<f64> {
    Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), values.to_vec())
        .expect("shape/value agreement checked at load")
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated parameter data".into()))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
