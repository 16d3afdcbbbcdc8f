//! Portable checkpoint: `OPSCKPT1` magic, a little-endian `u64` header
//! length, a JSON header, then every tensor as little-endian `f64` in the
//! order the header lists them.
//!
//! Trainable tensors come first in the model's visit order, followed by the
//! POD grid and per-channel bases when present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, ChannelBasis, ModelConfig, OperatorModel, PodBasis};
use crate::error::{Error, Result};
use crate::numcore::{Activation, Matrix, Parameterized};
use crate::synthdata::{f64s_from_le, Normalizer, CHANNEL_NAMES};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OPSCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: OperatorModel<f64>,
    pub normalizer: Normalizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Activations {
    hidden: Activation,
    output: Activation,
    gru_gates: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PodHeader {
    energy: f64,
    ranks: Vec<usize>,
    retained_energy: Vec<f64>,
    singular_values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    arch: Arch,
    dtype: String,
    config: ModelConfig,
    n_b2: usize,
    input_dim: usize,
    channels: Vec<String>,
    activations: Activations,
    /// How latent-times-channel trunk outputs are laid out.
    trunk_reshape: String,
    output_layout: String,
    tensors: Vec<TensorEntry>,
    pod: Option<PodHeader>,
    normalizer: Normalizer,
    blob_values: usize,
}

fn mismatch(detail: impl Into<String>) -> Error {
    Error::ModelMismatch(detail.into())
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let mut tensors = Vec::new();
        let mut blob: Vec<f64> = Vec::with_capacity(m.param_count());
        m.visit_params("", &mut |name, shape, values| {
            tensors.push(TensorEntry {
                name: name.into(),
                shape: shape.to_vec(),
                offset: blob.len(),
            });
            blob.extend_from_slice(values);
        });
        let pod = m.pod.as_ref().map(|p| {
            tensors.push(TensorEntry {
                name: "pod.points".into(),
                shape: vec![p.points.rows(), 2],
                offset: blob.len(),
            });
            blob.extend_from_slice(p.points.as_slice());
            for (ch, basis) in p.channels.iter().enumerate() {
                tensors.push(TensorEntry {
                    name: format!("pod.phi.{}", CHANNEL_NAMES[ch]),
                    shape: vec![basis.phi.rows(), basis.phi.cols()],
                    offset: blob.len(),
                });
                blob.extend_from_slice(basis.phi.as_slice());
            }
            PodHeader {
                energy: p.energy,
                ranks: p.ranks(),
                retained_energy: p.channels.iter().map(|c| c.retained_energy).collect(),
                singular_values: p.channels.iter().map(|c| c.singular_values.clone()).collect(),
            }
        });
        let header = Header {
            arch: m.arch,
            dtype: "f64le".into(),
            config: m.config,
            n_b2: m.n_b2,
            input_dim: m.input_dim(),
            channels: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
            activations: Activations {
                hidden: m.config.activation,
                output: Activation::Identity,
                gru_gates: "sigmoid/tanh".into(),
            },
            trunk_reshape: "channel-major".into(),
            output_layout: "row-major [points x channels]".into(),
            tensors,
            pod,
            normalizer: self.normalizer.clone(),
            blob_values: blob.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(16 + json.len() + 8 * blob.len());
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for v in blob {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(malformed("missing OPSCKPT1 magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| malformed("truncated"))?;
        if body.len() < hlen {
            return Err(malformed("header length exceeds file size"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let blob = f64s_from_le(&body[hlen..]).ok_or_else(|| malformed("blob length not a multiple of 8"))?;
        if blob.len() != header.blob_values {
            return Err(malformed(format!(
                "blob has {} values, header declares {}",
                blob.len(),
                header.blob_values
            )));
        }
        let tensor = |name: &str| -> Result<(&TensorEntry, &[f64])> {
            let e = header
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| mismatch(format!("tensor {name} missing")))?;
            let len: usize = e.shape.iter().product();
            let data = blob
                .get(e.offset..e.offset + len)
                .ok_or_else(|| malformed(format!("tensor {name} out of range")))?;
            Ok((e, data))
        };

        let pod = match &header.pod {
            None => None,
            Some(ph) => {
                let (pe, pts) = tensor("pod.points")?;
                let points = Matrix::from_vec(pe.shape[0], 2, pts.to_vec());
                let mut channels = Vec::new();
                for (ch, name) in CHANNEL_NAMES.iter().enumerate() {
                    let (e, data) = tensor(&format!("pod.phi.{name}"))?;
                    if e.shape.len() != 2 || e.shape[0] != points.rows() || Some(&e.shape[1]) != ph.ranks.get(ch) {
                        return Err(mismatch(format!("POD basis {name} has shape {:?}", e.shape)));
                    }
                    channels.push(ChannelBasis {
                        phi: Matrix::from_vec(e.shape[0], e.shape[1], data.to_vec()),
                        singular_values: ph.singular_values.get(ch).cloned().unwrap_or_default(),
                        retained_energy: ph.retained_energy.get(ch).copied().unwrap_or(f64::NAN),
                    });
                }
                Some(PodBasis {
                    points,
                    channels,
                    energy: ph.energy,
                })
            }
        };
        let mut model = OperatorModel::zeros(header.arch, header.config, header.n_b2, pod)?;
        let mut expected = Vec::new();
        model.visit_params("", &mut |name, shape, _| {
            expected.push((name.to_string(), shape.to_vec()))
        });
        let mut flat = Vec::with_capacity(model.param_count());
        for (name, shape) in &expected {
            let (e, data) = tensor(name)?;
            if &e.shape != shape {
                return Err(mismatch(format!(
                    "{name}: shape {:?}, architecture expects {shape:?}",
                    e.shape
                )));
            }
            flat.extend_from_slice(data);
        }
        model.load_params(&flat)?;
        Ok(Self {
            model,
            normalizer: header.normalizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
