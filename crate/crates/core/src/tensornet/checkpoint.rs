//! Flat binary checkpoint container with a JSON header.
//!
//! ```text
//! offset 0   8 bytes   magic "FXTCKPT1"
//! offset 8   u64 LE    header length H in bytes
//! offset 16  H bytes   UTF-8 JSON header
//! offset 16+H          data section: tensors back to back, little-endian
//! ```
//!
//! Each header tensor record carries `name`, `shape`, `dtype` (`"f64"` or
//! `"i32"`), `offset` and `nbytes` relative to the start of the data section,
//! and an optional `qformat` (`"Qs8.6"`) for integer tensors holding raw
//! fixed-point values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerParams, NetworkSpec, Parameters};
use crate::error::{Error, Result};
use crate::fixedpoint::{QFormat, QTensor};

const MAGIC: &[u8; 8] = b"FXTCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F64(_) => "f64",
            TensorData::I32(_) => "i32",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
    pub qformat: Option<QFormat>,
}

impl TensorEntry {
    /// Real values, dequantizing integer tensors through their format.
    pub fn to_f64(&self) -> Result<Vec<f64>> {
        match (&self.data, self.qformat) {
            (TensorData::F64(v), _) => Ok(v.clone()),
            (TensorData::I32(v), Some(fmt)) => {
                Ok(v.iter().map(|&r| f64::from(r) * fmt.lsb()).collect())
            }
            (TensorData::I32(_), None) => Err(Error::Config(format!(
                "integer tensor {} has no qformat",
                self.name
            ))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    network: Option<NetworkSpec>,
    tensors: Vec<HeaderTensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderTensor {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    nbytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qformat: Option<QFormat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Option<NetworkSpec>,
    pub tensors: Vec<TensorEntry>,
}

fn weight_shape(kind: &LayerKind) -> Vec<usize> {
    match *kind {
        LayerKind::Convolution {
            in_channels,
            out_channels,
            kernel,
            ..
        } => vec![out_channels, in_channels, kernel, kernel],
        LayerKind::FullyConnected {
            in_features,
            out_features,
        } => vec![out_features, in_features],
    }
}

impl Checkpoint {
    pub fn from_params(net: &NetworkSpec, params: &Parameters) -> Result<Self> {
        params.check_shapes(net)?;
        let mut tensors = Vec::with_capacity(2 * params.layers.len());
        for (spec, layer) in net.layers.iter().zip(&params.layers) {
            tensors.push(TensorEntry {
                name: format!("{}.weight", spec.name),
                shape: weight_shape(&spec.kind),
                data: TensorData::F64(layer.weights.clone()),
                qformat: None,
            });
            tensors.push(TensorEntry {
                name: format!("{}.bias", spec.name),
                shape: vec![layer.bias.len()],
                data: TensorData::F64(layer.bias.clone()),
                qformat: None,
            });
        }
        Ok(Self {
            network: Some(net.clone()),
            tensors,
        })
    }

    /// Replaces a layer's weight tensor with raw fixed-point integers.
    pub fn set_quantized_weights(&mut self, layer_name: &str, q: &QTensor) -> Result<()> {
        let name = format!("{layer_name}.weight");
        let entry = self
            .tensors
            .iter_mut()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("no tensor named {name}")))?;
        if entry.data.len() != q.len() {
            return Err(Error::Shape(format!(
                "{name} has {} values, quantized tensor {}",
                entry.data.len(),
                q.len()
            )));
        }
        let raw = q
            .raw()
            .iter()
            .map(|&r| {
                i32::try_from(r)
                    .map_err(|_| Error::InvalidFormat(format!("raw value {r} exceeds i32")))
            })
            .collect::<Result<Vec<_>>>()?;
        entry.data = TensorData::I32(raw);
        entry.qformat = Some(q.format());
        Ok(())
    }

    pub fn to_params(&self) -> Result<(NetworkSpec, Parameters)> {
        let net = self
            .network
            .clone()
            .ok_or_else(|| Error::Config("checkpoint carries no network description".into()))?;
        let find = |name: String| -> Result<Vec<f64>> {
            self.tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing {name}")))?
                .to_f64()
        };
        let layers = net
            .layers
            .iter()
            .map(|spec| {
                Ok(LayerParams {
                    weights: find(format!("{}.weight", spec.name))?,
                    bias: find(format!("{}.bias", spec.name))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = Parameters { layers };
        params.check_shapes(&net)?;
        Ok((net, params))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut records = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(Error::Shape(format!(
                    "tensor {} has shape {:?} but {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            let offset = data.len() as u64;
            match &t.data {
                TensorData::F64(v) => v.iter().for_each(|x| data.extend_from_slice(&x.to_le_bytes())),
                TensorData::I32(v) => v.iter().for_each(|x| data.extend_from_slice(&x.to_le_bytes())),
            }
            records.push(HeaderTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: t.data.dtype().to_string(),
                offset,
                nbytes: data.len() as u64 - offset,
                qformat: t.qformat,
            });
        }
        let header = serde_json::to_vec(&Header {
            format: "fxtune-checkpoint".into(),
            version: 1,
            network: self.network.clone(),
            tensors: records,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let parse = |offset: u64, msg: String| Error::Parse {
            path: path.to_path_buf(),
            offset,
            msg,
        };
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: 16,
                actual: bytes.len() as u64,
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(parse(0, "bad checkpoint magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let data_start = 16u64
            .checked_add(header_len)
            .ok_or_else(|| parse(8, "header length overflows".into()))?;
        if (bytes.len() as u64) < data_start {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: data_start,
                actual: bytes.len() as u64,
            });
        }
        let header: Header = serde_json::from_slice(&bytes[16..data_start as usize])
            .map_err(|e| parse(16, format!("bad header: {e}")))?;
        if header.version != 1 {
            return Err(parse(16, format!("unsupported version {}", header.version)));
        }
        let data = &bytes[data_start as usize..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for rec in header.tensors {
            let end = rec.offset + rec.nbytes;
            if end > data.len() as u64 {
                return Err(Error::Truncated {
                    path: path.to_path_buf(),
                    expected: data_start + end,
                    actual: bytes.len() as u64,
                });
            }
            let raw = &data[rec.offset as usize..end as usize];
            let count: usize = rec.shape.iter().product();
            let tensor_data = match rec.dtype.as_str() {
                "f64" if raw.len() == 8 * count => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                "i32" if raw.len() == 4 * count => TensorData::I32(
                    raw.chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                other => {
                    return Err(parse(
                        data_start + rec.offset,
                        format!(
                            "tensor {}: dtype {other} with {} bytes does not match shape {:?}",
                            rec.name, rec.nbytes, rec.shape
                        ),
                    ))
                }
            };
            tensors.push(TensorEntry {
                name: rec.name,
                shape: rec.shape,
                data: tensor_data,
                qformat: rec.qformat,
            });
        }
        Ok(Self {
            network: header.network,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
