//! On-disk formats. Byte layouts are documented in `docs/formats.md`.
//!
//! FTM (model):
//!
//! ```text
//! "FTM1" | u32 LE manifest length | manifest JSON | f32 LE blob
//! ```
//!
//! FTEN (tensor):
//!
//! ```text
//! "FTEN" | one-line JSON header {"shape":[..]} | '\n' | f32 LE blob
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{BatchNorm, Conv2d, Layer, Linear, Model, Pool, Tensor, TensorError};

pub const FTM_MAGIC: &[u8; 4] = b"FTM1";
pub const FTEN_MAGIC: &[u8; 4] = b"FTEN";
const FORMAT_VERSION: u32 = 1;

/// Location of one tensor inside the blob; `offset` is in bytes from the blob start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobRef {
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum LayerEntry {
    Conv2d {
        stride: usize,
        padding: usize,
        weight: BlobRef,
        bias: BlobRef,
    },
    Linear {
        weight: BlobRef,
        bias: BlobRef,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    BatchNorm {
        eps: f32,
        mean: BlobRef,
        var: BlobRef,
        gamma: BlobRef,
        beta: BlobRef,
    },
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    name: String,
    version: String,
    input_shape: Vec<usize>,
    blob_bytes: usize,
    layers: Vec<LayerEntry>,
}

#[derive(Default)]
struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, shape: &[usize], data: &[f32]) -> BlobRef {
        let offset = self.bytes.len();
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        BlobRef {
            shape: shape.to_vec(),
            offset,
        }
    }

    fn vector(&mut self, data: &[f32]) -> BlobRef {
        self.push(&[data.len()], data)
    }
}

fn format_err(msg: impl Into<String>) -> TensorError {
    TensorError::Format(msg.into())
}

struct BlobReader<'a> {
    blob: &'a [u8],
}

impl BlobReader<'_> {
    fn tensor(&self, r: &BlobRef) -> Result<Tensor, TensorError> {
        let numel: usize = r.shape.iter().product();
        if r.offset % 4 != 0 {
            return Err(format_err(format!("blob offset {} is not 4-byte aligned", r.offset)));
        }
        let end = r
            .offset
            .checked_add(numel * 4)
            .filter(|&e| e <= self.blob.len())
            .ok_or_else(|| format_err(format!("tensor at offset {} overruns the blob", r.offset)))?;
        let data = decode_f32(&self.blob[r.offset..end]);
        Tensor::new(r.shape.clone(), data)
    }

    fn vector(&self, r: &BlobRef) -> Result<Vec<f32>, TensorError> {
        if r.shape.len() != 1 {
            return Err(format_err(format!("expected a vector, got shape {:?}", r.shape)));
        }
        Ok(self.tensor(r)?.into_data())
    }
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Serializes a model. Output is canonical: loading and re-writing a file
/// produced here reproduces it byte for byte.
pub fn write_model<W: Write>(mut out: W, model: &Model) -> Result<(), TensorError> {
    let mut blob = BlobWriter::default();
    let layers = model
        .layers()
        .iter()
        .map(|layer| match layer {
            Layer::Conv2d(c) => LayerEntry::Conv2d {
                stride: c.stride,
                padding: c.padding,
                weight: blob.push(c.weight.shape(), c.weight.data()),
                bias: blob.vector(&c.bias),
            },
            Layer::Linear(l) => LayerEntry::Linear {
                weight: blob.push(l.weight.shape(), l.weight.data()),
                bias: blob.vector(&l.bias),
            },
            Layer::Relu => LayerEntry::Relu,
            Layer::MaxPool(p) => LayerEntry::MaxPool {
                window: p.window,
                stride: p.stride,
            },
            Layer::AvgPool(p) => LayerEntry::AvgPool {
                window: p.window,
                stride: p.stride,
            },
            Layer::Flatten => LayerEntry::Flatten,
            Layer::BatchNorm(bn) => LayerEntry::BatchNorm {
                eps: bn.eps,
                mean: blob.vector(&bn.mean),
                var: blob.vector(&bn.var),
                gamma: blob.vector(&bn.gamma),
                beta: blob.vector(&bn.beta),
            },
            Layer::Sigmoid => LayerEntry::Sigmoid,
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: model.name().to_string(),
        version: model.version().to_string(),
        input_shape: model.input_shape().to_vec(),
        blob_bytes: blob.bytes.len(),
        layers,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| format_err(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| format_err("manifest too large"))?;
    out.write_all(FTM_MAGIC)?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&blob.bytes)?;
    Ok(())
}

pub fn read_model<R: Read>(mut input: R) -> Result<Model, TensorError> {
    let mut head = [0u8; 8];
    input.read_exact(&mut head)?;
    if &head[..4] != FTM_MAGIC {
        return Err(format_err("not an FTM file (bad magic)"));
    }
    let len = u32::from_le_bytes([head[4], head[5], head[6], head[7]]) as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let manifest: Manifest =
        serde_json::from_slice(&json).map_err(|e| format_err(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(format_err(format!(
            "unsupported FTM version {}",
            manifest.format_version
        )));
    }
    let mut blob = Vec::new();
    input.read_to_end(&mut blob)?;
    if blob.len() != manifest.blob_bytes {
        return Err(format_err(format!(
            "blob has {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let reader = BlobReader { blob: &blob };
    let layers = manifest
        .layers
        .iter()
        .map(|entry| {
            Ok(match entry {
                LayerEntry::Conv2d {
                    stride,
                    padding,
                    weight,
                    bias,
                } => Layer::Conv2d(Conv2d {
                    weight: reader.tensor(weight)?,
                    bias: reader.vector(bias)?,
                    stride: *stride,
                    padding: *padding,
                }),
                LayerEntry::Linear { weight, bias } => Layer::Linear(Linear {
                    weight: reader.tensor(weight)?,
                    bias: reader.vector(bias)?,
                }),
                LayerEntry::Relu => Layer::Relu,
                LayerEntry::MaxPool { window, stride } => Layer::MaxPool(Pool {
                    window: *window,
                    stride: *stride,
                }),
                LayerEntry::AvgPool { window, stride } => Layer::AvgPool(Pool {
                    window: *window,
                    stride: *stride,
                }),
                LayerEntry::Flatten => Layer::Flatten,
                LayerEntry::BatchNorm {
                    eps,
                    mean,
                    var,
                    gamma,
                    beta,
                } => Layer::BatchNorm(BatchNorm {
                    mean: reader.vector(mean)?,
                    var: reader.vector(var)?,
                    gamma: reader.vector(gamma)?,
                    beta: reader.vector(beta)?,
                    eps: *eps,
                }),
                LayerEntry::Sigmoid => Layer::Sigmoid,
            })
        })
        .collect::<Result<Vec<_>, TensorError>>()?;
    Model::new(manifest.name, manifest.version, manifest.input_shape, layers)
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    shape: Vec<usize>,
}

pub fn write_tensor<W: Write>(mut out: W, tensor: &Tensor) -> Result<(), TensorError> {
    let header = serde_json::to_vec(&TensorHeader {
        shape: tensor.shape().to_vec(),
    })
    .map_err(|e| format_err(e.to_string()))?;
    out.write_all(FTEN_MAGIC)?;
    out.write_all(&header)?;
    out.write_all(b"\n")?;
    for v in tensor.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut input: R) -> Result<Tensor, TensorError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != FTEN_MAGIC {
        return Err(format_err("not an FTEN file (bad magic)"));
    }
    let newline = bytes[4..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err("FTEN header is not newline-terminated"))?
        + 4;
    let header: TensorHeader = serde_json::from_slice(&bytes[4..newline])
        .map_err(|e| format_err(format!("bad FTEN header: {e}")))?;
    let blob = &bytes[newline + 1..];
    let numel: usize = header.shape.iter().product();
    if blob.len() != numel * 4 {
        return Err(format_err(format!(
            "FTEN blob has {} bytes, shape {:?} needs {}",
            blob.len(),
            header.shape,
            numel * 4
        )));
    }
    Tensor::new(header.shape, decode_f32(blob))
}
