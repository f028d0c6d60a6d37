//! Tensor files and block descriptors.
//!
//! A tensor file is the magic line `KTEN1`, a one-line JSON header
//! `{"dtype": "f32"|"f64", "shape": [..], "order": "C"}`, then the
//! little-endian row-major payload. A block file is a JSON document listing
//! the layers of an emitted block, each pointing at its weight tensor file by
//! a path relative to the block file.

use crate::conv::{ConvSpec, LayerDescriptor};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

const MAGIC: &[u8] = b"KTEN1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
    order: String,
}

pub fn encode_tensor(t: &DenseTensor, dtype: Dtype) -> Vec<u8> {
    let header = Header { dtype, shape: t.shape().to_vec(), order: "C".into() };
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    for &x in t.data() {
        match dtype {
            Dtype::F32 => out.extend((x as f32).to_le_bytes()),
            Dtype::F64 => out.extend(x.to_le_bytes()),
        }
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(DenseTensor, Dtype)> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Format("missing KTEN1 magic".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("unterminated header".into()))?;
    let header: Header = serde_json::from_slice(&rest[..nl])
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.order != "C" {
        return Err(Error::Format(format!("unsupported order {:?}", header.order)));
    }
    let payload = &rest[nl + 1..];
    let count: usize = header.shape.iter().product();
    if header.shape.is_empty() || count == 0 || payload.len() != count * header.dtype.size() {
        return Err(Error::Format(format!(
            "payload of {} bytes does not match shape {:?} ({:?})",
            payload.len(),
            header.shape,
            header.dtype
        )));
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok((DenseTensor::new(header.shape, data)?, header.dtype))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_tensor(path: &Path, t: &DenseTensor, dtype: Dtype) -> Result<()> {
    write_atomic(path, &encode_tensor(t, dtype))
}

pub fn read_tensor(path: &Path) -> Result<(DenseTensor, Dtype)> {
    decode_tensor(&std::fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    Cpd,
    TkdCpd,
    Svd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecEntry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub kind: String,
    #[serde(rename = "in")]
    pub in_channels: usize,
    #[serde(rename = "out")]
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub groups: usize,
    pub stride: usize,
    pub pad: usize,
    pub weights: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rel_error: f64,
    pub sensitivity: Option<f64>,
    pub intensity: Option<f64>,
    pub params: usize,
    pub flops: usize,
    pub input_hw: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockFile {
    pub block: BlockKind,
    pub spec: SpecEntry,
    pub layers: Vec<LayerEntry>,
    pub metrics: Metrics,
}

/// An emitted block held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub kind: BlockKind,
    pub spec: ConvSpec,
    pub layers: Vec<LayerDescriptor>,
    pub metrics: Metrics,
}

fn vector_tensor(v: &[f64]) -> DenseTensor {
    DenseTensor::new(vec![v.len()], v.to_vec()).expect("non-empty bias")
}

/// Writes `block.json` and one tensor file per weight or bias into `dir`.
/// Returns the path of the JSON file.
pub fn save_block(dir: &Path, block: &Block) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let put = |name: String, t: &DenseTensor| -> Result<String> {
        write_tensor(&dir.join(&name), t, Dtype::F64)?;
        Ok(name)
    };
    let spec_bias = match &block.spec.bias {
        Some(b) => Some(put("spec_bias.kten".into(), &vector_tensor(b))?),
        None => None,
    };
    let mut layers = Vec::new();
    for (n, l) in block.layers.iter().enumerate() {
        let weights = put(format!("layer{n}_weights.kten"), &l.weights)?;
        let bias = match &l.bias {
            Some(b) => Some(put(format!("layer{n}_bias.kten"), &vector_tensor(b))?),
            None => None,
        };
        layers.push(LayerEntry {
            kind: "conv2d".into(),
            in_channels: l.in_channels,
            out_channels: l.out_channels,
            kernel: [l.kernel.0, l.kernel.1],
            groups: l.groups,
            stride: l.stride,
            pad: l.pad,
            weights,
            bias,
        });
    }
    let s = &block.spec;
    let file = BlockFile {
        block: block.kind,
        spec: SpecEntry {
            in_channels: s.in_channels,
            out_channels: s.out_channels,
            kernel: s.kernel,
            stride: s.stride,
            pad: s.pad,
            bias: spec_bias,
        },
        layers,
        metrics: block.metrics.clone(),
    };
    let path = dir.join("block.json");
    let mut json = serde_json::to_vec_pretty(&file)?;
    json.push(b'\n');
    write_atomic(&path, &json)?;
    Ok(path)
}

/// Reads a block file and every tensor it references.
pub fn load_block(path: &Path) -> Result<Block> {
    let file: BlockFile = serde_json::from_slice(&std::fs::read(path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let load_vec = |name: &str| -> Result<Vec<f64>> {
        let (t, _) = read_tensor(&base.join(name))?;
        if t.order() != 1 {
            return Err(Error::Format(format!("{name}: bias must be a vector")));
        }
        Ok(t.into_data())
    };
    let s = &file.spec;
    let mut spec = ConvSpec::new(s.in_channels, s.out_channels, s.kernel, s.stride, s.pad)?;
    if let Some(b) = &s.bias {
        spec = spec.with_bias(load_vec(b)?)?;
    }
    let mut layers = Vec::new();
    for e in &file.layers {
        if e.kind != "conv2d" {
            return Err(Error::Format(format!("unknown layer kind {:?}", e.kind)));
        }
        let l = LayerDescriptor {
            in_channels: e.in_channels,
            out_channels: e.out_channels,
            kernel: (e.kernel[0], e.kernel[1]),
            groups: e.groups,
            stride: e.stride,
            pad: e.pad,
            weights: read_tensor(&base.join(&e.weights))?.0,
            bias: e.bias.as_deref().map(load_vec).transpose()?,
        };
        l.validate()?;
        layers.push(l);
    }
    Ok(Block { kind: file.block, spec, layers, metrics: file.metrics })
}
