//! Flat binary tensor archive.
//!
//! Layout: the magic `WLTA`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the UTF-8 JSON header, then the tensor
//! data. Every tensor is stored little-endian at `offset` bytes past the end
//! of the header.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{DenoiserParams, ExpertConfig, ModelConfig, WorldModel};
use crate::tensor::{Mat, Scalar};

pub const MAGIC: &[u8; 4] = b"WLTA";
pub const VERSION: u32 = 1;
const MAX_HEADER: u64 = 64 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn of<F: Scalar>() -> DType {
        if F::DTYPE == "f32" {
            DType::F32
        } else {
            DType::F64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.numel() * self.dtype.size()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    #[serde(default)]
    pub metadata: Value,
    pub tensors: Vec<TensorEntry>,
}

/// Tensor values are held as `f64`; the stored dtype is kept per entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveTensor {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<f64>,
}

impl ArchiveTensor {
    pub fn from_mat<F: Scalar>(m: &Mat<F>) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            dtype: DType::of::<F>(),
            data: m.data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    /// Interprets the tensor as a matrix; a 1-d tensor becomes one row.
    pub fn to_mat<F: Scalar>(&self) -> Result<Mat<F>> {
        let (r, c) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(Error::Checkpoint(format!("tensor of rank {} is not a matrix", self.shape.len()))),
        };
        Ok(Mat::new(r, c, self.data.iter().map(|&v| F::of(v)).collect()))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub metadata: Value,
    tensors: Vec<(String, ArchiveTensor)>,
}

impl TensorArchive {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: ArchiveTensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
        }
        if tensor.shape.iter().product::<usize>() != tensor.data.len() {
            return Err(Error::Checkpoint(format!("tensor '{name}' shape does not match its data")));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn push_mat<F: Scalar>(&mut self, name: impl Into<String>, m: &Mat<F>) -> Result<()> {
        self.push(name, ArchiveTensor::from_mat(m))
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&ArchiveTensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn header(&self) -> ArchiveHeader {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    dtype: t.dtype,
                    offset,
                };
                offset += e.byte_len() as u64;
                e
            })
            .collect();
        ArchiveHeader {
            metadata: self.metadata.clone(),
            tensors,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header())?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, t) in &self.tensors {
            match t.dtype {
                DType::F32 => t.data.iter().try_for_each(|&v| w.write_all(&(v as f32).to_le_bytes()))?,
                DType::F64 => t.data.iter().try_for_each(|&v| w.write_all(&v.to_le_bytes()))?,
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a tensor archive"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if hlen > MAX_HEADER || 16 + hlen as usize > bytes.len() {
            return Err(bad("header length exceeds file size"));
        }
        let data_start = 16 + hlen as usize;
        let header: ArchiveHeader = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        let data = &bytes[data_start..];
        let mut archive = TensorArchive::new(header.metadata);
        for e in header.tensors {
            let start = usize::try_from(e.offset).map_err(|_| bad("offset overflows"))?;
            let end = start
                .checked_add(e.byte_len())
                .filter(|&end| end <= data.len())
                .ok_or_else(|| Error::Checkpoint(format!("tensor '{}' lies outside the file", e.name)))?;
            let raw = &data[start..end];
            let values: Vec<f64> = match e.dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            archive.push(
                e.name,
                ArchiveTensor {
                    shape: e.shape,
                    dtype: e.dtype,
                    data: values,
                },
            )?;
        }
        Ok(archive)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    config: ModelConfig,
    experts: ExpertConfig,
}

const MODEL_KIND: &str = "world_model";

pub fn model_to_archive<F: Scalar>(model: &WorldModel<F>) -> TensorArchive {
    let meta = ModelMeta {
        kind: MODEL_KIND.into(),
        config: model.config,
        experts: model.experts,
    };
    let mut a = TensorArchive::new(serde_json::to_value(meta).expect("plain data"));
    for (prefix, p) in [("high", &model.high), ("low", &model.low)] {
        for (name, t) in p.named_tensors() {
            a.push_mat(format!("{prefix}.{name}"), t).expect("names are unique");
        }
    }
    a
}

fn fill_params<F: Scalar>(a: &TensorArchive, prefix: &str, cfg: &ModelConfig) -> Result<DenoiserParams<F>> {
    let mut p = DenoiserParams::<F>::zeros(cfg);
    let names: Vec<(String, (usize, usize))> =
        p.named_tensors().into_iter().map(|(n, t)| (n, t.shape())).collect();
    for ((name, want), slot) in names.into_iter().zip(p.tensors_mut()) {
        let full = format!("{prefix}.{name}");
        let m = a.require(&full)?.to_mat::<F>()?;
        if m.shape() != want {
            return Err(Error::Checkpoint(format!(
                "tensor '{full}' has shape {:?}, expected {want:?}",
                m.shape()
            )));
        }
        if !m.is_finite() {
            return Err(Error::Checkpoint(format!("tensor '{full}' holds non-finite values")));
        }
        *slot = m;
    }
    Ok(p)
}

pub fn model_from_archive<F: Scalar>(a: &TensorArchive) -> Result<WorldModel<F>> {
    let meta: ModelMeta = serde_json::from_value(a.metadata.clone())
        .map_err(|e| Error::Checkpoint(format!("model metadata: {e}")))?;
    if meta.kind != MODEL_KIND {
        return Err(Error::Checkpoint(format!("archive holds '{}', not a model", meta.kind)));
    }
    meta.config.validate()?;
    meta.experts.validate()?;
    Ok(WorldModel {
        config: meta.config,
        experts: meta.experts,
        high: fill_params(a, "high", &meta.config)?,
        low: fill_params(a, "low", &meta.config)?,
    })
}

pub fn save_model<F: Scalar>(model: &WorldModel<F>, path: impl AsRef<Path>) -> Result<()> {
    model_to_archive(model).save(path)
}

pub fn load_model<F: Scalar>(path: impl AsRef<Path>) -> Result<WorldModel<F>> {
    model_from_archive(&TensorArchive::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> WorldModel<f64> {
        let cfg = ModelConfig {
            channels: 4,
            width: 8,
            tokens_per_frame: 4,
            token_grid: (2, 2),
            frames_per_block: 2,
            layers: 1,
            heads: 2,
            ffn_hidden: 8,
            time_buckets: 5,
            prompt_vocab: 64,
        };
        WorldModel::init(cfg, ExpertConfig::default(), 3).unwrap()
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let m = tiny();
        let bytes = model_to_archive(&m).to_bytes();
        let back: WorldModel<f64> = model_from_archive(&TensorArchive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.config, m.config);
        for (a, b) in m.high.named_tensors().iter().zip(back.high.named_tensors()) {
            assert_eq!(a.1.data(), b.1.data());
        }
        for (a, b) in m.low.named_tensors().iter().zip(back.low.named_tensors()) {
            assert_eq!(a.1.data(), b.1.data());
        }
    }

    #[test]
    fn header_offsets_are_contiguous_little_endian() {
        let mut a = TensorArchive::new(Value::Null);
        a.push_mat("x", &Mat::new(1, 2, vec![1.5f32, -2.0])).unwrap();
        a.push_mat("y", &Mat::new(1, 1, vec![0.25f64])).unwrap();
        let h = a.header();
        assert_eq!(h.tensors[1].offset, 8);
        let bytes = a.to_bytes();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data = &bytes[16 + hlen..];
        assert_eq!(&data[..4], &1.5f32.to_le_bytes());
        assert_eq!(&data[8..16], &0.25f64.to_le_bytes());
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let bytes = model_to_archive(&tiny()).to_bytes();
        assert!(TensorArchive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(TensorArchive::from_bytes(b"nope").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TensorArchive::from_bytes(&bad).is_err());
        let mut a = TensorArchive::from_bytes(&bytes).unwrap();
        a.metadata["config"]["width"] = 6.into();
        assert!(model_from_archive::<f64>(&a).is_err());
    }
}
