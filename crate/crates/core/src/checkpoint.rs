//! Checkpoint container.
//!
//! Layout: magic `AVCK`, `u32` version, `u64` header length, a UTF-8 JSON
//! header, then every tensor's values back to back in little-endian order.
//! The header echoes the model configuration, names the element type and
//! lists each tensor's canonical name, section, shape and element offset.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore, TensorMap};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"AVCK";
pub const VERSION: u32 = 1;

/// Element type of the stored values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    /// The narrowest type that holds values of `T` exactly.
    pub fn of<T: Real>() -> Self {
        if std::mem::size_of::<T>() == 4 {
            Dtype::F32
        } else {
            Dtype::F64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Section {
    Param,
    Buffer,
    Extra,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    section: Section,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    dtype: Dtype,
    tensors: Vec<Entry>,
    meta: serde_json::Value,
}

/// Model tensors plus optional extra state (optimizer moments) and free-form
/// metadata. Values are held in `f64`, which represents both stored types
/// exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f64>,
    pub extra: TensorMap<f64>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &Model<T>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.params().cast(),
            extra: TensorMap::new(),
            meta: serde_json::Value::Null,
        }
    }

    /// Rebuilds a model, validating every tensor against the registry.
    pub fn to_model<T: Real>(&self) -> Result<Model<T>> {
        Model::from_parts(self.config.clone(), self.params.cast())
    }

    pub fn write_to(&self, mut w: impl Write, dtype: Dtype) -> Result<()> {
        let sections = [
            (Section::Param, &self.params.params),
            (Section::Buffer, &self.params.buffers),
            (Section::Extra, &self.extra),
        ];
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (section, map) in sections {
            for (name, t) in map.iter() {
                tensors.push(Entry {
                    name: name.to_string(),
                    section,
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.len();
            }
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            dtype,
            tensors,
            meta: self.meta.clone(),
        })?;
        let mut buf = Vec::with_capacity(16 + header.len() + offset * dtype.width());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for (_, map) in sections {
            for (_, t) in map.iter() {
                for &v in t.data() {
                    match dtype {
                        Dtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                        Dtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                    }
                }
            }
        }
        w.write_all(&buf)
            .map_err(|e| Error::io("<checkpoint stream>", e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let data = &bytes[16 + hlen..];
        let width = header.dtype.width();
        let mut ckpt = Checkpoint {
            config: header.config,
            params: ParamStore::new(),
            extra: TensorMap::new(),
            meta: header.meta,
        };
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = data
                .get(e.offset * width..(e.offset + n) * width)
                .ok_or_else(|| Error::Format(format!("truncated data for {}", e.name)))?;
            let values: Vec<f64> = match header.dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("non-finite values in {}", e.name)));
            }
            let t = Tensor::from_vec(&e.shape, values)?;
            let map = match e.section {
                Section::Param => &mut ckpt.params.params,
                Section::Buffer => &mut ckpt.params.buffers,
                Section::Extra => &mut ckpt.extra,
            };
            map.insert(e.name, t)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(ckpt)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("<checkpoint stream>", e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes, dtype)?;
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Saves only the model, in its own precision.
pub fn save_model<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path, Dtype::of::<T>())
}

pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    Checkpoint::load(path)?.to_model()
}
