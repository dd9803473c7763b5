//! Self-describing tensor container shared by pretraining and fine-tuning.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MDPD"            4 bytes
//! version           u16
//! tensor count      u32
//! per tensor:
//!   name length     u32, then UTF-8 name bytes
//!   rank            u32
//!   extents         rank × u32
//!   payload         product(extents) × f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::{BackboneModel, ModelError, Param, SideModel};

pub const MAGIC: &[u8; 4] = b"MDPD";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_param(p: &Param) -> Self {
        NamedTensor {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("extents match payload")
    }
}

fn u32_of(n: usize, what: &str) -> Result<u32, ModelError> {
    u32::try_from(n).map_err(|_| ModelError::Checkpoint(format!("{what} {n} does not fit in u32")))
}

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<(), ModelError> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&u32_of(tensors.len(), "tensor count")?.to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&u32_of(name.len(), "name length")?.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&u32_of(t.shape.len(), "rank")?.to_le_bytes())?;
        for &e in &t.shape {
            w.write_all(&u32_of(e, "extent")?.to_le_bytes())?;
        }
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(ModelError::Checkpoint(format!("tensor {} payload does not match its extents", t.name)));
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<NamedTensor>, ModelError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic bytes".into()));
    }
    let mut version = [0u8; 2];
    r.read_exact(&mut version)?;
    let version = u16::from_le_bytes(version);
    if version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<(), ModelError> {
    let file = File::create(path).map_err(|e| ModelError::Io { path: path.display().to_string(), source: e })?;
    write_checkpoint(BufWriter::new(file), tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedTensor>, ModelError> {
    let file = File::open(path).map_err(|e| ModelError::Io { path: path.display().to_string(), source: e })?;
    read_checkpoint(BufReader::new(file))
}

/// Copies tensors into the matching parameters; every parameter must be present.
pub fn load_into<'a>(params: impl IntoIterator<Item = &'a mut Param>, tensors: &[NamedTensor]) -> Result<(), ModelError> {
    for p in params {
        let t = tensors
            .iter()
            .find(|t| t.name == p.name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {}", p.name)))?;
        if t.shape != p.value.shape() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                p.name,
                t.shape,
                p.value.shape()
            )));
        }
        p.value = t.to_array();
    }
    Ok(())
}

impl BackboneModel {
    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.params().into_iter().map(NamedTensor::from_param).collect()
    }

    pub fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<(), ModelError> {
        load_into(self.params_mut(), tensors)
    }

    /// Rounds every parameter to the checkpoint's 32-bit precision so the
    /// in-memory model and its saved form agree exactly.
    pub fn round_to_checkpoint(&mut self) {
        for p in self.params_mut() {
            p.value.mapv_inplace(|v| f64::from(v as f32));
        }
    }
}

impl SideModel {
    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.params().into_iter().map(NamedTensor::from_param).collect()
    }

    pub fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<(), ModelError> {
        load_into(self.params_mut(), tensors)
    }
}
