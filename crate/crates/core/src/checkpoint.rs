//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! ```text
//! magic "GAUN" (4 bytes)
//! format version      u32
//! tensor count        u32
//! per tensor:
//!   name length       u32
//!   name              UTF-8 bytes
//!   rank              u32
//!   dims              u32 x rank
//!   values            f32 (IEEE-754 LE) x product(dims)
//! config JSON length  u32
//! config JSON         UTF-8 bytes
//! training step       u64
//! ```
//! Round-trips are bitwise: values are stored verbatim as f32 bit patterns.

use std::fs;
use std::path::Path;

use crate::error::CheckpointError;
use crate::model::RunConfig;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"GAUN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub config: RunConfig,
    pub step: u64,
}

pub fn save_checkpoint(
    params: &ParamSet<f32>,
    config: &RunConfig,
    step: u64,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, tensor) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let config_json = serde_json::to_string(config).map_err(|e| CheckpointError::Config(e.to_string()))?;
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_json.as_bytes());
    buf.extend_from_slice(&step.to_le_bytes());
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated {
                context: context.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, context: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, context: &str) -> Result<u64, CheckpointError> {
        let b = self.take(8, context)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32(&format!("name length of tensor {i}"))? as usize;
        let name_bytes = r.take(name_len, &format!("name of tensor {i}"))?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| CheckpointError::Config(format!("tensor {i} name is not UTF-8")))?;
        let rank = r.u32(&format!("rank of tensor {name:?}"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&format!("dims of tensor {name:?}"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, &format!("payload of tensor {name:?}"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape.clone(), data).map_err(|_| CheckpointError::ShapeMismatch {
            name: name.clone(),
            stored: shape,
            expected: vec![],
        })?;
        tensors.push((name, tensor));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_bytes = r.take(cfg_len, "config JSON")?;
    let config: RunConfig = serde_json::from_slice(cfg_bytes)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let step = r.u64("training step")?;
    Ok(Checkpoint {
        tensors,
        config,
        step,
    })
}
