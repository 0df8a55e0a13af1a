//! Binary checkpoint format, little-endian:
//!
//! ```text
//! magic "SARECKPT" | u32 version | u32 header_len | header JSON
//! u32 n_params, then per parameter:
//!   u32 name_len | name | u8 partition | u32 rank | u32 extent × rank | f64 × numel
//! ```
//!
//! Values are stored as `f64`, which is exact for both `f32` and `f64` models.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{CaptionModel, LoraSpec, ModelDims, ModelError, ParamEntry, Partition};
use crate::autodiff::Tensor;
use crate::Scalar;

const MAGIC: &[u8; 8] = b"SARECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: ModelDims,
    lora: Option<LoraSpec>,
    meta: BTreeMap<String, String>,
}

fn io(e: std::io::Error) -> ModelError {
    ModelError::Checkpoint(e.to_string())
}

impl<T: Scalar> CaptionModel<T> {
    pub fn write_checkpoint(&self, meta: &BTreeMap<String, String>, mut w: impl Write) -> Result<(), ModelError> {
        let header = Header { dims: self.dims().clone(), lora: self.lora().cloned(), meta: meta.clone() };
        let header = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
        w.write_u32::<LittleEndian>(header.len() as u32).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        w.write_u32::<LittleEndian>(self.params().len() as u32).map_err(io)?;
        for p in self.params() {
            w.write_u32::<LittleEndian>(p.name.len() as u32).map_err(io)?;
            w.write_all(p.name.as_bytes()).map_err(io)?;
            w.write_u8(p.partition.code()).map_err(io)?;
            w.write_u32::<LittleEndian>(p.tensor.shape().len() as u32).map_err(io)?;
            for &d in p.tensor.shape() {
                w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
            }
            for &x in p.tensor.data() {
                w.write_f64::<LittleEndian>(x.to_f64_lossy()).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self, meta: &BTreeMap<String, String>) -> Result<Vec<u8>, ModelError> {
        let mut buf = Vec::new();
        self.write_checkpoint(meta, &mut buf)?;
        Ok(buf)
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<(Self, BTreeMap<String, String>), ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(ModelError::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header).map_err(io)?;
        let header: Header = serde_json::from_slice(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let n = r.read_u32::<LittleEndian>().map_err(io)?;
        let mut params = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
            let code = r.read_u8().map_err(io)?;
            let partition = Partition::from_code(code)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown partition code {code}")))?;
            let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()
                .map_err(io)?;
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| r.read_f64::<LittleEndian>().map(T::of))
                .collect::<Result<Vec<_>, _>>()
                .map_err(io)?;
            params.push(ParamEntry { name, partition, tensor: Tensor::new(shape, data)? });
        }
        let model = Self::from_parts(header.dims, params, header.lora)?;
        Ok((model, header.meta))
    }
}
