//! Binary checkpoint: `RENETCK1`, a `u32` format version, a length-prefixed
//! JSON header, then named arrays as `f64` values. All integers and floats
//! are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"RENETCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub init: String,
    pub num_entities: usize,
    pub num_relations: usize,
    pub arrays: usize,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        init: "xavier_uniform".into(),
        num_entities: model.num_entities,
        num_relations: model.num_relations,
        arrays: model.store.len(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(64 + json.len() + model.store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    for (_, name, t) in model.store.iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)?;
    let mut model = Model::new(header.config, header.num_entities, header.num_relations)?;
    if header.arrays != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} arrays, header lists {}",
            model.store.len(),
            header.arrays
        )));
    }
    for _ in 0..header.arrays {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("array name is not utf-8".into()))?
            .to_string();
        let ndims = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown array `{name}`")))?;
        model
            .store
            .set(id, Tensor::new(shape, data)?)
            .map_err(|e| Error::Checkpoint(format!("array `{name}`: {e}")))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last array".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
