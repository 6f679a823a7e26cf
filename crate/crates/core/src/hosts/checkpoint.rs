//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic "MHEXCKPT" | version u32 | config_len u64 | config text (utf-8)
//! tensor_count u64 | per tensor: name_len u64, name, rank u64, dims u64 * rank
//! raw f64 data of every tensor, in declaration order
//! ```

use std::fs;
use std::path::Path;

use crate::config::KvConfig;
use crate::error::{CheckpointError, Error, Result};

use super::{Model, ParamSet};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MHEXCKPT";

/// Serializes a config and its parameters.
pub fn encode_checkpoint(config: &KvConfig, params: &ParamSet) -> Vec<u8> {
    let text = config.to_text();
    let mut out = Vec::with_capacity(64 + text.len() + params.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        let v = self.u64(what)?;
        // a length larger than what is left can only come from a damaged file
        if v > self.buf.len() as u64 * 8 + 64 {
            return Err(CheckpointError::Truncated(what));
        }
        Ok(v as usize)
    }
}

/// Parses a checkpoint, rebuilding the model its config describes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes };
    let magic = r
        .take(MAGIC.len(), "magic")
        .map_err(|_| CheckpointError::BadMagic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    let n = r.len("config length")?;
    let text = std::str::from_utf8(r.take(n, "config")?)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let config = KvConfig::parse(text).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut model =
        Model::from_config(&config).map_err(|e| CheckpointError::Config(e.to_string()))?;

    let count = r.len("tensor count")?;
    let expected = model.params().len();
    if count != expected {
        return Err(CheckpointError::TensorCount {
            found: count,
            expected,
        }
        .into());
    }
    for i in 0..count {
        let n = r.len("tensor name")?;
        let name = String::from_utf8_lossy(r.take(n, "tensor name")?).into_owned();
        let rank = r.len("tensor rank")?;
        let dims = (0..rank)
            .map(|_| r.u64("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let want_name = &model.params().names()[i];
        let want_shape = model.params().tensors()[i].shape();
        if &name != want_name || dims != want_shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                found: dims,
                expected: want_shape.to_vec(),
            }
            .into());
        }
    }
    for t in model.params_mut().tensors_mut() {
        let raw = r.take(t.numel() * 8, "tensor data")?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if !r.buf.is_empty() {
        return Err(CheckpointError::Config(format!("{} trailing bytes", r.buf.len())).into());
    }
    Ok(model)
}

pub fn save_checkpoint(config: &KvConfig, params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(config, params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
