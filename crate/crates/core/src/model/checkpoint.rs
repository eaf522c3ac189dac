//! Binary checkpoint files: a versioned header with the model config and
//! vocabulary hash, followed by named raw parameter tensors.

use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PDEC";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint stores {found}-byte floats, expected {expected}")]
    WidthMismatch { found: u8, expected: u8 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] super::ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    if bytes.len() > u16::MAX as usize {
        panic!("checkpoint string field too long");
    }
    out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Malformed("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str_field(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CheckpointError::Malformed("non-utf8 string field".into()))
    }
}

/// Serialize `model` (and the hash of the vocabulary it was trained with)
/// to `path`.
pub fn save<T: Scalar>(model: &Model<T>, vocab_hash: &str, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(T::BYTE_WIDTH);
    let config_json = serde_json::to_vec(&model.config)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    put_u32(&mut out, config_json.len() as u32);
    out.extend_from_slice(&config_json);
    put_bytes(&mut out, vocab_hash.as_bytes());
    put_u32(&mut out, model.store().len() as u32);
    for (name, tensor) in model.store().iter() {
        put_bytes(&mut out, name.as_bytes());
        out.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            put_u32(&mut out, dim as u32);
        }
        put_u32(&mut out, tensor.len() as u32);
        for &x in tensor.data() {
            x.write_le(&mut out);
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Load a checkpoint saved by [`save`]. Returns the model and the vocab
/// hash recorded at save time.
pub fn load<T: Scalar>(path: &Path) -> Result<(Model<T>, String)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let width = r.u8()?;
    if width != T::BYTE_WIDTH {
        return Err(CheckpointError::WidthMismatch {
            found: width,
            expected: T::BYTE_WIDTH,
        });
    }
    let config_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| CheckpointError::Malformed(format!("bad config header: {e}")))?;
    let vocab_hash = r.str_field()?;

    let mut model = Model::<T>::new(config, 0)?;
    let count = r.u32()? as usize;
    if count != model.store().len() {
        return Err(CheckpointError::Malformed(format!(
            "checkpoint has {count} tensors, config implies {}",
            model.store().len()
        )));
    }
    for _ in 0..count {
        let name = r.str_field()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let elems = r.u32()? as usize;
        let width = T::BYTE_WIDTH as usize;
        let raw = r.take(elems * width)?;
        let data: Vec<T> = raw.chunks_exact(width).map(T::read_le).collect();
        let tensor = Tensor::new(data, shape)
            .map_err(|e| CheckpointError::Malformed(format!("tensor `{name}`: {e}")))?;
        let slot = model
            .store()
            .slot_by_name(&name)
            .ok_or_else(|| CheckpointError::Malformed(format!("unknown tensor `{name}`")))?;
        if model.store().value(slot).shape() != tensor.shape() {
            return Err(CheckpointError::Malformed(format!(
                "tensor `{name}` shape {:?} does not match config shape {:?}",
                tensor.shape(),
                model.store().value(slot).shape()
            )));
        }
        *model.store_mut().value_mut(slot) = tensor;
    }
    Ok((model, vocab_hash))
}
