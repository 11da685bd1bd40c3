//! Binary checkpoints: versioned, self-describing, bit-exact. Layout:
//! magic, format version, step counter, scalar width, the config snapshot
//! as TOML text, then each parameter as (name, shape, values, momentum),
//! all integers and scalars little-endian.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Array, Dtype, ParamStore, Scalar};

const MAGIC: &[u8; 4] = b"TPRC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    BadVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint scalar width {got} does not match requested precision {want}")]
    DtypeMismatch { got: u8, want: u8 },
    #[error("parameter mismatch at `{name}`: {reason}")]
    ParamMismatch { name: String, reason: String },
}

pub struct Checkpoint<F: Scalar> {
    pub config_toml: String,
    pub step: u64,
    pub entries: Vec<(String, Array<F>, Array<F>)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

fn put_array<F: Scalar>(out: &mut Vec<u8>, a: &Array<F>) {
    put_u32(out, a.shape().len() as u32);
    for &d in a.shape() {
        put_u32(out, d as u32);
    }
    for &v in a.data() {
        v.write_le(out);
    }
}

pub fn save<F: Scalar>(
    path: &Path,
    store: &ParamStore<F>,
    config_toml: &str,
    step: u64,
) -> Result<(), CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&step.to_le_bytes());
    out.push(F::DTYPE.width() as u8);
    put_bytes(&mut out, config_toml.as_bytes());
    put_u32(&mut out, store.len() as u32);
    for id in store.ids() {
        put_bytes(&mut out, store.name(id).as_bytes());
        put_array(&mut out, store.get(id));
        put_array(&mut out, store.momentum(id));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn array<F: Scalar>(&mut self, what: &'static str) -> Result<Array<F>, CheckpointError> {
        let ndim = self.u32(what)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32(what)? as usize);
        }
        let numel: usize = shape.iter().product();
        let width = F::DTYPE.width();
        let raw = self.take(numel * width, what)?;
        let data = raw.chunks_exact(width).map(F::read_le).collect();
        Array::new(shape, data)
            .map_err(|_| CheckpointError::Truncated(what))
    }
}

pub fn load<F: Scalar>(path: &Path) -> Result<Checkpoint<F>, CheckpointError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let step = u64::from_le_bytes(c.take(8, "step")?.try_into().unwrap());
    let width = c.take(1, "dtype")?[0];
    if width as usize != F::DTYPE.width() {
        return Err(CheckpointError::DtypeMismatch {
            got: width,
            want: F::DTYPE.width() as u8,
        });
    }
    let cfg_len = c.u32("config")? as usize;
    let config_toml = String::from_utf8(c.take(cfg_len, "config")?.to_vec())
        .map_err(|_| CheckpointError::Truncated("config"))?;
    let count = c.u32("param count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32("param name")? as usize;
        let name = String::from_utf8(c.take(name_len, "param name")?.to_vec())
            .map_err(|_| CheckpointError::Truncated("param name"))?;
        let values = c.array("param values")?;
        let momentum = c.array("momentum")?;
        entries.push((name, values, momentum));
    }
    Ok(Checkpoint {
        config_toml,
        step,
        entries,
    })
}

/// Copy checkpoint entries into a store built from the same config. Every
/// name and shape must match pairwise, in order; the first discrepancy is
/// reported by parameter name.
pub fn install<F: Scalar>(
    store: &mut ParamStore<F>,
    ckpt: &Checkpoint<F>,
) -> Result<(), CheckpointError> {
    if ckpt.entries.len() != store.len() {
        return Err(CheckpointError::ParamMismatch {
            name: "<count>".into(),
            reason: format!(
                "checkpoint has {} parameters, model has {}",
                ckpt.entries.len(),
                store.len()
            ),
        });
    }
    for (id, (name, values, momentum)) in store.ids().zip(&ckpt.entries) {
        if store.name(id) != name {
            return Err(CheckpointError::ParamMismatch {
                name: name.clone(),
                reason: format!("model expects `{}` at this position", store.name(id)),
            });
        }
        if store.get(id).shape() != values.shape() {
            return Err(CheckpointError::ParamMismatch {
                name: name.clone(),
                reason: format!(
                    "shape {:?} in checkpoint, {:?} in model",
                    values.shape(),
                    store.get(id).shape()
                ),
            });
        }
        *store.get_mut(id) = values.clone();
        *store.momentum_mut(id) = momentum.clone();
    }
    Ok(())
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}
