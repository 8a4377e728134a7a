//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `magic[8] version:u32 dims:9*u64 modality_discs:u8 count:u32`, then per
//! tensor `name_len:u32 name ndim:u32 dims:ndim*u64 data:f64*`, then an
//! FNV-1a checksum of everything before it as `u64`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelBundle, ModelDims};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SEMICAP\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3))
}

fn dims_fields(d: &ModelDims) -> [usize; 9] {
    [d.feature_dim, d.hidden, d.latent, d.vocab, d.embed, d.dec_hidden, d.concept, d.disc_hidden, d.max_decode]
}

pub fn write_checkpoint(m: &ModelBundle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in dims_fields(&m.dims) {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.push(u8::from(m.has_modality_discriminators()));
    out.extend_from_slice(&(m.store.len() as u32).to_le_bytes());
    for (_, name, t) in m.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint { offset: self.pos, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v).ok().filter(|v| *v <= 1 << 32).ok_or(Error::Checkpoint { offset: at, msg: format!("{what} {v} too large") })
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelBundle> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint { offset: 0, msg: "not a checkpoint file".into() });
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint {
            offset: at,
            msg: format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        });
    }
    let mut f = [0usize; 9];
    for v in &mut f {
        *v = r.usize("dimension")?;
    }
    let dims = ModelDims {
        feature_dim: f[0],
        hidden: f[1],
        latent: f[2],
        vocab: f[3],
        embed: f[4],
        dec_hidden: f[5],
        concept: f[6],
        disc_hidden: f[7],
        max_decode: f[8],
    };
    let flag = r.take(1, "flags")?[0];
    if flag > 1 {
        return Err(Error::Checkpoint { offset: r.pos - 1, msg: format!("bad flag byte {flag}") });
    }
    let mut bundle = ModelBundle::new(dims, flag == 1, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Error::Checkpoint { offset: at, msg: e.to_string() })?;
    let at = r.pos;
    let count = r.u32("tensor count")? as usize;
    if count != bundle.store.len() {
        return Err(Error::Checkpoint { offset: at, msg: format!("{count} tensors, model has {}", bundle.store.len()) });
    }
    let ids: Vec<_> = bundle.store.ids().collect();
    for id in ids {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| Error::Checkpoint { offset: at, msg: "name is not utf-8".into() })?;
        if name != bundle.store.name(id) {
            return Err(Error::Checkpoint { offset: at, msg: format!("found tensor {name}, expected {}", bundle.store.name(id)) });
        }
        let at = r.pos;
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.usize("extent")?);
        }
        if shape != bundle.store.get(id).shape() {
            return Err(Error::Checkpoint { offset: at, msg: format!("tensor {name} has shape {shape:?}") });
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8, "tensor data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        *bundle.store.get_mut(id) = Tensor::new(shape, data)?;
    }
    let body_end = r.pos;
    let sum = r.u64("checksum")?;
    if sum != fnv1a(&bytes[..body_end]) {
        return Err(Error::Checkpoint { offset: body_end, msg: "checksum mismatch".into() });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint { offset: r.pos, msg: "trailing bytes".into() });
    }
    Ok(bundle)
}

pub fn save_checkpoint(m: &ModelBundle, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(m))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    read_checkpoint(&fs::read(path)?)
}
