//! Parameter checkpoints: a metadata string plus named tensors, followed by
//! a SHA-256 of everything before it.
//!
//! Layout (little-endian): `b"BSAC"`, `u32` version, `u8` scalar width,
//! `u32` meta length, meta bytes, `u32` tensor count, then per tensor
//! `u32` name length, name, `u8` trainable, `u32` ndim, `u32` dims, values;
//! finally 32 checksum bytes.

use sha2::{Digest, Sha256};

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BSAC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor<T>,
}

pub fn encode<T: Real>(meta: &str, tensors: &[NamedTensor<T>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::BYTES as u8);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.trainable as u8);
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.tensor.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.tensor.cols as u32).to_le_bytes());
        for v in &t.tensor.data {
            v.put_le(&mut out);
        }
    }
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    out
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.b.len() {
            return Err(Error::Format {
                offset: self.at as u64,
                msg: format!("need {n} bytes, {} left", self.b.len() - self.at),
            });
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<(String, Vec<NamedTensor<T>>)> {
    if bytes.len() < 32 + 13 {
        return Err(Error::Format { offset: bytes.len() as u64, msg: "checkpoint too short".into() });
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::Format { offset: body.len() as u64, msg: "checksum mismatch".into() });
    }
    let mut r = Reader { b: body, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad checkpoint magic".into() });
    }
    let v = r.u32()?;
    if v != VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported checkpoint version {v}") });
    }
    let width = r.take(1)?[0] as usize;
    if width != T::BYTES {
        return Err(Error::Format {
            offset: 8,
            msg: format!("checkpoint holds {width}-byte scalars, expected {}", T::BYTES),
        });
    }
    let ml = r.u32()? as usize;
    let meta = String::from_utf8(r.take(ml)?.to_vec())
        .map_err(|_| Error::Format { offset: 13, msg: "metadata is not utf-8".into() })?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let nl = r.u32()? as usize;
        let at = r.at;
        let name = String::from_utf8(r.take(nl)?.to_vec())
            .map_err(|_| Error::Format { offset: at as u64, msg: "tensor name is not utf-8".into() })?;
        let trainable = r.take(1)?[0] != 0;
        let nd = r.u32()?;
        if nd != 2 {
            return Err(Error::Format { offset: (r.at - 4) as u64, msg: format!("expected 2 dims, got {nd}") });
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::get_le).collect();
        tensors.push(NamedTensor { name, trainable, tensor: Tensor { rows, cols, data } });
    }
    if r.at != body.len() {
        return Err(Error::Format { offset: r.at as u64, msg: "trailing bytes before checksum".into() });
    }
    Ok((meta, tensors))
}

/// Every parameter of `store`, in insertion order.
pub fn snapshot<T: Real>(store: &ParamStore<T>) -> Vec<NamedTensor<T>> {
    store
        .iter()
        .map(|(_, p)| NamedTensor { name: p.name.clone(), trainable: p.trainable, tensor: p.value.clone() })
        .collect()
}

/// Overwrites values of same-named parameters; shapes must match and every
/// parameter of `store` must be present.
pub fn restore<T: Real>(store: &mut ParamStore<T>, tensors: &[NamedTensor<T>]) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let t = tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{name}`")))?;
        let p = store.get_mut(id);
        if p.value.shape() != t.tensor.shape() {
            return Err(Error::Shape { op: "restore", left: p.value.shape(), right: t.tensor.shape() });
        }
        p.value = t.tensor.clone();
    }
    Ok(())
}
