//! `ZOOC` checkpoint files.
//!
//! Layout (little-endian): magic `ZOOC`, `u32` version, `u32` metadata
//! count then per entry `u32` length + UTF-8 key and `u32` length + UTF-8
//! value, `u32` tensor count then per tensor `u16` length + UTF-8 name,
//! `u8` dtype (0 single, 1 double), `u8` rank, `u32` per dimension, and the
//! raw values.

use std::path::Path;

use zootune_core::backbone::BackboneConfig;
use zootune_core::checkpoint::{AnyTensor, Checkpoint, CHECKPOINT_VERSION};
use zootune_core::{DType, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ZOOC";

fn put_str32(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    if let Some(d) = ck.duplicate_name() {
        return Err(Error::Integrity(format!("duplicate tensor `{d}`")));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ck.metadata.len() as u32).to_le_bytes());
    for (k, v) in &ck.metadata {
        put_str32(&mut out, k);
        put_str32(&mut out, v);
    }
    out.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ck.tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Format(format!("rank too large: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype().code());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension too large: {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match t {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
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
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::Length { offset: self.pos, needed: n, available });
        }
        self.pos += n;
        Ok(&self.buf[self.pos - n..self.pos])
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let at = self.pos;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format(format!("invalid UTF-8 at offset {at}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.array::<4>()?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut ck = Checkpoint::new();
    for _ in 0..r.u32()? {
        let kl = r.u32()? as usize;
        let k = r.string(kl)?;
        let vl = r.u32()? as usize;
        let v = r.string(vl)?;
        ck.metadata.push((k, v));
    }
    for _ in 0..r.u32()? {
        let nl = r.u16()? as usize;
        let name = r.string(nl)?;
        let code = r.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("tensor `{name}`: unknown dtype {code}")))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::Format(format!("tensor `{name}`: size overflow")))?;
        let raw = r.take(n)?;
        let bad = |e: zootune_core::Error| Error::Format(format!("tensor `{name}`: {e}"));
        let t = match dtype {
            DType::F32 => AnyTensor::F32(
                Tensor::new(&shape, raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
                    .map_err(bad)?,
            ),
            DType::F64 => AnyTensor::F64(
                Tensor::new(&shape, raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
                    .map_err(bad)?,
            ),
        };
        if ck.get(&name).is_some() {
            return Err(Error::Integrity(format!("duplicate tensor `{name}`")));
        }
        ck.tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    check_digest(&ck)?;
    Ok(ck)
}

/// A recorded backbone digest must agree with the recorded configuration.
pub fn check_digest(ck: &Checkpoint) -> Result<()> {
    if let (Some(cfg), Some(digest)) = (ck.meta("config"), ck.meta("backbone_digest")) {
        let cfg = BackboneConfig::decode(cfg).map_err(|e| Error::Integrity(format!("stored config: {e}")))?;
        if cfg.digest() != digest {
            return Err(Error::Integrity(format!("digest {digest} does not match stored config ({})", cfg.digest())));
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    crate::atomic::write_atomic(path, &encode(ck)?)
}
