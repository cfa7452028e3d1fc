//! Binary training checkpoints.
//!
//! Layout (little-endian): magic, format version, scalar width, crc32 digest of
//! the configuration text, the configuration text itself, epoch, step, seed,
//! the named parameter table, the momentum buffers, and a trailing crc32 over
//! every preceding byte. Data-pipeline randomness is derived from
//! `(seed, epoch, index)`, so seed and epoch are the whole RNG state.

use std::fs;
use std::path::Path;

use crate::error::{DipError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DIPCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// Serialized run configuration.
    pub config: String,
    pub params: Vec<(String, Tensor<T>)>,
    pub velocity: Vec<Tensor<T>>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
}

pub fn config_digest(config: &str) -> u32 {
    crc32fast::hash(config.as_bytes())
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<T: Scalar>(buf: &mut Vec<u8>, t: &Tensor<T>) {
    put_u32(buf, t.rank() as u32);
    for &d in t.shape() {
        put_u64(buf, d as u64);
    }
    for &v in t.data() {
        v.write_le(buf);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DipError::Corrupted(format!("unexpected end of data at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| DipError::Corrupted("length overflow".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| DipError::Corrupted("non-UTF-8 text".into()))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| DipError::Corrupted("tensor size overflow".into()))?;
        let width = T::BITS as usize / 8;
        let raw = self.take(n.checked_mul(width).ok_or_else(|| DipError::Corrupted("tensor size overflow".into()))?)?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        Tensor::new(&shape, data)
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        put_u32(&mut buf, T::BITS);
        put_u32(&mut buf, config_digest(&self.config));
        put_u64(&mut buf, self.config.len() as u64);
        buf.extend_from_slice(self.config.as_bytes());
        put_u64(&mut buf, self.epoch as u64);
        put_u64(&mut buf, self.step as u64);
        put_u64(&mut buf, self.seed);
        put_u64(&mut buf, self.params.len() as u64);
        for (name, t) in &self.params {
            put_u64(&mut buf, name.len() as u64);
            buf.extend_from_slice(name.as_bytes());
            put_tensor(&mut buf, t);
        }
        put_u64(&mut buf, self.velocity.len() as u64);
        for t in &self.velocity {
            put_tensor(&mut buf, t);
        }
        let crc = crc32fast::hash(&buf);
        put_u32(&mut buf, crc);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 {
            return Err(DipError::Corrupted("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if &body[..MAGIC.len()] != MAGIC {
            return Err(DipError::Corrupted("bad magic".into()));
        }
        if crc32fast::hash(body) != stored {
            return Err(DipError::Corrupted("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(DipError::VersionMismatch { found: version, expected: VERSION });
        }
        let bits = r.u32()?;
        if bits != T::BITS {
            return Err(DipError::ConfigMismatch(format!("checkpoint holds {bits}-bit scalars, expected {}", T::BITS)));
        }
        let digest = r.u32()?;
        let config = r.string()?;
        if config_digest(&config) != digest {
            return Err(DipError::Corrupted("configuration digest mismatch".into()));
        }
        let epoch = r.len()?;
        let step = r.len()?;
        let seed = r.u64()?;
        let n = r.len()?;
        let mut params = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            params.push((name, r.tensor()?));
        }
        let n = r.len()?;
        let velocity = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        if r.pos != body.len() {
            return Err(DipError::Corrupted(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint { config, params, velocity, epoch, step, seed })
    }

    /// Writes through a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
