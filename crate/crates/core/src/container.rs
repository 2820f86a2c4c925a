//! Versioned binary container shared by datasets and checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "PHASEKD\0"
//! version      u32
//! config       32 bytes SHA-256 of the producing configuration
//! meta_len     u32, then meta_len bytes of JSON metadata
//! n_blocks     u32
//! per block:   u32 name_len, name, u8 dtype (0 = f64, 1 = u32), u8 rank,
//!              rank x u64 dims, payload
//! checksum     32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PHASEKD\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum BlockData {
    F64(Tensor),
    U32 { shape: Vec<usize>, data: Vec<u32> },
}

impl BlockData {
    fn tag(&self) -> u8 {
        match self {
            BlockData::F64(_) => 0,
            BlockData::U32 { .. } => 1,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            BlockData::F64(t) => t.shape(),
            BlockData::U32 { shape, .. } => shape,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config_digest: [u8; 32],
    pub metadata: String,
    pub blocks: Vec<(String, BlockData)>,
}

impl Container {
    pub fn new(config_digest: [u8; 32], metadata: String) -> Self {
        Self { config_digest, metadata, blocks: Vec::new() }
    }

    pub fn push_f64(&mut self, name: impl Into<String>, t: Tensor) {
        self.blocks.push((name.into(), BlockData::F64(t)));
    }

    pub fn push_u32(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<u32>) {
        self.blocks.push((name.into(), BlockData::U32 { shape, data }));
    }

    pub fn get(&self, name: &str) -> Result<&BlockData> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::Format(format!("missing block `{name}`")))
    }

    pub fn f64(&self, name: &str) -> Result<&Tensor> {
        match self.get(name)? {
            BlockData::F64(t) => Ok(t),
            _ => Err(Error::Format(format!("block `{name}` is not f64"))),
        }
    }

    pub fn u32(&self, name: &str) -> Result<&[u32]> {
        match self.get(name)? {
            BlockData::U32 { data, .. } => Ok(data),
            _ => Err(Error::Format(format!("block `{name}` is not u32"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, block) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(block.tag());
            out.push(block.shape().len() as u8);
            for d in block.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match block {
                BlockData::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                BlockData::U32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let checksum = Sha256::digest(&out);
        out.extend_from_slice(&checksum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic; not a phasekd container".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let (body, checksum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != checksum {
            return Err(Error::Format("checksum mismatch; file is truncated or corrupt".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let config_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let meta_len = r.u32()? as usize;
        let metadata =
            String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let n_blocks = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n_blocks.min(1 << 16));
        for _ in 0..n_blocks {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("block name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("block `{name}` size overflows")))?;
            let block = match tag {
                0 => {
                    let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                    BlockData::F64(Tensor::new(shape, data).map_err(|e| Error::Format(format!("block `{name}`: {e}")))?)
                }
                1 => {
                    let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
                    let data = raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4"))).collect();
                    BlockData::U32 { shape, data }
                }
                t => return Err(Error::Format(format!("block `{name}` has unknown dtype tag {t}"))),
            };
            blocks.push((name, block));
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes after last block", body.len() - r.pos)));
        }
        Ok(Self { config_digest, metadata, blocks })
    }

    /// Writes through a sibling temporary file so readers never see a
    /// partial container.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// SHA-256 of arbitrary bytes as a fixed array.
pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(sha256(b"cfg"), r#"{"k":1}"#.into());
        c.push_f64("w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, f64::MIN_POSITIVE, 1e300, -0.0]).unwrap());
        c.push_u32("labels", vec![4], vec![0, 6, 3, 1]);
        c
    }

    #[test]
    fn round_trip_is_lossless() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.f64("w").unwrap().data()[5].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.u32("labels").unwrap(), &[0, 6, 3, 1]);
        assert!(back.f64("labels").is_err());
        assert!(back.get("missing").is_err());
    }

    #[test]
    fn truncation_and_corruption_are_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(Container::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[60] ^= 1;
        assert!(matches!(Container::from_bytes(&flipped), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Version { found: 2, expected: 1 })));
    }
}
