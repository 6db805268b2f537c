//! Named-parameter checkpoints and the HKTW v1 on-disk format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "HKTW" | version u32 = 1 | meta_len u32 | meta (UTF-8 JSON)
//! tensor_count u32
//! per tensor: name_len u16 | name | dtype u8 (1 = f32) | ndim u8 | dims u32 x ndim | f32 data
//! CRC32 (IEEE) over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HKTW";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

/// Parameters whose names start with this prefix form the classification head.
pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch_id: String,
    pub class_count: usize,
    pub params: IndexMap<String, Tensor<f32>>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct MetaHeader {
    arch_id: String,
    class_count: usize,
    #[serde(flatten)]
    meta: BTreeMap<String, String>,
}

pub fn is_head(name: &str) -> bool {
    name.starts_with(HEAD_PREFIX)
}

impl Checkpoint {
    pub fn new(arch_id: impl Into<String>, class_count: usize) -> Self {
        Self {
            arch_id: arch_id.into(),
            class_count,
            params: IndexMap::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Shape(format!("checkpoint has no parameter `{name}`")))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// First parameter holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(name) = self.first_non_finite() {
            return Err(Error::NonFiniteParameter(name.to_string()));
        }
        if self.class_count == 0 {
            return Err(Error::InvalidArgument("class_count must be positive".into()));
        }
        let header = MetaHeader {
            arch_id: self.arch_id.clone(),
            class_count: self.class_count,
            meta: self.meta.clone(),
        };
        let meta = serde_json::to_vec(&header)?;

        let mut out = Vec::with_capacity(16 + meta.len() + 4 * self.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(meta.len(), "meta")?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&len_u32(self.params.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.params {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidArgument(format!("layer name too long: {name}")))?;
            let ndim = u8::try_from(t.rank())
                .map_err(|_| Error::InvalidArgument(format!("too many dims in {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(ndim);
            for &d in t.dims() {
                out.extend_from_slice(&len_u32(d, name)?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 12 {
            return Err(Error::Truncated(format!("{} bytes", bytes.len())));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            // A body whose declared structure overruns the file was cut short;
            // anything else is corruption.
            if let Err(Error::Truncated(why)) = parse_body(bytes) {
                return Err(Error::Truncated(why));
            }
            return Err(Error::CrcMismatch { stored, computed });
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let ckpt = parse_body(body)?;
        if let Some(name) = ckpt.first_non_finite() {
            return Err(Error::NonFiniteParameter(name.to_string()));
        }
        Ok(ckpt)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} exceeds u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Truncated(format!("while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses magic..last tensor. `body` excludes the CRC trailer.
fn parse_body(body: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: body, pos: 8 };
    let meta_len = r.u32("meta length")? as usize;
    let meta_bytes = r.take(meta_len, "meta")?;
    let header: MetaHeader = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Malformed(format!("meta JSON: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut params = IndexMap::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Malformed("layer name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Malformed(format!("unsupported dtype {dtype} in {name}")));
        }
        let ndim = r.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dims")? as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Malformed(format!("dims overflow in {name}")))?;
        let raw = r.take(len, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Malformed(format!("{name}: {e}")))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::Malformed(format!("duplicate layer name {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after last tensor",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        arch_id: header.arch_id,
        class_count: header.class_count,
        params,
        meta: header.meta,
    })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    write_atomic(path, &bytes)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Checks that two checkpoints share one architecture.
///
/// With `allow_head_mismatch`, layers under [`HEAD_PREFIX`] may differ in dims
/// (and the class counts may differ); every other layer must match exactly.
pub fn assert_compatible(a: &Checkpoint, b: &Checkpoint, allow_head_mismatch: bool) -> Result<()> {
    if a.arch_id != b.arch_id {
        return Err(Error::Incompatible {
            layer: "<arch_id>".into(),
            reason: format!("`{}` vs `{}`", a.arch_id, b.arch_id),
        });
    }
    if a.class_count != b.class_count && !allow_head_mismatch {
        return Err(Error::Incompatible {
            layer: "<class_count>".into(),
            reason: format!("{} vs {}", a.class_count, b.class_count),
        });
    }
    for (name, ta) in &a.params {
        let Some(tb) = b.params.get(name) else {
            return Err(Error::Incompatible {
                layer: name.clone(),
                reason: "missing from second checkpoint".into(),
            });
        };
        if ta.dims() != tb.dims() && !(allow_head_mismatch && is_head(name)) {
            return Err(Error::Incompatible {
                layer: name.clone(),
                reason: format!("dims {:?} vs {:?}", ta.dims(), tb.dims()),
            });
        }
    }
    if let Some(extra) = b.params.keys().find(|n| !a.params.contains_key(*n)) {
        return Err(Error::Incompatible {
            layer: extra.clone(),
            reason: "missing from first checkpoint".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("toy", 3);
        c.params.insert(
            "conv.weight".into(),
            Tensor::new(vec![1, 1, 2, 2], vec![0.5, -1.25, 3.0, f32::MIN_POSITIVE]).unwrap(),
        );
        c.params.insert("head.weight".into(), Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap());
        c.params.insert("head.bias".into(), Tensor::new(vec![3], vec![-0.0, 0.0, 1e-30]).unwrap());
        c.meta.insert("source".into(), "ADP".into());
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.arch_id, c.arch_id);
        assert_eq!(back.meta, c.meta);
        for (n, t) in &c.params {
            assert!(back.params[n].bit_eq(t), "{n}");
        }
        assert_eq!(back.params.keys().collect::<Vec<_>>(), c.params.keys().collect::<Vec<_>>());
    }

    #[test]
    fn refuses_nan() {
        let mut c = sample();
        c.params["head.weight"].data_mut()[2] = f32::NAN;
        let err = c.to_bytes().unwrap_err();
        assert!(err.to_string().contains("non-finite parameter"), "{err}");
    }

    #[test]
    fn empty_and_short_files() {
        assert!(matches!(Checkpoint::from_bytes(&[]), Err(Error::BadMagic)));
        assert!(matches!(Checkpoint::from_bytes(b"HKT"), Err(Error::BadMagic)));
        assert!(matches!(Checkpoint::from_bytes(b"HKTW\x01\0\0\0"), Err(Error::Truncated(_))));
    }

    #[test]
    fn flipped_payload_byte_is_crc_mismatch() {
        let mut bytes = sample().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 6] ^= 0x01; // inside the last tensor's data
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CrcMismatch { .. })));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = sample().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 9];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::Truncated(_))));
    }

    #[test]
    fn version_checked() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn compatibility_rules() {
        let a = sample();
        assert_compatible(&a, &a, false).unwrap();

        let mut b = a.clone();
        b.params["conv.weight"] = Tensor::new(vec![1, 1, 4, 1], vec![0.0; 4]).unwrap();
        let err = assert_compatible(&a, &b, true).unwrap_err();
        assert!(err.to_string().contains("conv.weight"), "{err}");

        let mut c = a.clone();
        c.arch_id = "other".into();
        assert!(assert_compatible(&a, &c, true).is_err());

        let mut d = a.clone();
        d.class_count = 5;
        d.params["head.weight"] = Tensor::new(vec![5, 2], vec![0.0; 10]).unwrap();
        d.params["head.bias"] = Tensor::new(vec![5], vec![0.0; 5]).unwrap();
        assert!(assert_compatible(&a, &d, false).is_err());
        assert_compatible(&a, &d, true).unwrap();
    }
}
