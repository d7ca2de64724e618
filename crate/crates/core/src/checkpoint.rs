//! `FVT1` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FVT1" | u32 version=1 | u32 count
//! per tensor, in lexicographic name order:
//!   u16 name_len | name (UTF-8) | u8 role | u8 rank | rank × u32 dim
//!   | numel × f32 payload | u32 CRC32(payload)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::partition::{ParamRole, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FVT1";
pub const VERSION: u32 = 1;

/// A decoded checkpoint. Tensors whose stored CRC did not match their payload
/// are listed in `checksum_failures`; their values are kept as read.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub checksum_failures: Vec<String>,
}

impl Checkpoint {
    pub fn is_intact(&self) -> bool {
        self.checksum_failures.is_empty()
    }

    /// The store, or the first checksum failure.
    pub fn verified(self) -> Result<ParamStore> {
        match self.checksum_failures.into_iter().next() {
            Some(name) => Err(Error::Checksum(name)),
            None => Ok(self.store),
        }
    }
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + store.numel(None) * 4 + store.len() * 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.role.as_byte());
        out.push(p.tensor.rank() as u8);
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let start = out.len();
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected FVT1".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    let mut failures = Vec::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: at + 2,
                msg: "name is not UTF-8".into(),
            })?
            .to_string();
        if let Some(p) = &prev {
            if *p == name {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("duplicate tensor name `{name}`"),
                });
            }
            if *p > name {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("tensor `{name}` out of lexicographic order"),
                });
            }
        }
        let role_at = r.pos;
        let role = ParamRole::from_byte(r.u8("role")?).ok_or_else(|| Error::Format {
            offset: role_at,
            msg: "invalid role byte".into(),
        })?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::Format {
                offset: r.pos,
                msg: format!("shape {shape:?} overflows"),
            })?;
        let payload = r.take(numel * 4, "payload")?;
        let crc = r.u32("checksum")?;
        if crc32fast::hash(payload) != crc {
            failures.push(name.clone());
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format {
            offset: at,
            msg: e.to_string(),
        })?;
        store.insert(name.clone(), tensor, role)?;
        prev = Some(name);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(Checkpoint {
        store,
        checksum_failures: failures,
    })
}

pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::vector(vec![1.5, -0.0, f32::MIN_POSITIVE]), ParamRole::Personalized)
            .unwrap();
        s.insert("a", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), ParamRole::Shared)
            .unwrap();
        s.insert("c", Tensor::scalar(7.0), ParamRole::Shared).unwrap();
        s
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let s = sample();
        let bytes = encode(&s);
        let loaded = decode(&bytes).unwrap();
        assert!(loaded.is_intact());
        assert_eq!(loaded.store, s);
        assert_eq!(encode(&loaded.store), bytes);
    }

    #[test]
    fn empty_store_is_header_only() {
        let bytes = encode(&ParamStore::new());
        assert_eq!(bytes, b"FVT1\x01\0\0\0\0\0\0\0");
        assert!(decode(&bytes).unwrap().store.is_empty());
    }

    #[test]
    fn hand_built_layout() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![1.0]), ParamRole::Personalized).unwrap();
        let bytes = encode(&s);
        let mut want = b"FVT1".to_vec();
        want.extend([1, 0, 0, 0, 1, 0, 0, 0]);
        want.extend([1, 0, b'w', 1, 1, 1, 0, 0, 0]);
        want.extend(1.0f32.to_le_bytes());
        want.extend(crc32fast::hash(&1.0f32.to_le_bytes()).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn payload_corruption_reports_checksum() {
        let s = sample();
        let mut bytes = encode(&s);
        // Last 4 bytes are the CRC of "c"; the 4 before it are its payload.
        let n = bytes.len();
        bytes[n - 6] ^= 0x10;
        let loaded = decode(&bytes).unwrap();
        assert_eq!(loaded.checksum_failures, vec!["c".to_string()]);
        assert!(matches!(loaded.verified(), Err(Error::Checksum(n)) if n == "c"));
    }

    #[test]
    fn structural_errors() {
        let bytes = encode(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 4, .. })));

        for cut in [3, 11, 14, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Format { .. })));
    }

    #[test]
    fn duplicate_and_unsorted_names_rejected() {
        let mut one = ParamStore::new();
        one.insert("x", Tensor::scalar(1.0), ParamRole::Shared).unwrap();
        let rec = encode(&one)[12..].to_vec();
        let mut dup = b"FVT1\x01\0\0\0\x02\0\0\0".to_vec();
        dup.extend(&rec);
        dup.extend(&rec);
        let err = decode(&dup).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");

        let mut two = ParamStore::new();
        two.insert("y", Tensor::scalar(1.0), ParamRole::Shared).unwrap();
        let rec_y = encode(&two)[12..].to_vec();
        let mut unsorted = b"FVT1\x01\0\0\0\x02\0\0\0".to_vec();
        unsorted.extend(&rec_y);
        unsorted.extend(&rec);
        assert!(decode(&unsorted).unwrap_err().to_string().contains("order"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fvt");
        save_checkpoint(&sample(), &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load_checkpoint(&path).unwrap().verified().unwrap();
        save_checkpoint(&loaded, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
