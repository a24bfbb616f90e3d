//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//! `b"GRCNCKPT"`, `u32` version, `u32` entry count, then per entry
//! `u32` name length, UTF-8 name, `u64` rows, `u64` cols, `rows*cols` `f64` values.
//! Names prefixed `revision.` or `classification.` are parameters; the
//! Fast-GRCN support is stored as a `P x 2` index matrix plus a `1 x 1` node count.

use std::fs;
use std::path::Path;

use crate::autodiff::DenseMatrix;
use crate::error::{Error, Result};
use crate::models::{ParamGroup, ParamSet};
use crate::revision::IndexCache;

pub const MAGIC: &[u8; 8] = b"GRCNCKPT";
pub const VERSION: u32 = 1;
pub const INDEX_CACHE_ENTRY: &str = "fast_grcn.index_cache";
pub const NODE_COUNT_ENTRY: &str = "fast_grcn.node_count";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub index_cache: Option<IndexCache>,
}

impl Checkpoint {
    pub fn new(params: ParamSet, index_cache: Option<IndexCache>) -> Self {
        Self { params, index_cache }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(&str, DenseMatrix)> =
            self.params.iter().map(|p| (p.name.as_str(), p.value.clone())).collect();
        if let Some(cache) = &self.index_cache {
            let data = cache.pairs().iter().flat_map(|&(i, j)| [i as f64, j as f64]).collect();
            let pairs = DenseMatrix::from_vec(cache.pairs().len(), 2, data).expect("pairs are P x 2");
            entries.push((INDEX_CACHE_ENTRY, pairs));
            entries.push((NODE_COUNT_ENTRY, DenseMatrix::filled(1, 1, cache.node_count() as f64)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, m) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut params = ParamSet::new();
        let mut pairs = None;
        let mut node_count = None;
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let total = rows
                .checked_mul(cols)
                .filter(|t| t.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("entry {name} is truncated")))?;
            let data = (0..total).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let m = DenseMatrix::from_vec(rows, cols, data)?;
            if name == INDEX_CACHE_ENTRY {
                pairs = Some(m);
            } else if name == NODE_COUNT_ENTRY {
                node_count = Some(m);
            } else {
                let group = if name.starts_with("revision.") {
                    ParamGroup::Revision
                } else if name.starts_with("classification.") {
                    ParamGroup::Classification
                } else {
                    return Err(Error::Checkpoint(format!("unknown entry {name}")));
                };
                params.push(name, group, m);
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        let index_cache = match (pairs, node_count) {
            (None, None) => None,
            (Some(p), Some(n)) => Some(decode_cache(&p, &n)?),
            _ => return Err(Error::Checkpoint("index cache entry without node count".into())),
        };
        Ok(Self { params, index_cache })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn as_index(v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < (1u64 << 52) as f64 {
        Ok(v as usize)
    } else {
        Err(Error::Checkpoint(format!("{v} is not a node index")))
    }
}

fn decode_cache(pairs: &DenseMatrix, n: &DenseMatrix) -> Result<IndexCache> {
    if pairs.cols() != 2 || n.shape() != (1, 1) {
        return Err(Error::Checkpoint("malformed index cache".into()));
    }
    let n = as_index(n.get(0, 0))?;
    let list = (0..pairs.rows())
        .map(|r| Ok((as_index(pairs.get(r, 0))?, as_index(pairs.get(r, 1))?)))
        .collect::<Result<Vec<_>>>()?;
    IndexCache::from_pairs(n, &list).map_err(|e| Error::Checkpoint(e.to_string()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if len > self.remaining() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        params.push("classification.w0", ParamGroup::Classification, DenseMatrix::glorot(3, 2, &mut rng));
        params.push("revision.w0", ParamGroup::Revision, DenseMatrix::glorot(3, 4, &mut rng));
        let cache = IndexCache::from_pairs(4, &[(0, 1), (1, 0), (2, 3), (3, 2)]).unwrap();
        Checkpoint::new(params, Some(cache))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], b"GRCNCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
        let name_len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        assert_eq!(&bytes[20..20 + name_len], b"classification.w0");
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::load("/nonexistent/ck.bin").is_err());
    }
}
