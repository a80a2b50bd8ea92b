//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"HGCK"  u32 version
//! repeated, in ascending name order:
//!     u32 name_len  name (UTF-8)  u32 rank  u32 dims[rank]  f32 values[product(dims)]
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HGCK";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for p in store.sorted() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out: Vec<(String, Tensor)> = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        if let Some((prev, _)) = out.last() {
            if prev.as_str() >= name.as_str() {
                return Err(Error::Checkpoint(format!("`{name}` out of order")));
            }
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Load values into an existing store built with the same architecture.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    store.load_values(load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = Rng::new(3);
        s.add_normal("zeta", &[2, 3], 1.0, &mut rng).unwrap();
        s.add_normal("alpha", &[4], 1.0, &mut rng).unwrap();
        s.round_to_f32();
        s
    }

    #[test]
    fn header_layout() {
        let b = encode(&store());
        assert_eq!(&b[..4], b"HGCK");
        assert_eq!(u32::from_le_bytes([b[4], b[5], b[6], b[7]]), 1);
        // first record is "alpha"
        assert_eq!(u32::from_le_bytes([b[8], b[9], b[10], b[11]]), 5);
        assert_eq!(&b[12..17], b"alpha");
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let s = store();
        let bytes = encode(&s);
        let mut t = store();
        for p in t.iter_mut() {
            p.value = p.value.scale(0.0);
        }
        t.load_values(decode(&bytes).unwrap()).unwrap();
        assert_eq!(encode(&t), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut b = encode(&store());
        assert!(decode(&b[..b.len() - 2]).is_err());
        b[0] = b'X';
        assert!(decode(&b).is_err());
    }

    #[test]
    fn shape_mismatch_on_load() {
        let bytes = encode(&store());
        let mut other = ParamStore::new();
        other.add_zeros("zeta", &[3, 2]).unwrap();
        other.add_zeros("alpha", &[4]).unwrap();
        assert!(other.load_values(decode(&bytes).unwrap()).is_err());
    }
}
