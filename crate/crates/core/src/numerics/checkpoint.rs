//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "HPBDCKPT"
//! version  u32      1
//! count    u32      number of entries
//! entry*   name_len u32, name (UTF-8), ndim u32, dims u64 × ndim, values f64 × product(dims)
//! ```
//!
//! Entries are written in sorted name order; values are stored as raw IEEE-754
//! bits so a load after a save is bit-exact.

use std::fs;
use std::path::Path;

use super::{NumericsError, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"HPBDCKPT";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NumericsError> {
        if self.pos + n > self.buf.len() {
            return Err(NumericsError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NumericsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NumericsError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<ParamStore, NumericsError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(NumericsError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NumericsError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| NumericsError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        if ndim == 0 || shape.contains(&0) {
            return Err(NumericsError::Checkpoint(format!("bad shape for `{name}`")));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(r.u64()?));
        }
        store.insert(name, Tensor::new(shape, data));
    }
    if r.pos != buf.len() {
        return Err(NumericsError::Checkpoint("trailing bytes".into()));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<(), NumericsError> {
    fs::write(path, encode(store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore, NumericsError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>(), 1..40), split in 1usize..4) {
            let mut store = ParamStore::new();
            let n = values.len();
            store.insert("a.weight", Tensor::vector(values.clone()));
            if n % split == 0 {
                store.insert("b", Tensor::new(vec![split, n / split], values));
            }
            let bytes = encode(&store);
            let back = decode(&bytes).unwrap();
            prop_assert!(back.bitwise_eq(&store));
            prop_assert_eq!(encode(&back), bytes);
        }
    }

    #[test]
    fn rejects_wrong_version_and_truncation() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let mut bytes = encode(&store);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        bytes[8] = 9;
        assert!(decode(&bytes).is_err());
    }
}
