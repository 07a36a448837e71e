//! Tensor checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic      4 bytes  "PCSC"
//! version    u32      = 1
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, dims u32 * rank
//!   payload  f32 * product(dims)
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PCSC";
pub const VERSION: u32 = 1;

/// One named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn from_matrix(name: impl Into<String>, m: &Array2<f64>) -> Self {
        let (r, c) = m.dim();
        Self {
            name: name.into(),
            dims: vec![r, c],
            data: m.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Rank-1 tensors load as a single row.
    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        let (r, c) = match self.dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(Error::Checkpoint(format!("{}: rank {} unsupported", self.name, self.dims.len()))),
        };
        Array2::from_shape_vec((r, c), self.data.iter().map(|&v| v as f64).collect())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", self.name)))
    }
}

pub fn encode(tensors: &[StoredTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<StoredTensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} too large")));
        }
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push(StoredTensor { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_file(path: &Path, tensors: &[StoredTensor]) -> Result<()> {
    fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<StoredTensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

impl ParamStore {
    pub fn to_stored(&self) -> Vec<StoredTensor> {
        self.tensors()
            .iter()
            .map(|t| StoredTensor::from_matrix(t.name.clone(), &t.value))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_stored())
    }

    /// Loads values by name into an already-built store of the same layout.
    pub fn load_values(&mut self, tensors: &[StoredTensor]) -> Result<()> {
        if tensors.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                tensors.len(),
                self.len()
            )));
        }
        let mut staged = ParamStore::new();
        for t in tensors {
            staged.add(t.name.clone(), t.to_matrix()?);
        }
        self.copy_values_from(&staged)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let tensors = read_file(path)?;
        self.load_values(&tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = StoredTensor {
            name: "ab".into(),
            dims: vec![1, 2],
            data: vec![1.0, -2.0],
        };
        let b = encode(&[t]);
        assert_eq!(&b[..4], b"PCSC");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..18], b"ab");
        assert_eq!(&b[18..22], &2u32.to_le_bytes());
        assert_eq!(b.len(), 22 + 8 + 8);
    }

    #[test]
    fn rejects_corruption() {
        let t = StoredTensor {
            name: "w".into(),
            dims: vec![2, 2],
            data: vec![0.5; 4],
        };
        let b = encode(&[t]);
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad = b;
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(names in proptest::collection::vec("[a-z/0-9.]{1,12}", 1..4),
                      vals in proptest::collection::vec(-1e6f32..1e6, 1..20)) {
            let tensors: Vec<StoredTensor> = names.iter().map(|n| StoredTensor {
                name: n.clone(), dims: vec![1, vals.len()], data: vals.clone(),
            }).collect();
            prop_assert_eq!(decode(&encode(&tensors)).unwrap(), tensors);
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode(&bytes);
        }
    }
}
