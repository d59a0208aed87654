//! Flat, versioned binary container for named arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "FEWVIEW\0"
//! version  u32       currently 1
//! count    u32       number of entries
//! entry*   count times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   dtype    u8      0 = f64, 1 = u64
//!   ndim     u32, dims (u64 each)
//!   data     product(dims) elements, 8 bytes each, row-major
//! ```
//!
//! `f64` values are stored as their IEEE-754 bit patterns, so a
//! save/load round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"FEWVIEW\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed entry {index}: {msg}")]
    Malformed { index: usize, msg: String },
    #[error("missing entry {0:?}")]
    Missing(String),
    #[error("entry {0:?} has the wrong dtype")]
    Dtype(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Data,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    fn put(&mut self, entry: Entry) {
        match self.entries.iter_mut().find(|e| e.name == entry.name) {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn put_f64(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.put(Entry {
            name: name.to_string(),
            shape,
            data: Data::F64(values),
        });
    }

    pub fn put_u64(&mut self, name: &str, values: Vec<u64>) {
        self.put(Entry {
            name: name.to_string(),
            shape: vec![values.len()],
            data: Data::U64(values),
        });
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn get_f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let e = self.entry(name)?;
        match &e.data {
            Data::F64(v) => Ok((&e.shape, v)),
            Data::U64(_) => Err(CheckpointError::Dtype(name.to_string())),
        }
    }

    pub fn get_u64(&self, name: &str) -> Result<&[u64]> {
        let e = self.entry(name)?;
        match &e.data {
            Data::U64(v) => Ok(v),
            Data::F64(_) => Err(CheckpointError::Dtype(name.to_string())),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            let dtype: u8 = match e.data {
                Data::F64(_) => 0,
                Data::U64(_) => 1,
            };
            w.write_all(&[dtype])?;
            w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for d in &e.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            match &e.data {
                Data::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_bits().to_le_bytes())?;
                    }
                }
                Data::U64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for index in 0..count {
            let malformed = |msg: &str| CheckpointError::Malformed {
                index,
                msg: msg.to_string(),
            };
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| malformed("name is not UTF-8"))?;
            let mut dtype = [0u8; 1];
            r.read_exact(&mut dtype)?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| malformed("shape overflows"))?;
            let raw = (0..n).map(|_| read_u64(r)).collect::<Result<Vec<_>>>()?;
            let data = match dtype[0] {
                0 => Data::F64(raw.into_iter().map(f64::from_bits).collect()),
                1 => Data::U64(raw),
                _ => return Err(malformed("unknown dtype")),
            };
            entries.push(Entry { name, shape, data });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            Checkpoint::read_from(&mut &b"NOTACKPT\x01\0\0\0"[..]),
            Err(CheckpointError::Magic)
        ));
        let mut bytes = MAGIC.to_vec();
        bytes.extend(7u32.to_le_bytes());
        bytes.extend(0u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::read_from(&mut bytes.as_slice()),
            Err(CheckpointError::Version(7))
        ));
    }

    #[test]
    fn header_layout() {
        let mut c = Checkpoint::default();
        c.put_u64("step", vec![42]);
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        // name_len + "step" + dtype + ndim + dim + value
        assert_eq!(bytes.len(), 16 + 4 + 4 + 1 + 4 + 8 + 8);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(proptest::num::f64::ANY, 0..64),
            counters in proptest::collection::vec(any::<u64>(), 0..8),
        ) {
            let mut c = Checkpoint::default();
            c.put_f64("a.weight", vec![values.len()], values.clone());
            c.put_u64("rng", counters.clone());
            let mut bytes = Vec::new();
            c.write_to(&mut bytes).unwrap();
            let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
            let (shape, got) = back.get_f64("a.weight").unwrap();
            prop_assert_eq!(shape, &[values.len()][..]);
            let a: Vec<u64> = got.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = values.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.get_u64("rng").unwrap(), &counters[..]);
        }
    }
}
