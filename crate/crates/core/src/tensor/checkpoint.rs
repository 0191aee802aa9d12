//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MAHW" | version: u32 | count: u32 | count × entry
//! entry := name_len: u32 | name: UTF-8 | dtype: u8 | rank: u8 | extents: u64 × rank | values
//! ```
//!
//! dtype codes: `0` = f64, `1` = f32, `2` = raw bytes (rank 1, used for
//! embedded JSON metadata).

use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MAHW";
pub const VERSION: u32 = 1;
const BYTES_CODE: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), Entry::Tensor(t)));
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.entries.push((name.into(), Entry::Bytes(bytes)));
    }

    pub fn entries(&self) -> &[(String, Entry)] {
        &self.entries
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find_map(|(n, e)| match e {
            Entry::Tensor(t) if n == name => Some(t),
            _ => None,
        })
    }

    pub fn bytes(&self, name: &str) -> Option<&[u8]> {
        self.entries.iter().find_map(|(n, e)| match e {
            Entry::Bytes(b) if n == name => Some(b.as_slice()),
            _ => None,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, entry) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            match entry {
                Entry::Tensor(t) => {
                    w.write_all(&[t.dtype().code(), t.rank() as u8])?;
                    for &e in t.shape() {
                        w.write_all(&(e as u64).to_le_bytes())?;
                    }
                    match t.dtype() {
                        DType::F64 => {
                            for v in t.data() {
                                w.write_all(&v.to_le_bytes())?;
                            }
                        }
                        DType::F32 => {
                            for &v in t.data() {
                                w.write_all(&(v as f32).to_le_bytes())?;
                            }
                        }
                    }
                }
                Entry::Bytes(b) => {
                    w.write_all(&[BYTES_CODE, 1])?;
                    w.write_all(&(b.len() as u64).to_le_bytes())?;
                    w.write_all(b)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::UnsupportedFormat("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::UnsupportedFormat(format!("checkpoint version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Corrupt("checkpoint entry name is not UTF-8".into()))?;
            let mut head = [0u8; 2];
            read_exact(&mut r, &mut head)?;
            let [code, rank] = head;
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::Corrupt(format!("entry `{name}` has overflowing extents")))?;
            let entry = if code == BYTES_CODE {
                let mut b = vec![0u8; n];
                read_exact(&mut r, &mut b)?;
                Entry::Bytes(b)
            } else {
                let dtype = DType::from_code(code)
                    .ok_or_else(|| Error::Corrupt(format!("entry `{name}` has dtype code {code}")))?;
                let mut raw = vec![0u8; n * dtype.size()];
                read_exact(&mut r, &mut raw)?;
                let data = match dtype {
                    DType::F64 => raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                    DType::F32 => raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect(),
                };
                let mut t = Tensor::new(shape, data)?;
                t.dtype = dtype;
                Entry::Tensor(t)
            };
            entries.push((name, entry));
        }
        Ok(Checkpoint { entries })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt("checkpoint truncated".into()),
        _ => Error::RawIo(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
