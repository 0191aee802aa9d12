//! ULSB: an indexed container of paired image/label slices grouped by
//! patient.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ULSB" | version u32 | record count u64
//! per record: case id (u32 length + UTF-8) | patient id (u32 length + UTF-8)
//!             | slice index u32 | H u32 | W u32 | H·W image bytes
//!             | ceil(H·W/8) label bytes, bit i of byte k = pixel 8k+i
//! patient count u32
//! per patient: id (u32 length + UTF-8) | first record u64 | record count u64
//! CRC32C (Castagnoli) u32 of every preceding byte
//! ```

use std::path::Path;

use crate::data::image::Gray8;
use crate::error::{Error, Result};
use crate::metrics::Mask;

pub const MAGIC: &[u8; 4] = b"ULSB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceRecord {
    pub image: Gray8,
    pub label: Mask,
    pub case_id: String,
    pub patient_id: String,
    pub slice_index: u32,
}

impl SliceRecord {
    pub fn new(image: Gray8, label: Mask, case_id: impl Into<String>, patient_id: impl Into<String>, slice_index: u32) -> Result<Self> {
        if image.height != label.height() || image.width != label.width() {
            return Err(Error::shape(format!(
                "image {}x{} vs label {}x{}",
                image.height,
                image.width,
                label.height(),
                label.width()
            )));
        }
        Ok(SliceRecord {
            image,
            label,
            case_id: case_id.into(),
            patient_id: patient_id.into(),
            slice_index,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientRange {
    pub patient_id: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetBundle {
    records: Vec<SliceRecord>,
    index: Vec<PatientRange>,
    version: u32,
}

impl DatasetBundle {
    /// Groups records by patient, keeping the order of first appearance of
    /// each patient and the relative order within a patient.
    pub fn new(records: Vec<SliceRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("a bundle needs at least one record"));
        }
        let mut order: Vec<String> = Vec::new();
        for r in &records {
            if !order.contains(&r.patient_id) {
                order.push(r.patient_id.clone());
            }
        }
        let mut grouped = Vec::with_capacity(records.len());
        let mut index = Vec::with_capacity(order.len());
        let mut rest = records;
        for p in order {
            let (mine, others): (Vec<_>, Vec<_>) = rest.into_iter().partition(|r| r.patient_id == p);
            index.push(PatientRange {
                patient_id: p,
                start: grouped.len(),
                len: mine.len(),
            });
            grouped.extend(mine);
            rest = others;
        }
        Ok(DatasetBundle {
            records: grouped,
            index,
            version: VERSION,
        })
    }

    pub fn records(&self) -> &[SliceRecord] {
        &self.records
    }

    pub fn index(&self) -> &[PatientRange] {
        &self.index
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn patient(&self, id: &str) -> Option<&[SliceRecord]> {
        self.index
            .iter()
            .find(|p| p.patient_id == id)
            .map(|p| &self.records[p.start..p.start + p.len])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&self.version.to_le_bytes());
        b.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            put_str(&mut b, &r.case_id);
            put_str(&mut b, &r.patient_id);
            b.extend_from_slice(&r.slice_index.to_le_bytes());
            b.extend_from_slice(&(r.image.height as u32).to_le_bytes());
            b.extend_from_slice(&(r.image.width as u32).to_le_bytes());
            b.extend_from_slice(&r.image.pixels);
            b.extend_from_slice(&pack_bits(r.label.bits()));
        }
        b.extend_from_slice(&(self.index.len() as u32).to_le_bytes());
        for p in &self.index {
            put_str(&mut b, &p.patient_id);
            b.extend_from_slice(&(p.start as u64).to_le_bytes());
            b.extend_from_slice(&(p.len as u64).to_le_bytes());
        }
        let crc = crc32c::crc32c(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(Error::UnsupportedFormat("not a ULSB bundle".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        if crc32c::crc32c(body) != stored {
            return Err(Error::Corrupt("bundle checksum mismatch".into()));
        }
        let mut r = Reader { b: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedFormat(format!("bundle version {version}, expected {VERSION}")));
        }
        let count = r.u64()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let case_id = r.string()?;
            let patient_id = r.string()?;
            let slice_index = r.u32()?;
            let h = r.u32()? as usize;
            let w = r.u32()? as usize;
            let n = h.checked_mul(w).ok_or_else(|| Error::Corrupt("slice size overflow".into()))?;
            let image = Gray8::new(h, w, r.take(n)?.to_vec()).map_err(|e| Error::Corrupt(e.to_string()))?;
            let bits = unpack_bits(r.take(n.div_ceil(8))?, n);
            let label = Mask::new(h, w, bits)?;
            records.push(SliceRecord::new(image, label, case_id, patient_id, slice_index)?);
        }
        let patients = r.u32()? as usize;
        let mut index = Vec::with_capacity(patients.min(1 << 20));
        let mut next = 0usize;
        for _ in 0..patients {
            let patient_id = r.string()?;
            let start = r.u64()? as usize;
            let len = r.u64()? as usize;
            let valid = start == next
                && len > 0
                && start + len <= records.len()
                && records[start..start + len].iter().all(|x| x.patient_id == patient_id);
            if !valid {
                return Err(Error::Corrupt(format!("invalid index entry for patient `{patient_id}`")));
            }
            next = start + len;
            index.push(PatientRange { patient_id, start, len });
        }
        if next != records.len() || r.pos != body.len() {
            return Err(Error::Corrupt("index does not cover the records exactly".into()));
        }
        Ok(DatasetBundle { records, index, version })
    }
}

pub fn write_bundle(bundle: &DatasetBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, bundle.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<DatasetBundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    DatasetBundle::from_bytes(&bytes)
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.b.len())
            .ok_or_else(|| Error::Corrupt("bundle truncated".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("invalid UTF-8 id".into()))
    }
}
