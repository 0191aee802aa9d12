//! Uncompressed single-file NIfTI-1 volumes, little-endian, int16 or
//! float32 voxels.

use std::path::Path;

use crate::error::{Error, Result};

const HEADER_LEN: usize = 348;
const DATA_OFFSET: usize = 352;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Int16,
    Float32,
}

impl Datatype {
    fn code(self) -> i16 {
        match self {
            Datatype::Int16 => DT_INT16,
            Datatype::Float32 => DT_FLOAT32,
        }
    }

    fn bitpix(self) -> i16 {
        match self {
            Datatype::Int16 => 16,
            Datatype::Float32 => 32,
        }
    }
}

/// A volume with `x` varying fastest, then `y`, then `z`. Voxels carry the
/// scaled values when the file had a nonzero slope.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeRecord {
    pub dims: [usize; 3],
    pub datatype: Datatype,
    pub voxels: Vec<f64>,
    pub source: String,
}

impl VolumeRecord {
    pub fn new(dims: [usize; 3], datatype: Datatype, voxels: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("volume dims {dims:?}")));
        }
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "{} voxels for dims {dims:?}",
                voxels.len()
            )));
        }
        Ok(VolumeRecord {
            dims,
            datatype,
            voxels,
            source: source.into(),
        })
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        let [nx, ny, _] = self.dims;
        self.voxels[x + nx * (y + ny * z)]
    }
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().expect("4 bytes"))
}

/// Parses a NIfTI-1 file image held in memory.
pub fn parse_volume(bytes: &[u8], source: &str) -> Result<VolumeRecord> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corrupt(format!("{source}: truncated header ({} bytes)", bytes.len())));
    }
    let magic = &bytes[344..348];
    if magic == b"ni1\0" {
        return Err(Error::UnsupportedFormat(format!(
            "{source}: two-file NIfTI (.hdr/.img) is not supported"
        )));
    }
    if magic != b"n+1\0" {
        return Err(Error::UnsupportedFormat(format!("{source}: bad magic {magic:?}")));
    }
    let sizeof_hdr = i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    if sizeof_hdr != HEADER_LEN as i32 {
        return Err(Error::UnsupportedFormat(format!(
            "{source}: header size {sizeof_hdr} (big-endian files are not supported)"
        )));
    }
    let ndim = i16_at(bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Corrupt(format!("{source}: dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for i in 1..=ndim as usize {
        let d = i16_at(bytes, 40 + 2 * i);
        if d < 1 {
            return Err(Error::Corrupt(format!("{source}: dim[{i}] = {d}")));
        }
        if i <= 3 {
            dims[i - 1] = d as usize;
        } else if d != 1 {
            return Err(Error::UnsupportedFormat(format!(
                "{source}: {ndim}-dimensional volume"
            )));
        }
    }
    let datatype = match i16_at(bytes, 70) {
        DT_INT16 => Datatype::Int16,
        DT_FLOAT32 => Datatype::Float32,
        other => {
            return Err(Error::UnsupportedFormat(format!("{source}: datatype code {other}")))
        }
    };
    let vox_offset = f32_at(bytes, 108);
    if !(vox_offset >= HEADER_LEN as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::Corrupt(format!("{source}: vox_offset {vox_offset}")));
    }
    let offset = vox_offset as usize;
    let slope = f32_at(bytes, 112) as f64;
    let inter = f32_at(bytes, 116) as f64;
    let count: usize = dims.iter().product();
    let width = datatype.bitpix() as usize / 8;
    let end = offset + count * width;
    if bytes.len() < end {
        return Err(Error::Corrupt(format!(
            "{source}: truncated voxel data ({} of {} bytes)",
            bytes.len().saturating_sub(offset),
            count * width
        )));
    }
    let raw = &bytes[offset..end];
    let mut voxels: Vec<f64> = match datatype {
        Datatype::Int16 => raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        Datatype::Float32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    if slope != 0.0 && slope.is_finite() && inter.is_finite() {
        voxels.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    VolumeRecord::new(dims, datatype, voxels, source)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeRecord> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_volume(&bytes, &path.display().to_string())
}

/// Encodes `vol.voxels` as stored values, with the given scaling fields.
pub fn encode_volume(vol: &VolumeRecord, slope: f32, inter: f32) -> Result<Vec<u8>> {
    let mut b = vec![0u8; DATA_OFFSET];
    b[0..4].copy_from_slice(&(HEADER_LEN as i32).to_le_bytes());
    let put16 = |b: &mut [u8], off: usize, v: i16| b[off..off + 2].copy_from_slice(&v.to_le_bytes());
    put16(&mut b, 40, 3);
    for (i, &d) in vol.dims.iter().enumerate() {
        let d = i16::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds int16")))?;
        put16(&mut b, 42 + 2 * i, d);
    }
    for i in 4..8 {
        put16(&mut b, 40 + 2 * i, 1);
    }
    put16(&mut b, 70, vol.datatype.code());
    put16(&mut b, 72, vol.datatype.bitpix());
    for i in 0..8 {
        b[76 + 4 * i..80 + 4 * i].copy_from_slice(&1f32.to_le_bytes());
    }
    b[108..112].copy_from_slice(&(DATA_OFFSET as f32).to_le_bytes());
    b[112..116].copy_from_slice(&slope.to_le_bytes());
    b[116..120].copy_from_slice(&inter.to_le_bytes());
    b[344..348].copy_from_slice(b"n+1\0");
    for &v in &vol.voxels {
        match vol.datatype {
            Datatype::Int16 => {
                if v.fract() != 0.0 || v < i16::MIN as f64 || v > i16::MAX as f64 {
                    return Err(Error::invalid(format!("{v} is not an int16 voxel")));
                }
                b.extend_from_slice(&(v as i16).to_le_bytes());
            }
            Datatype::Float32 => b.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    Ok(b)
}

pub fn write_volume(path: impl AsRef<Path>, vol: &VolumeRecord) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_volume(vol, 0.0, 0.0)?).map_err(|e| Error::io(path, e))
}
