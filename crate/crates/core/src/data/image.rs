//! 8-bit grayscale slices: extraction from volumes, Lanczos-3 resampling,
//! nearest-neighbour label resizing and PNG export.

use std::f64::consts::PI;
use std::path::Path;

use crate::data::nifti::VolumeRecord;
use crate::error::{Error, Result};
use crate::metrics::Mask;

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray8 {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Gray8 {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Gray8 { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, v: u8) -> Self {
        Gray8 {
            height,
            width,
            pixels: vec![v; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.pixels[r * self.width + c]
    }
}

/// Round half up, clamped to `0..=255`.
pub fn quantize(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn slice_values(vol: &VolumeRecord, z: usize) -> &[f64] {
    let [nx, ny, _] = vol.dims;
    &vol.voxels[z * nx * ny..(z + 1) * nx * ny]
}

/// Axial slices (rows = y, columns = x), each min-max normalized and
/// quantized; a constant slice becomes all zeros.
pub fn extract_slices(vol: &VolumeRecord) -> Vec<Gray8> {
    let [nx, ny, nz] = vol.dims;
    (0..nz)
        .map(|z| {
            let s = slice_values(vol, z);
            let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = hi - lo;
            let pixels = s
                .iter()
                .map(|&v| {
                    if range > 0.0 && range.is_finite() {
                        quantize((v - lo) / range * 255.0)
                    } else {
                        0
                    }
                })
                .collect();
            Gray8 {
                height: ny,
                width: nx,
                pixels,
            }
        })
        .collect()
}

/// Axial label slices: nonzero voxels are foreground.
pub fn extract_label_slices(vol: &VolumeRecord) -> Vec<Mask> {
    let [nx, ny, nz] = vol.dims;
    (0..nz)
        .map(|z| {
            let bits = slice_values(vol, z).iter().map(|&v| v != 0.0).collect();
            Mask::new(ny, nx, bits).expect("slice shape")
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// `sinc(x)·sinc(x/3)` on `|x| < 3`.
pub fn lanczos3(x: f64) -> f64 {
    if x.abs() < 3.0 {
        sinc(x) * sinc(x / 3.0)
    } else {
        0.0
    }
}

/// Taps and normalized weights for each output sample of one axis.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = n_in as f64 / n_out as f64;
    let stretch = scale.max(1.0);
    let support = 3.0 * stretch;
    (0..n_out)
        .map(|o| {
            let centre = (o as f64 + 0.5) * scale - 0.5;
            let first = ((centre - support).ceil().max(0.0)) as usize;
            let last = ((centre + support).floor() as isize).min(n_in as isize - 1).max(0) as usize;
            let mut w: Vec<f64> = (first..=last)
                .map(|j| lanczos3((j as f64 - centre) / stretch))
                .collect();
            let sum: f64 = w.iter().sum();
            if sum != 0.0 {
                w.iter_mut().for_each(|x| *x /= sum);
            }
            (first, w)
        })
        .collect()
}

/// Separable Lanczos-3 resampling with per-sample renormalized weights
/// (antialiased when shrinking), rounded and clamped to `0..=255`.
pub fn resize_lanczos(img: &Gray8, out_h: usize, out_w: usize) -> Result<Gray8> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!("resize to {out_h}x{out_w}")));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let wx = axis_weights(img.width, out_w);
    let wy = axis_weights(img.height, out_h);
    let mut rows = vec![0.0; img.height * out_w];
    for r in 0..img.height {
        let src = &img.pixels[r * img.width..(r + 1) * img.width];
        for (o, (first, w)) in wx.iter().enumerate() {
            rows[r * out_w + o] = w.iter().enumerate().map(|(k, wk)| wk * src[first + k] as f64).sum();
        }
    }
    let mut pixels = vec![0u8; out_h * out_w];
    for (o, (first, w)) in wy.iter().enumerate() {
        for c in 0..out_w {
            let v: f64 = w.iter().enumerate().map(|(k, wk)| wk * rows[(first + k) * out_w + c]).sum();
            pixels[o * out_w + c] = quantize(v);
        }
    }
    Gray8::new(out_h, out_w, pixels)
}

/// Nearest-neighbour resize for label masks, sampling at pixel centres.
pub fn resize_nearest(mask: &Mask, out_h: usize, out_w: usize) -> Result<Mask> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!("resize to {out_h}x{out_w}")));
    }
    let src = |o: usize, n_in: usize, n_out: usize| ((2 * o + 1) * n_in / (2 * n_out)).min(n_in - 1);
    let mut out = Mask::empty(out_h, out_w);
    for r in 0..out_h {
        for c in 0..out_w {
            let v = mask.get(src(r, mask.height(), out_h), src(c, mask.width(), out_w));
            out.set(r, c, v);
        }
    }
    Ok(out)
}

fn encode(buf: &[u8], w: usize, h: usize, color: image::ExtendedColorType) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(buf, w as u32, h as u32, color)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out)
}

pub fn encode_png(img: &Gray8) -> Result<Vec<u8>> {
    encode(&img.pixels, img.width, img.height, image::ExtendedColorType::L8)
}

/// A mask as a black/white PNG.
pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>> {
    let px: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode(&px, mask.width(), mask.height(), image::ExtendedColorType::L8)
}

/// The grayscale image with foreground pixels tinted red.
pub fn encode_overlay_png(img: &Gray8, mask: &Mask) -> Result<Vec<u8>> {
    if mask.height() != img.height || mask.width() != img.width {
        return Err(Error::shape("overlay mask and image differ in size"));
    }
    let mut rgb = Vec::with_capacity(img.pixels.len() * 3);
    for (&p, &m) in img.pixels.iter().zip(mask.bits()) {
        if m {
            rgb.extend_from_slice(&[p / 2 + 128, p / 2, p / 2]);
        } else {
            rgb.extend_from_slice(&[p, p, p]);
        }
    }
    encode(&rgb, img.width, img.height, image::ExtendedColorType::Rgb8)
}

pub fn decode_png(bytes: &[u8]) -> Result<Gray8> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Gray8::new(h as usize, w as usize, img.into_raw())
}

pub fn save_png(path: impl AsRef<Path>, png: &[u8]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, png).map_err(|e| Error::io(path, e))
}
