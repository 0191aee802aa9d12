//! Segmentation of images of any size with a loaded network, plus the
//! run-length mask encoding used by the API.

use ahnet_core::data::{resize_lanczos, resize_nearest, Gray8};
use ahnet_core::metrics::Mask;
use ahnet_core::segnet::{predict, Network, Prediction};
use anyhow::Result;
use serde::{Deserialize, Serialize};

/// Resizes `img` to the network's working size, predicts, and maps the mask
/// and foreground probabilities back to the original size.
pub fn segment(net: &Network, img: &Gray8) -> Result<Prediction> {
    let side = net.spec().input_size;
    let resized;
    let input = if img.height == side && img.width == side {
        img
    } else {
        resized = resize_lanczos(img, side, side)?;
        &resized
    };
    let pred = predict(net, &[input])?.remove(0);
    if img.height == side && img.width == side {
        return Ok(pred);
    }
    let mask = resize_nearest(&pred.mask, img.height, img.width)?;
    let src = |o: usize, n_out: usize| ((2 * o + 1) * side / (2 * n_out)).min(side - 1);
    let mut foreground = Vec::with_capacity(img.height * img.width);
    for r in 0..img.height {
        for c in 0..img.width {
            foreground.push(pred.foreground[src(r, img.height) * side + src(c, img.width)]);
        }
    }
    Ok(Prediction { mask, foreground })
}

/// Row-major `(value, length)` runs of a binary mask.
pub fn rle_encode(mask: &Mask) -> Vec<(u8, usize)> {
    let mut runs: Vec<(u8, usize)> = Vec::new();
    for &b in mask.bits() {
        let v = u8::from(b);
        match runs.last_mut() {
            Some((last, n)) if *last == v => *n += 1,
            _ => runs.push((v, 1)),
        }
    }
    runs
}

pub fn rle_decode(height: usize, width: usize, runs: &[(u8, usize)]) -> Result<Mask> {
    let mut bits = Vec::with_capacity(height * width);
    for &(v, n) in runs {
        bits.extend(std::iter::repeat_n(v != 0, n));
    }
    Ok(Mask::new(height, width, bits)?)
}

/// Summary of the per-pixel foreground probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilitySummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Pixels predicted as foreground.
    pub pixels: usize,
    pub fraction: f64,
}

impl ProbabilitySummary {
    pub fn of(pred: &Prediction) -> Self {
        let p = &pred.foreground;
        let n = p.len().max(1) as f64;
        let pixels = pred.mask.count();
        ProbabilitySummary {
            mean: p.iter().sum::<f64>() / n,
            min: p.iter().copied().fold(f64::INFINITY, f64::min),
            max: p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            pixels,
            fraction: pixels as f64 / n,
        }
    }
}
