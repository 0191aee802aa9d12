//! Synthetic lesion slices: a noisy background with one bright lesion whose
//! area is drawn log-uniformly from 4 pixels to a tenth of the image.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::bundle::{DatasetBundle, SliceRecord};
use crate::data::image::Gray8;
use crate::error::{Error, Result};
use crate::metrics::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionKind {
    #[default]
    Disk,
    Ellipse,
    Blob,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_cases: usize,
    pub size: usize,
    pub kind: LesionKind,
    /// Lesion mean minus background mean, in gray levels (lower bound).
    pub contrast: f64,
    pub background: f64,
    pub noise_std: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, n_cases: usize, size: usize, kind: LesionKind) -> Self {
        SynthConfig {
            seed,
            n_cases,
            size,
            kind,
            contrast: 80.0,
            background: 60.0,
            noise_std: 10.0,
        }
    }
}

/// Shape test in coordinates relative to the lesion centre.
enum Shape {
    Disk { r: f64 },
    Ellipse { a: f64, b: f64, angle: f64 },
    Blob { r: f64, phase: f64 },
}

impl Shape {
    fn contains(&self, dy: f64, dx: f64) -> bool {
        match *self {
            Shape::Disk { r } => dy * dy + dx * dx <= r * r,
            Shape::Ellipse { a, b, angle } => {
                let (s, c) = angle.sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Blob { r, phase } => {
                let rho = (dy * dy + dx * dx).sqrt();
                rho <= r * (1.0 + 0.25 * (3.0 * dy.atan2(dx) + phase).sin())
            }
        }
    }

    fn extent(&self) -> f64 {
        match *self {
            Shape::Disk { r } => r,
            Shape::Ellipse { a, .. } => a,
            Shape::Blob { r, .. } => 1.25 * r,
        }
    }
}

fn draw_shape(rng: &mut ChaCha8Rng, kind: LesionKind, area: f64) -> Shape {
    match kind {
        LesionKind::Disk => Shape::Disk { r: (area / PI).sqrt() },
        LesionKind::Ellipse => {
            let q: f64 = rng.random_range(0.5..1.0);
            let a = (area / (PI * q)).sqrt();
            Shape::Ellipse {
                a,
                b: q * a,
                angle: rng.random_range(0.0..PI),
            }
        }
        LesionKind::Blob => Shape::Blob {
            r: (area / PI).sqrt(),
            phase: rng.random_range(0.0..2.0 * PI),
        },
    }
}

/// Zero-mean noise samples clipped to three standard deviations.
fn centred_noise(rng: &mut ChaCha8Rng, normal: &Normal<f64>, n: usize, std: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| normal.sample(rng).clamp(-3.0 * std, 3.0 * std)).collect();
    if n > 0 {
        let m = v.iter().sum::<f64>() / n as f64;
        v.iter_mut().for_each(|x| *x -= m);
    }
    v
}

/// One slice per case; cases are grouped two per patient. Lesion pixels are
/// rounded up and background pixels down, so the mean difference is at
/// least `contrast` whenever nothing saturates.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<DatasetBundle> {
    if cfg.size < 16 {
        return Err(Error::invalid(format!("synthetic size {} < 16", cfg.size)));
    }
    if cfg.n_cases == 0 {
        return Err(Error::invalid("n_cases must be >= 1"));
    }
    if !(cfg.noise_std >= 0.0) || !(cfg.contrast >= 0.0) {
        return Err(Error::invalid("noise_std and contrast must be non-negative"));
    }
    let n = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let (lo, hi) = (4f64.ln(), (0.1 * (n * n) as f64).ln());
    let mut records = Vec::with_capacity(cfg.n_cases);
    for i in 0..cfg.n_cases {
        let area = rng.random_range(lo..hi).exp();
        let shape = draw_shape(&mut rng, cfg.kind, area);
        let margin = shape.extent() + 1.0;
        let span = n as f64 - 1.0 - 2.0 * margin;
        let mut centre = || {
            if span > 0.0 {
                margin + rng.random_range(0.0..span)
            } else {
                (n as f64 - 1.0) / 2.0
            }
        };
        let (cy, cx) = (centre(), centre());
        let mut bits: Vec<bool> = (0..n * n)
            .map(|k| shape.contains((k / n) as f64 - cy, (k % n) as f64 - cx))
            .collect();
        if !bits.iter().any(|&b| b) {
            let k = cy.round() as usize * n + cx.round() as usize;
            bits[k] = true;
        }
        let fg = bits.iter().filter(|&&b| b).count();
        let lesion_noise = centred_noise(&mut rng, &normal, fg, cfg.noise_std);
        let bg_noise = centred_noise(&mut rng, &normal, n * n - fg, cfg.noise_std);
        let (mut li, mut bi) = (lesion_noise.into_iter(), bg_noise.into_iter());
        let pixels = bits
            .iter()
            .map(|&b| {
                let v = if b {
                    (cfg.background + cfg.contrast + li.next().expect("count")).ceil()
                } else {
                    (cfg.background + bi.next().expect("count")).floor()
                };
                v.clamp(0.0, 255.0) as u8
            })
            .collect();
        records.push(SliceRecord::new(
            Gray8::new(n, n, pixels)?,
            Mask::new(n, n, bits)?,
            format!("synth{i:03}"),
            format!("p{:03}", i / 2),
            (i % 2) as u32,
        )?);
    }
    DatasetBundle::new(records)
}
