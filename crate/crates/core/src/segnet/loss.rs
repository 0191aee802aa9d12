use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::nn::Graph;
use crate::tensor::{Tensor, Var};

/// Probability floor inside the logarithm of cross-entropy.
pub const CE_FLOOR: f64 = 1e-12;
/// Smoothing of the soft Dice ratio.
pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLoss {
    CrossEntropy,
    SoftDice,
    #[default]
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_recon: f64,
    pub seg_loss: SegLoss,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_recon: 0.5,
            seg_loss: SegLoss::Sum,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_recon >= 0.0) || !self.alpha_recon.is_finite() {
            return Err(Error::invalid(format!("alpha_recon must be >= 0, got {}", self.alpha_recon)));
        }
        Ok(())
    }
}

/// `[N, H, W, classes]` one-hot targets; channel 1 is the lesion.
pub fn one_hot(masks: &[&Mask], classes: usize) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::invalid("empty label batch"))?;
    if classes < 2 {
        return Err(Error::invalid("one-hot needs at least two classes"));
    }
    let (h, w) = (first.height(), first.width());
    let mut data = vec![0.0; masks.len() * h * w * classes];
    for (i, m) in masks.iter().enumerate() {
        if m.height() != h || m.width() != w {
            return Err(Error::shape("label masks in a batch differ in size"));
        }
        for (p, &b) in m.bits().iter().enumerate() {
            data[(i * h * w + p) * classes + usize::from(b)] = 1.0;
        }
    }
    Tensor::new(vec![masks.len(), h, w, classes], data)
}

/// Equal-width intensity bins of `[N, H, W, 1]` images in `[0, 1]`, one-hot
/// over `bins` channels.
pub fn bin_images(images: &Tensor, bins: usize) -> Result<Tensor> {
    let [n, h, w, c] = images.nhwc("bin_images")?;
    if c != 1 || bins < 2 {
        return Err(Error::invalid("bin_images needs one channel and >= 2 bins"));
    }
    let mut data = vec![0.0; n * h * w * bins];
    for (p, &v) in images.data().iter().enumerate() {
        let b = ((v.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
        data[p * bins + b] = 1.0;
    }
    Tensor::new(vec![n, h, w, bins], data)
}

fn check_one_hot(t: &Tensor) -> Result<()> {
    let c = t.channels();
    for row in t.data().chunks(c) {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("segmentation target is not one-hot"));
        }
    }
    Ok(())
}

/// Segmentation loss plus `alpha_recon` times the reconstruction
/// cross-entropy against binned input intensities.
pub fn combined_loss(
    g: &mut Graph,
    seg: Var,
    gt: &Tensor,
    recon: Option<Var>,
    images: &Tensor,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    if g.tape.shape(seg) != gt.shape() {
        return Err(Error::shape(format!(
            "seg probs {:?} vs target {:?}",
            g.tape.shape(seg),
            gt.shape()
        )));
    }
    check_one_hot(gt)?;
    let mut loss = match weights.seg_loss {
        SegLoss::CrossEntropy => g.tape.cross_entropy(seg, gt, CE_FLOOR)?,
        SegLoss::SoftDice => g.tape.soft_dice(seg, gt, 1, DICE_EPS)?,
        SegLoss::Sum => {
            let ce = g.tape.cross_entropy(seg, gt, CE_FLOOR)?;
            let dice = g.tape.soft_dice(seg, gt, 1, DICE_EPS)?;
            g.tape.add(ce, dice)?
        }
    };
    if let Some(r) = recon {
        if weights.alpha_recon > 0.0 {
            let bins = g.tape.value(r).channels();
            let target = bin_images(images, bins)?;
            let ce = g.tape.cross_entropy(r, &target, CE_FLOOR)?;
            let ce = g.tape.scale(ce, weights.alpha_recon)?;
            loss = g.tape.add(loss, ce)?;
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tape;

    fn eval(probs: &Tensor, gt: &Tensor, recon: Option<&Tensor>, images: &Tensor, w: LossWeights) -> Result<f64> {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &store, false);
        let p = g.tape.input(probs.clone())?;
        let r = match recon {
            Some(r) => Some(g.tape.input(r.clone())?),
            None => None,
        };
        let l = combined_loss(&mut g, p, gt, r, images, &w)?;
        Ok(g.tape.value(l).item())
    }

    fn mask(bits: &[u8]) -> Mask {
        Mask::from_u8(2, 2, bits).unwrap()
    }

    #[test]
    fn perfect_prediction_ce_vanishes() {
        let gt = one_hot(&[&mask(&[1, 0, 0, 1])], 2).unwrap();
        let img = Tensor::zeros(vec![1, 2, 2, 1]);
        let w = LossWeights {
            alpha_recon: 0.0,
            seg_loss: SegLoss::CrossEntropy,
        };
        assert!(eval(&gt, &gt, None, &img, w).unwrap() <= 1e-6);
    }

    #[test]
    fn dice_limits() {
        let gt = one_hot(&[&mask(&[1, 1, 0, 0])], 2).unwrap();
        let img = Tensor::zeros(vec![1, 2, 2, 1]);
        let w = LossWeights {
            alpha_recon: 0.0,
            seg_loss: SegLoss::SoftDice,
        };
        assert!(eval(&gt, &gt, None, &img, w).unwrap().abs() < 1e-15);
        let other = one_hot(&[&mask(&[0, 0, 1, 1])], 2).unwrap();
        // 1 - eps / (2 + 2 + eps) with no overlap
        assert!((eval(&other, &gt, None, &img, w).unwrap() - (1.0 - 1.0 / 5.0)).abs() < 1e-15);
    }

    #[test]
    fn non_one_hot_target_rejected() {
        let mut gt = one_hot(&[&mask(&[1, 0, 0, 1])], 2).unwrap();
        gt.data_mut()[0] = 0.5;
        let img = Tensor::zeros(vec![1, 2, 2, 1]);
        let p = Tensor::full(vec![1, 2, 2, 2], 0.5);
        assert!(eval(&p, &gt, None, &img, LossWeights::default()).is_err());
        let gt2 = one_hot(&[&mask(&[1, 0, 0, 1])], 2).unwrap();
        let neg = LossWeights {
            alpha_recon: -1.0,
            ..LossWeights::default()
        };
        assert!(eval(&p, &gt2, None, &img, neg).is_err());
    }

    #[test]
    fn recon_term_uses_binned_intensities() {
        let img = Tensor::new(vec![1, 2, 2, 1], vec![0.0, 0.49, 0.5, 1.0]).unwrap();
        let bins = bin_images(&img, 2).unwrap();
        assert_eq!(bins.data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let gt = one_hot(&[&mask(&[0, 0, 0, 0])], 2).unwrap();
        let p = Tensor::full(vec![1, 2, 2, 2], 0.5);
        let ce_only = LossWeights {
            alpha_recon: 0.0,
            seg_loss: SegLoss::CrossEntropy,
        };
        let base = eval(&p, &gt, Some(&p), &img, ce_only).unwrap();
        let with = eval(&p, &gt, Some(&p), &img, LossWeights { alpha_recon: 2.0, ..ce_only }).unwrap();
        assert!((with - base - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_nonnegative() {
        let gt = one_hot(&[&mask(&[1, 0, 1, 1])], 3).unwrap();
        let p = Tensor::new(vec![1, 2, 2, 3], vec![0.2, 0.3, 0.5, 0.9, 0.05, 0.05, 0.0, 1.0, 0.0, 0.3, 0.3, 0.4]).unwrap();
        let img = Tensor::zeros(vec![1, 2, 2, 1]);
        let w = LossWeights {
            alpha_recon: 0.0,
            seg_loss: SegLoss::CrossEntropy,
        };
        assert!(eval(&p, &gt, None, &img, w).unwrap() >= 0.0);
    }
}
