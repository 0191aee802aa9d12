//! Exhaustive reference implementations of the segmentation metrics, shared
//! by the oracle tests and the acceptance suite.

#![allow(dead_code)]

use ahnet_core::metrics::{asd, auc, dsc, extract_surface, iou, mhd, ravd, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 16;

pub fn random_mask(rng: &mut ChaCha8Rng, density: f64) -> Mask {
    let bits = (0..SIDE * SIDE).map(|_| rng.random_bool(density)).collect();
    Mask::new(SIDE, SIDE, bits).unwrap()
}

fn pts(m: &Mask) -> Vec<(f64, f64)> {
    let mut v = Vec::new();
    for r in 0..m.height() {
        for c in 0..m.width() {
            if m.get(r, c) {
                v.push((r as f64, c as f64));
            }
        }
    }
    v
}

fn brute_directed(from: &[(f64, f64)], to: &[(f64, f64)]) -> f64 {
    let mut sum = 0.0;
    for &(a, b) in from {
        let mut best = f64::INFINITY;
        for &(c, d) in to {
            best = best.min(((a - c) * (a - c) + (b - d) * (b - d)).sqrt());
        }
        sum += best;
    }
    sum / from.len() as f64
}

fn brute_surface(m: &Mask) -> Vec<(f64, f64)> {
    let (h, w) = (m.height() as isize, m.width() as isize);
    let fg = |r: isize, c: isize| r >= 0 && c >= 0 && r < h && c < w && m.get(r as usize, c as usize);
    let mut v = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if fg(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| !fg(r + dr, c + dc)) {
                v.push((r as f64, c as f64));
            }
        }
    }
    v
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

/// Compares every metric with the brute-force versions on `n` random mask
/// pairs; returns the first disagreement.
pub fn check_random_pairs(n: usize, seed: u64) -> Result<(), String> {
    let fail = |case: usize, what: &str| Err(format!("case {case}: {what}"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..n {
        let dp = rng.random_range(0.02..0.6);
        let dt = rng.random_range(0.02..0.6);
        let p = random_mask(&mut rng, dp);
        let t = random_mask(&mut rng, dt);
        let (pb, tb) = (p.bits(), t.bits());
        let tp = pb.iter().zip(tb).filter(|(a, b)| **a && **b).count() as f64;
        let fp = pb.iter().zip(tb).filter(|(a, b)| **a && !**b).count() as f64;
        let fn_ = pb.iter().zip(tb).filter(|(a, b)| !**a && **b).count() as f64;

        let d = dsc(&p, &t).map_err(|e| e.to_string())?.value;
        let j = iou(&p, &t).map_err(|e| e.to_string())?.value;
        if !close(d, 2.0 * tp / (2.0 * tp + fp + fn_)) {
            return fail(case, "dsc");
        }
        if !close(j, tp / (tp + fp + fn_)) {
            return fail(case, "iou");
        }
        if !close(d, 2.0 * j / (1.0 + j)) || j > d + 1e-15 {
            return fail(case, "dsc/iou identity");
        }

        let (vp, vt) = (pb.iter().filter(|b| **b).count() as f64, tb.iter().filter(|b| **b).count() as f64);
        if vt > 0.0 && !close(ravd(&p, &t).map_err(|e| e.to_string())?, (vp - vt).abs() / vt) {
            return fail(case, "ravd");
        }

        let (pp, tt) = (pts(&p), pts(&t));
        if !pp.is_empty() && !tt.is_empty() {
            let want = brute_directed(&pp, &tt).max(brute_directed(&tt, &pp));
            if !close(mhd(&p, &t).map_err(|e| e.to_string())?, want) {
                return fail(case, "mhd");
            }
        }

        let (sp, st) = (brute_surface(&p), brute_surface(&t));
        if pts(&extract_surface(&p)) != sp {
            return fail(case, "surface");
        }
        if !sp.is_empty() && !st.is_empty() && !close(asd(&p, &t).map_err(|e| e.to_string())?, brute_directed(&sp, &st)) {
            return fail(case, "asd");
        }

        // Coarse scores so that ties occur.
        let scores: Vec<f64> = (0..SIDE * SIDE).map(|_| (rng.random_range(0..20) as f64) / 19.0).collect();
        if tb.iter().any(|b| *b) && tb.iter().any(|b| !*b) && !close(auc(&scores, &t).map_err(|e| e.to_string())?, brute_auc(&scores, tb)) {
            return fail(case, "auc");
        }
    }
    Ok(())
}

/// Hand-computed cases: three shared pixels out of four predicted and four
/// true give DSC 0.75 and IoU 0.6; positives scored {0.8, 0.4} against
/// negatives {0.6, 0.2} win three of four pairs.
pub fn check_hand_cases() -> Result<(), String> {
    let p = Mask::from_u8(3, 3, &[1, 1, 0, 1, 1, 0, 0, 0, 0]).unwrap();
    let t = Mask::from_u8(3, 3, &[1, 1, 0, 1, 0, 0, 1, 0, 0]).unwrap();
    let d = dsc(&p, &t).unwrap().value;
    let j = iou(&p, &t).unwrap().value;
    if !close(d, 0.75) || !close(j, 0.6) {
        return Err(format!("dsc {d}, iou {j}"));
    }
    let gt = Mask::from_u8(1, 4, &[1, 0, 1, 0]).unwrap();
    let a = auc(&[0.8, 0.6, 0.4, 0.2], &gt).unwrap();
    if !close(a, 0.75) {
        return Err(format!("auc {a}"));
    }
    Ok(())
}
