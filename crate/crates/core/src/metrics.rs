//! Overlap, volume, boundary and ranking metrics for binary 2D masks.
//!
//! Distances are Euclidean on pixel centres with unit spacing. Nearest
//! distances come from an exact squared Euclidean distance transform, so
//! they agree bit-for-bit with an exhaustive search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} with {} values",
                bits.len()
            )));
        }
        Ok(Mask { height, width, bits })
    }

    /// From `{0, 1}` bytes; any other value is rejected.
    pub fn from_u8(height: usize, width: usize, values: &[u8]) -> Result<Self> {
        let bits = values
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::invalid(format!("mask value {v} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, bits)
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Foreground coordinates in row-major order.
    pub fn points(&self) -> Vec<(usize, usize)> {
        (0..self.bits.len())
            .filter(|&i| self.bits[i])
            .map(|i| (i / self.width, i % self.width))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

fn same_shape(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<Confusion> {
    same_shape(pred, gt)?;
    let mut c = Confusion { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (&p, &t) in pred.bits.iter().zip(&gt.bits) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// An overlap score together with whether both masks were empty, in which
/// case the value is 1 by convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub value: f64,
    pub both_empty: bool,
}

pub fn dsc(pred: &Mask, gt: &Mask) -> Result<Overlap> {
    let c = confusion(pred, gt)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if denom == 0 {
        Overlap { value: 1.0, both_empty: true }
    } else {
        Overlap {
            value: (2 * c.tp) as f64 / denom as f64,
            both_empty: false,
        }
    })
}

pub fn iou(pred: &Mask, gt: &Mask) -> Result<Overlap> {
    let c = confusion(pred, gt)?;
    let denom = c.tp + c.fp + c.fn_;
    Ok(if denom == 0 {
        Overlap { value: 1.0, both_empty: true }
    } else {
        Overlap {
            value: c.tp as f64 / denom as f64,
            both_empty: false,
        }
    })
}

/// `|V_P − V_T| / V_T`.
pub fn ravd(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_shape(pred, gt)?;
    let vt = gt.count();
    if vt == 0 {
        return Err(Error::UndefinedMetric("RAVD with an empty ground truth"));
    }
    let vp = pred.count();
    Ok(vp.abs_diff(vt) as f64 / vt as f64)
}

/// Squared distance transform of a 1D sampled function (lower envelope of
/// parabolas). `f` holds `0` on sites and `INF` elsewhere.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[0]].is_infinite() {
            v[0] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if f[v[0]].is_infinite() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest site of
/// `sites` (`INF` everywhere when there are none).
pub fn squared_distance_transform(sites: &Mask) -> Vec<f64> {
    let (h, w) = (sites.height, sites.width);
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut grid: Vec<f64> = sites
        .bits
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Mean over points of `from` of the distance to the nearest point of `to`.
fn directed_mean(from: &Mask, to: &Mask) -> f64 {
    let dt = squared_distance_transform(to);
    let pts = from.points();
    let sum: f64 = pts.iter().map(|&(r, c)| dt[r * to.width + c].sqrt()).sum();
    sum / pts.len() as f64
}

/// Symmetric mean Hausdorff distance over all mask pixels:
/// `max(mean_P min_T d, mean_T min_P d)`.
pub fn mhd(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_shape(pred, gt)?;
    if pred.count() == 0 || gt.count() == 0 {
        return Err(Error::UndefinedMetric("MHD with an empty mask"));
    }
    Ok(directed_mean(pred, gt).max(directed_mean(gt, pred)))
}

/// Foreground pixels with a background 4-neighbour or on the image border.
pub fn extract_surface(mask: &Mask) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let mut out = Mask::empty(h, w);
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let border = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
            let exposed = border
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            out.set(r, c, exposed);
        }
    }
    out
}

/// Directed average surface distance, prediction surface to ground-truth
/// surface.
pub fn asd(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_shape(pred, gt)?;
    let sp = extract_surface(pred);
    let st = extract_surface(gt);
    if sp.count() == 0 || st.count() == 0 {
        return Err(Error::UndefinedMetric("ASD with an empty surface"));
    }
    Ok(directed_mean(&sp, &st))
}

/// Mann–Whitney estimate of the ROC area; tied scores count one half.
pub fn auc(probs: &[f64], gt: &Mask) -> Result<f64> {
    if probs.len() != gt.bits.len() {
        return Err(Error::shape(format!(
            "{} scores for a {}-pixel mask",
            probs.len(),
            gt.bits.len()
        )));
    }
    if probs.iter().any(|p| p.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let pos = gt.count();
    let neg = gt.bits.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC with a single-class ground truth"));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    // Twice the positive rank sum, with midranks for ties, kept integral.
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && probs[order[j + 1]] == probs[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1, midrank (i + j + 2) / 2
        let mid2 = (i + j + 2) as u128;
        let npos = order[i..=j].iter().filter(|&&k| gt.bits[k]).count() as u128;
        rank2_sum += mid2 * npos;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// One evaluated case. Undefined metrics are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub dsc: f64,
    pub ravd: Option<f64>,
    pub asd: Option<f64>,
    pub mhd: Option<f64>,
    pub auc: Option<f64>,
    pub iou: f64,
    /// Both masks empty; DSC and IoU were set to 1.
    pub both_empty: bool,
}

/// Evaluates every metric on a case; `probs` feeds AUC when present.
pub fn evaluate_case(id: impl Into<String>, pred: &Mask, gt: &Mask, probs: Option<&[f64]>) -> Result<CaseMetrics> {
    fn defined(r: Result<f64>) -> Result<Option<f64>> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }
    let d = dsc(pred, gt)?;
    let j = iou(pred, gt)?;
    let auc = match probs {
        Some(p) => defined(auc(p, gt))?,
        None => None,
    };
    Ok(CaseMetrics {
        id: id.into(),
        dsc: d.value,
        ravd: defined(ravd(pred, gt))?,
        asd: defined(asd(pred, gt))?,
        mhd: defined(mhd(pred, gt))?,
        auc,
        iou: j.value,
        both_empty: d.both_empty,
    })
}

/// Mean, population standard deviation and number of defined cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub defined: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        if v.is_empty() {
            return Summary { mean: None, std: None, defined: 0 };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Summary {
            mean: Some(mean),
            std: Some(var.sqrt()),
            defined: v.len(),
        }
    }
}

/// Aggregate block, columns in the order DSC, RAVD, ASD, MHD, AUC, IoU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dsc: Summary,
    pub ravd: Summary,
    pub asd: Summary,
    pub mhd: Summary,
    pub auc: Summary,
    pub iou: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn new(cases: Vec<CaseMetrics>) -> Self {
        let col = |f: fn(&CaseMetrics) -> Option<f64>| Summary::of(cases.iter().map(f));
        let aggregate = Aggregate {
            dsc: col(|c| Some(c.dsc)),
            ravd: col(|c| c.ravd),
            asd: col(|c| c.asd),
            mhd: col(|c| c.mhd),
            auc: col(|c| c.auc),
            iou: col(|c| Some(c.iou)),
        };
        MetricsReport { cases, aggregate }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One table row: the six means, `-` where undefined.
    pub fn table_row(&self) -> String {
        let a = &self.aggregate;
        [a.dsc, a.ravd, a.asd, a.mhd, a.auc, a.iou]
            .iter()
            .map(|s| s.mean.map_or("-".to_string(), |m| format!("{m:.4}")))
            .collect::<Vec<_>>()
            .join("\t")
    }

    pub const TABLE_HEADER: &'static str = "DSC\tRAVD\tASD\tMHD\tAUC\tIoU";
}
