use super::{images_to_tensor, Network};
use crate::data::{DatasetBundle, Gray8, SliceRecord};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_case, Mask, MetricsReport};
use crate::tensor::Tensor;

/// Slices per inference batch; outputs do not depend on it.
const EVAL_BATCH: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Argmax over classes; any non-background class is foreground.
    pub mask: Mask,
    /// Per-pixel `1 - p(background)`.
    pub foreground: Vec<f64>,
}

fn split(seg: &Tensor) -> Result<Vec<Prediction>> {
    let [n, h, w, c] = seg.nhwc("segmentation output")?;
    let mut out = Vec::with_capacity(n);
    for item in seg.data().chunks(h * w * c) {
        let mut bits = Vec::with_capacity(h * w);
        let mut fg = Vec::with_capacity(h * w);
        for row in item.chunks(c) {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            bits.push(best != 0);
            fg.push(1.0 - row[0]);
        }
        out.push(Prediction {
            mask: Mask::new(h, w, bits)?,
            foreground: fg,
        });
    }
    Ok(out)
}

/// Eval-mode prediction for images of the network's working size.
pub fn predict(net: &Network, images: &[&Gray8]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let (seg, _) = net.forward(&images_to_tensor(chunk)?, false)?;
        out.extend(split(&seg)?);
    }
    Ok(out)
}

/// Per-slice metrics of argmax predictions against the bundle labels.
pub fn evaluate(net: &Network, bundle: &DatasetBundle) -> Result<MetricsReport> {
    let recs = bundle.records();
    let mut preds = Vec::with_capacity(recs.len());
    for chunk in recs.chunks(EVAL_BATCH) {
        let images: Vec<&Gray8> = chunk.iter().map(|r| &r.image).collect();
        preds.extend(predict(net, &images)?);
    }
    score(recs, &preds)
}

/// Metrics of `preds[i]` against `records[i].label`.
pub fn score(records: &[SliceRecord], preds: &[Prediction]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    if records.len() != preds.len() {
        return Err(Error::invalid(format!(
            "{} labels for {} predictions",
            records.len(),
            preds.len()
        )));
    }
    let cases = records
        .iter()
        .zip(preds)
        .map(|(rec, pred)| {
            if rec.label.height() != pred.mask.height() || rec.label.width() != pred.mask.width() {
                return Err(Error::shape(format!("{}: label and prediction differ in size", rec.case_id)));
            }
            evaluate_case(&rec.case_id, &pred.mask, &rec.label, Some(&pred.foreground))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(cases))
}
