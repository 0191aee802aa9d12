use serde::{Deserialize, Serialize};

use super::tape::BackwardArgs;
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Per channel over batch and spatial axes.
    Batch,
    /// Per position over the channel axis.
    Layer,
}

/// Exponential running statistics for batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Weight of the old statistic in each update.
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(channels: usize, momentum: f64) -> Self {
        BatchNormState {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum,
        }
    }

    fn updated(&self, mean: &[f64], var: &[f64]) -> Self {
        let m = self.momentum;
        BatchNormState {
            mean: self.mean.iter().zip(mean).map(|(r, b)| m * r + (1.0 - m) * b).collect(),
            var: self.var.iter().zip(var).map(|(r, b)| m * r + (1.0 - m) * b).collect(),
            momentum: m,
        }
    }
}

/// Mean and inverse standard deviation per normalization group.
struct Stats {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Tape {
    /// Dispatches to batch or layer normalization. Batch mode in training
    /// returns the updated running statistics alongside the output.
    #[allow(clippy::too_many_arguments)]
    pub fn normalize(
        &mut self,
        kind: NormKind,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<&BatchNormState>,
        training: bool,
    ) -> Result<(Var, Option<BatchNormState>)> {
        match kind {
            NormKind::Layer => Ok((self.layer_norm(x, gamma, beta, eps)?, None)),
            NormKind::Batch => {
                let running = running
                    .ok_or_else(|| Error::invalid("batch normalization needs running statistics"))?;
                self.batch_norm(x, gamma, beta, eps, running, training)
            }
        }
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        check_affine(self, x, gamma, beta, eps)?;
        let c = self.value(x).channels();
        let rows = self.value(x).len() / c;
        let xv = self.value(x).data();
        let mut stats = Stats {
            mean: Vec::with_capacity(rows),
            inv_std: Vec::with_capacity(rows),
        };
        for row in xv.chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            stats.mean.push(mean);
            stats.inv_std.push(1.0 / (var + eps).sqrt());
        }
        self.affine_normalized(x, gamma, beta, stats, move |e| e / c, true, "layer_norm")
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: &BatchNormState,
        training: bool,
    ) -> Result<(Var, Option<BatchNormState>)> {
        check_affine(self, x, gamma, beta, eps)?;
        let c = self.value(x).channels();
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape(format!(
                "running statistics for {} channels, input has {c}",
                running.mean.len()
            )));
        }
        let xv = self.value(x).data();
        let rows = xv.len() / c;
        if training {
            let mut mean = vec![0.0; c];
            for row in xv.chunks(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; c];
            for row in xv.chunks(c) {
                for k in 0..c {
                    let d = row[k] - mean[k];
                    var[k] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            let next = running.updated(&mean, &var);
            let stats = Stats {
                inv_std: var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
                mean,
            };
            let y = self.affine_normalized(x, gamma, beta, stats, move |e| e % c, true, "batch_norm")?;
            Ok((y, Some(next)))
        } else {
            let stats = Stats {
                mean: running.mean.clone(),
                inv_std: running.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
            };
            let y = self.affine_normalized(x, gamma, beta, stats, move |e| e % c, false, "batch_norm")?;
            Ok((y, None))
        }
    }

    /// `gamma · (x - mean) · inv_std + beta`, where the statistics group of
    /// flat element `e` is `group(e)`. When `batch_stats` is set the
    /// statistics are functions of `x` and contribute to its gradient.
    #[allow(clippy::too_many_arguments)]
    fn affine_normalized(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Stats,
        group: impl Fn(usize) -> usize + 'static,
        batch_stats: bool,
        op: &'static str,
    ) -> Result<Var> {
        let c = self.value(x).channels();
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (e, &v) in xv.data().iter().enumerate() {
            let gi = group(e);
            let h = (v - stats.mean[gi]) * stats.inv_std[gi];
            xhat.push(h);
            out.push(gv[e % c] * h + bv[e % c]);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let groups = stats.mean.len();
        let group_size = (xv.len() / groups) as f64;
        self.push(
            op,
            out,
            &[x, gamma, beta],
            Box::new(move |a: &BackwardArgs| {
                let g = a.grad.data();
                let gamma = a.inputs[1].data();
                let gx = a.needs[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    if batch_stats {
                        let mut sum_gh = vec![0.0; groups];
                        let mut sum_ghx = vec![0.0; groups];
                        for e in 0..g.len() {
                            let gh = g[e] * gamma[e % c];
                            sum_gh[group(e)] += gh;
                            sum_ghx[group(e)] += gh * xhat[e];
                        }
                        for e in 0..g.len() {
                            let gi = group(e);
                            let gh = g[e] * gamma[e % c];
                            gx[e] = stats.inv_std[gi]
                                * (gh - sum_gh[gi] / group_size - xhat[e] * sum_ghx[gi] / group_size);
                        }
                    } else {
                        for e in 0..g.len() {
                            gx[e] = g[e] * gamma[e % c] * stats.inv_std[group(e)];
                        }
                    }
                    Tensor::new(a.inputs[0].shape().to_vec(), gx).expect("shape")
                });
                let gg = a.needs[1].then(|| {
                    let mut gg = vec![0.0; c];
                    for e in 0..g.len() {
                        gg[e % c] += g[e] * xhat[e];
                    }
                    Tensor::from_vec(gg)
                });
                let gb = a.needs[2].then(|| {
                    let mut gb = vec![0.0; c];
                    for e in 0..g.len() {
                        gb[e % c] += g[e];
                    }
                    Tensor::from_vec(gb)
                });
                vec![gx, gg, gb]
            }),
        )
    }
}

fn check_affine(t: &Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<()> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid(format!("normalization eps must be > 0, got {eps}")));
    }
    let c = t.value(x).channels();
    if t.value(x).is_empty() {
        return Err(Error::shape("normalizing an empty tensor"));
    }
    if t.shape(gamma) != [c] || t.shape(beta) != [c] {
        return Err(Error::shape(format!(
            "affine parameters {:?}/{:?} for {c} channels",
            t.shape(gamma),
            t.shape(beta)
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(t: &mut Tape, c: usize, g: f64, b: f64) -> (Var, Var) {
        (
            t.input(Tensor::full(vec![c], g)).unwrap(),
            t.input(Tensor::full(vec![c], b)).unwrap(),
        )
    }

    #[test]
    fn layer_examples() {
        let mut t = Tape::new();
        let x = t.input(Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap()).unwrap();
        let (g, b) = affine(&mut t, 3, 1.0, 0.0);
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

        let x = t.input(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap()).unwrap();
        let (g, b) = affine(&mut t, 2, 1.0, 0.0);
        let y = t.layer_norm(x, g, b, 1e-14).unwrap();
        for (v, e) in t.value(y).data().iter().zip([1.0, -1.0]) {
            assert!((v - e).abs() < 1e-12);
        }
        assert!(t.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn batch_constant_input_gives_beta() {
        let mut t = Tape::new();
        let x = t.input(Tensor::full(vec![2, 3, 3, 2], 5.0)).unwrap();
        let (g, b) = affine(&mut t, 2, 2.0, 3.0);
        let state = BatchNormState::new(2, 0.9);
        let (y, next) = t.batch_norm(x, g, b, 1e-5, &state, true).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 3.0));
        let next = next.unwrap();
        assert!((next.mean[0] - 0.5).abs() < 1e-12);
        assert!((next.var[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn batch_training_standardizes_per_channel() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..2 * 2 * 2 * 3).map(|i| ((i * 7) % 11) as f64).collect();
        let x = t.input(Tensor::new(vec![2, 2, 2, 3], data).unwrap()).unwrap();
        let (g, b) = affine(&mut t, 3, 1.0, 0.0);
        let (y, _) = t
            .batch_norm(x, g, b, 1e-12, &BatchNormState::new(3, 0.9), true)
            .unwrap();
        let y = t.value(y);
        for k in 0..3 {
            let col: Vec<f64> = y.data().chunks(3).map(|r| r[k]).collect();
            let m = col.iter().sum::<f64>() / 8.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_inference_uses_running_stats() {
        let mut t = Tape::new();
        let x = t.input(Tensor::full(vec![1, 1, 1, 1], 4.0)).unwrap();
        let (g, b) = affine(&mut t, 1, 1.0, 0.0);
        let state = BatchNormState {
            mean: vec![2.0],
            var: vec![4.0],
            momentum: 0.9,
        };
        let (y, next) = t.batch_norm(x, g, b, 1e-12, &state, false).unwrap();
        assert!(next.is_none());
        assert!((t.value(y).item() - 1.0).abs() < 1e-9);
    }
}
