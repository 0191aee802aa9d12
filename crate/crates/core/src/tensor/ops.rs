use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tape::BackwardArgs;
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
    Sigmoid,
    Softplus,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softplus" => Ok(Activation::Softplus),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    /// d/dx evaluated from the input.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Sum over every axis except the last.
fn sum_to_last(t: &Tensor) -> Tensor {
    let c = t.channels();
    let mut out = vec![0.0; c];
    for row in t.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_vec(out)
}

impl Tape {
    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(
            "activation",
            out,
            &[x],
            Box::new(move |a: &BackwardArgs| {
                vec![Some(zip_map(a.inputs[0], a.grad, |x, g| {
                    g * kind.derivative(x)
                }))]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Silu, x)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(
            "add",
            out,
            &[a, b],
            Box::new(|a: &BackwardArgs| {
                vec![
                    a.needs[0].then(|| a.grad.clone()),
                    a.needs[1].then(|| a.grad.clone()),
                ]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(
            "sub",
            out,
            &[a, b],
            Box::new(|a: &BackwardArgs| {
                vec![
                    a.needs[0].then(|| a.grad.clone()),
                    a.needs[1].then(|| a.grad.map(|g| -g)),
                ]
            }),
        )
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(
            "mul",
            out,
            &[a, b],
            Box::new(|a: &BackwardArgs| {
                vec![
                    a.needs[0].then(|| zip_map(a.grad, a.inputs[1], |g, y| g * y)),
                    a.needs[1].then(|| zip_map(a.grad, a.inputs[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push(
            "exp",
            out,
            &[x],
            Box::new(|a: &BackwardArgs| vec![Some(zip_map(a.grad, a.output, |g, y| g * y))]),
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(
            "scale",
            out,
            &[x],
            Box::new(move |a: &BackwardArgs| vec![Some(a.grad.map(|g| g * factor))]),
        )
    }

    /// `x + b` with `b` broadcast along every axis but the last.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.channels();
        if bv.shape() != [c] {
            return Err(Error::shape(format!(
                "add_channel: bias {:?} for {} channels",
                bv.shape(),
                c
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, v) in row.iter_mut().zip(bv.data()) {
                *o += v;
            }
        }
        self.push(
            "add_channel",
            out,
            &[x, b],
            Box::new(|a: &BackwardArgs| {
                vec![
                    a.needs[0].then(|| a.grad.clone()),
                    a.needs[1].then(|| sum_to_last(a.grad)),
                ]
            }),
        )
    }

    /// `x ⊙ s` with `s` of shape `[C]` broadcast along every axis but the last.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let c = xv.channels();
        if sv.shape() != [c] {
            return Err(Error::shape(format!(
                "mul_channel: scale {:?} for {} channels",
                sv.shape(),
                c
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, v) in row.iter_mut().zip(sv.data()) {
                *o *= v;
            }
        }
        self.push(
            "mul_channel",
            out,
            &[x, s],
            Box::new(move |a: &BackwardArgs| {
                let gx = a.needs[0].then(|| {
                    let mut g = a.grad.clone();
                    for row in g.data_mut().chunks_mut(c) {
                        for (o, v) in row.iter_mut().zip(a.inputs[1].data()) {
                            *o *= v;
                        }
                    }
                    g
                });
                let gs = a.needs[1].then(|| {
                    let mut out = vec![0.0; c];
                    for (grow, xrow) in a.grad.data().chunks(c).zip(a.inputs[0].data().chunks(c)) {
                        for k in 0..c {
                            out[k] += grow[k] * xrow[k];
                        }
                    }
                    Tensor::from_vec(out)
                });
                vec![gx, gs]
            }),
        )
    }

    /// `x[..., c] * r[..., 0]`: a one-channel map broadcast over channels.
    pub fn mul_broadcast(&mut self, x: Var, r: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(r));
        let c = xv.channels();
        let expected: Vec<usize> = xv.shape()[..xv.rank() - 1]
            .iter()
            .copied()
            .chain([1])
            .collect();
        if rv.shape() != expected.as_slice() {
            return Err(Error::shape(format!(
                "mul_broadcast: map {:?} for input {:?}",
                rv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for (row, &m) in out.data_mut().chunks_mut(c).zip(rv.data()) {
            for o in row {
                *o *= m;
            }
        }
        self.push(
            "mul_broadcast",
            out,
            &[x, r],
            Box::new(move |a: &BackwardArgs| {
                let gx = a.needs[0].then(|| {
                    let mut g = a.grad.clone();
                    for (row, &m) in g.data_mut().chunks_mut(c).zip(a.inputs[1].data()) {
                        for o in row {
                            *o *= m;
                        }
                    }
                    g
                });
                let gr = a.needs[1].then(|| {
                    let data = a
                        .grad
                        .data()
                        .chunks(c)
                        .zip(a.inputs[0].data().chunks(c))
                        .map(|(g, x)| g.iter().zip(x).map(|(g, x)| g * x).sum())
                        .collect();
                    Tensor::new(a.inputs[1].shape().to_vec(), data).expect("shape")
                });
                vec![gx, gr]
            }),
        )
    }

    /// Affine map over the last axis: `x[..., Cin] · w[Cin, Cout] + b[Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let cin = xv.channels();
        let &[wcin, cout] = wv.shape() else {
            return Err(Error::shape(format!("linear weight {:?}", wv.shape())));
        };
        if wcin != cin {
            return Err(Error::shape(format!(
                "linear: input has {cin} channels, weight expects {wcin}"
            )));
        }
        let rows = xv.len() / cin.max(1);
        let mut out = vec![0.0; rows * cout];
        for (xrow, orow) in xv.data().chunks(cin).zip(out.chunks_mut(cout)) {
            for (i, &xi) in xrow.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wrow = &wv.data()[i * cout..(i + 1) * cout];
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += xi * wv;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = cout;
        let out = Tensor::new(shape, out)?;
        let y = self.push(
            "linear",
            out,
            &[x, w],
            Box::new(move |a: &BackwardArgs| {
                let (x, w, g) = (a.inputs[0], a.inputs[1], a.grad);
                let gx = a.needs[0].then(|| {
                    let mut gx = vec![0.0; x.len()];
                    for (grow, gxrow) in g.data().chunks(cout).zip(gx.chunks_mut(cin)) {
                        for (i, o) in gxrow.iter_mut().enumerate() {
                            let wrow = &w.data()[i * cout..(i + 1) * cout];
                            *o = grow.iter().zip(wrow).map(|(g, w)| g * w).sum();
                        }
                    }
                    Tensor::new(x.shape().to_vec(), gx).expect("shape")
                });
                let gw = a.needs[1].then(|| {
                    let mut gw = vec![0.0; cin * cout];
                    for (grow, xrow) in g.data().chunks(cout).zip(x.data().chunks(cin)) {
                        for (i, &xi) in xrow.iter().enumerate() {
                            let gwrow = &mut gw[i * cout..(i + 1) * cout];
                            for (o, g) in gwrow.iter_mut().zip(grow) {
                                *o += xi * g;
                            }
                        }
                    }
                    Tensor::new(vec![cin, cout], gw).expect("shape")
                });
                vec![gx, gw]
            }),
        )?;
        match b {
            Some(b) => self.add_channel(y, b),
            None => Ok(y),
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(
            "reshape",
            out,
            &[x],
            Box::new(|a: &BackwardArgs| {
                vec![Some(
                    a.grad
                        .clone()
                        .reshape(a.inputs[0].shape().to_vec())
                        .expect("same size"),
                )]
            }),
        )
    }

    /// Repeats `x` along new leading axes: `[k..]` becomes `[lead.., k..]`.
    pub fn expand_leading(&mut self, x: Var, lead: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let reps: usize = lead.iter().product();
        let mut data = Vec::with_capacity(reps * xv.len());
        for _ in 0..reps {
            data.extend_from_slice(xv.data());
        }
        let shape: Vec<usize> = lead.iter().chain(xv.shape()).copied().collect();
        let out = Tensor::new(shape, data)?;
        self.push(
            "expand_leading",
            out,
            &[x],
            Box::new(|a: &BackwardArgs| {
                let n = a.inputs[0].len();
                let mut acc = vec![0.0; n];
                for chunk in a.grad.data().chunks(n.max(1)) {
                    for (o, g) in acc.iter_mut().zip(chunk) {
                        *o += g;
                    }
                }
                vec![Some(
                    Tensor::new(a.inputs[0].shape().to_vec(), acc).expect("shape"),
                )]
            }),
        )
    }

    /// Reorders axis 1 of a `[N, L, C]` tensor: `out[n, i] = x[n, perm[i]]`.
    pub fn permute_rows(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let &[n, l, c] = xv.shape() else {
            return Err(Error::shape(format!("permute_rows on {:?}", xv.shape())));
        };
        if perm.len() != l || perm.iter().any(|&p| p >= l) {
            return Err(Error::invalid("permute_rows: bad permutation"));
        }
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for (i, &p) in perm.iter().enumerate() {
                let src = (b * l + p) * c;
                let dst = (b * l + i) * c;
                out[dst..dst + c].copy_from_slice(&xv.data()[src..src + c]);
            }
        }
        let out = Tensor::new(vec![n, l, c], out)?;
        let perm = perm.to_vec();
        self.push(
            "permute_rows",
            out,
            &[x],
            Box::new(move |a: &BackwardArgs| {
                let mut gx = vec![0.0; a.grad.len()];
                for b in 0..n {
                    for (i, &p) in perm.iter().enumerate() {
                        let src = (b * l + i) * c;
                        let dst = (b * l + p) * c;
                        for k in 0..c {
                            gx[dst + k] += a.grad.data()[src + k];
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, l, c], gx).expect("shape"))]
            }),
        )
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(
            "sum",
            out,
            &[x],
            Box::new(|a: &BackwardArgs| {
                let g = a.grad.item();
                vec![Some(Tensor::full(a.inputs[0].shape().to_vec(), g))]
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Numerically stable softmax over the trailing axis.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.channels();
        if c == 0 {
            return Err(Error::shape("softmax over zero channels"));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(
            "softmax_channel",
            out,
            &[x],
            Box::new(move |a: &BackwardArgs| {
                let mut gx = a.grad.clone();
                for (grow, prow) in gx.data_mut().chunks_mut(c).zip(a.output.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(prow).map(|(g, p)| g * p).sum();
                    for (g, p) in grow.iter_mut().zip(prow) {
                        *g = p * (*g - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Concatenates two NHWC maps along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, h, w, ca] = self.value(a).nhwc("concat_channels")?;
        let [nb, hb, wb, cb] = self.value(b).nhwc("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(format!(
                "concat_channels: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let c = ca + cb;
        let mut out = Vec::with_capacity(n * h * w * c);
        for (ra, rb) in self
            .value(a)
            .data()
            .chunks(ca.max(1))
            .zip(self.value(b).data().chunks(cb.max(1)))
        {
            out.extend_from_slice(&ra[..ca]);
            out.extend_from_slice(&rb[..cb]);
        }
        let out = Tensor::new(vec![n, h, w, c], out)?;
        self.push(
            "concat_channels",
            out,
            &[a, b],
            Box::new(move |args: &BackwardArgs| {
                let split = |lo: usize, width: usize| {
                    let mut g = Vec::with_capacity(n * h * w * width);
                    for row in args.grad.data().chunks(c) {
                        g.extend_from_slice(&row[lo..lo + width]);
                    }
                    Tensor::new(vec![n, h, w, width], g).expect("shape")
                };
                vec![
                    args.needs[0].then(|| split(0, ca)),
                    args.needs[1].then(|| split(ca, cb)),
                ]
            }),
        )
    }

    /// Center crop to `target_h × target_w` with offsets `floor((src - tgt) / 2)`.
    pub fn crop_center(&mut self, x: Var, target_h: usize, target_w: usize) -> Result<Var> {
        let [n, h, w, c] = self.value(x).nhwc("crop_center")?;
        if target_h > h || target_w > w {
            return Err(Error::shape(format!(
                "crop target {target_h}x{target_w} larger than source {h}x{w}"
            )));
        }
        let (oh, ow) = crop_offsets(h, w, target_h, target_w);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * target_h * target_w * c);
        for b in 0..n {
            for i in 0..target_h {
                let start = ((b * h + i + oh) * w + ow) * c;
                out.extend_from_slice(&xv.data()[start..start + target_w * c]);
            }
        }
        let out = Tensor::new(vec![n, target_h, target_w, c], out)?;
        self.push(
            "crop_center",
            out,
            &[x],
            Box::new(move |a: &BackwardArgs| {
                let mut gx = vec![0.0; n * h * w * c];
                for b in 0..n {
                    for i in 0..target_h {
                        let dst = ((b * h + i + oh) * w + ow) * c;
                        let src = (b * target_h + i) * target_w * c;
                        gx[dst..dst + target_w * c]
                            .copy_from_slice(&a.grad.data()[src..src + target_w * c]);
                    }
                }
                vec![Some(Tensor::new(vec![n, h, w, c], gx).expect("shape"))]
            }),
        )
    }

    /// Max pooling with a square window; trailing rows/columns that do not
    /// fill a window are dropped (floor).
    pub fn pool_max2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        if window == 0 || stride == 0 {
            return Err(Error::invalid("pool window and stride must be >= 1"));
        }
        let [n, h, w, c] = self.value(x).nhwc("pool_max2d")?;
        if h < window || w < window {
            return Err(Error::shape(format!("pool window {window} exceeds {h}x{w}")));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let xv = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; n * oh * ow * c];
        let mut arg = vec![0usize; out.len()];
        for b in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    let o = ((b * oh + i) * ow + j) * c;
                    for di in 0..window {
                        for dj in 0..window {
                            let src = ((b * h + i * stride + di) * w + j * stride + dj) * c;
                            for k in 0..c {
                                if xv[src + k] > out[o + k] {
                                    out[o + k] = xv[src + k];
                                    arg[o + k] = src + k;
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, oh, ow, c], out)?;
        self.push(
            "pool_max2d",
            out,
            &[x],
            Box::new(move |a: &BackwardArgs| {
                let mut gx = vec![0.0; a.inputs[0].len()];
                for (&src, g) in arg.iter().zip(a.grad.data()) {
                    gx[src] += g;
                }
                vec![Some(
                    Tensor::new(a.inputs[0].shape().to_vec(), gx).expect("shape"),
                )]
            }),
        )
    }

    /// Mean cross-entropy `-Σ_c t_c log max(p_c, floor)` over all pixels.
    pub fn cross_entropy(&mut self, probs: Var, target: &Tensor, floor: f64) -> Result<Var> {
        let pv = self.value(probs);
        same_shape(pv, target, "cross_entropy")?;
        let c = pv.channels();
        let pixels = (pv.len() / c.max(1)).max(1) as f64;
        let loss: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .filter(|(_, &t)| t != 0.0)
            .map(|(&p, &t)| -t * p.max(floor).ln())
            .sum::<f64>()
            / pixels;
        let target = target.clone();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            &[probs],
            Box::new(move |a: &BackwardArgs| {
                let g = a.grad.item() / pixels;
                let data = a
                    .inputs[0]
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| if t != 0.0 && p > floor { -g * t / p } else { 0.0 })
                    .collect();
                vec![Some(
                    Tensor::new(a.inputs[0].shape().to_vec(), data).expect("shape"),
                )]
            }),
        )
    }

    /// Soft Dice loss `1 - (2Σpq + eps) / (Σp + Σq + eps)` over the channels
    /// from `first_channel` on.
    pub fn soft_dice(
        &mut self,
        probs: Var,
        target: &Tensor,
        first_channel: usize,
        eps: f64,
    ) -> Result<Var> {
        let pv = self.value(probs);
        same_shape(pv, target, "soft_dice")?;
        let c = pv.channels();
        let (mut inter, mut sp, mut sq) = (0.0, 0.0, 0.0);
        for (prow, qrow) in pv.data().chunks(c).zip(target.data().chunks(c)) {
            for k in first_channel..c {
                inter += prow[k] * qrow[k];
                sp += prow[k];
                sq += qrow[k];
            }
        }
        let num = 2.0 * inter + eps;
        let den = sp + sq + eps;
        let target = target.clone();
        self.push(
            "soft_dice",
            Tensor::scalar(1.0 - num / den),
            &[probs],
            Box::new(move |a: &BackwardArgs| {
                let g = a.grad.item();
                let mut gx = vec![0.0; a.inputs[0].len()];
                for (grow, qrow) in gx.chunks_mut(c).zip(target.data().chunks(c)) {
                    for k in first_channel..c {
                        // d/dp [1 - num/den] = -(2q·den - num) / den²
                        grow[k] = -g * (2.0 * qrow[k] * den - num) / (den * den);
                    }
                }
                vec![Some(
                    Tensor::new(a.inputs[0].shape().to_vec(), gx).expect("shape"),
                )]
            }),
        )
    }
}

pub(crate) fn crop_offsets(h: usize, w: usize, th: usize, tw: usize) -> (usize, usize) {
    ((h - th) / 2, (w - tw) / 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(kind: Activation, xs: &[f64]) -> Vec<f64> {
        let mut t = Tape::new();
        let x = t.input(Tensor::from_vec(xs.to_vec())).unwrap();
        let y = t.activation(kind, x).unwrap();
        t.value(y).data().to_vec()
    }

    #[test]
    fn activation_values() {
        assert_eq!(run(Activation::Relu, &[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(run(Activation::Sigmoid, &[0.0]), vec![0.5]);
        let silu = run(Activation::Silu, &[1.0])[0];
        assert!((silu - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((silu - 0.7310586).abs() < 1e-7);
        assert!((run(Activation::Softplus, &[800.0])[0] - 800.0).abs() < 1e-12);
        assert!("gelu".parse::<Activation>().is_err());
        assert_eq!("silu".parse::<Activation>().unwrap(), Activation::Silu);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t
            .input(Tensor::new(vec![1, 1, 3, 2], vec![0.0, 0.0, 1000.0, 0.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let p = t.softmax_channel(x).unwrap();
        let p = t.value(p).data();
        assert_eq!(&p[..2], &[0.5, 0.5]);
        assert!((p[2] - 1.0).abs() < 1e-15 && p[3] < 1e-300);
        let e = std::f64::consts::E;
        assert!((p[4] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[4] - 0.7311).abs() < 1e-4 && (p[5] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn pool_crop_concat() {
        let mut t = Tape::new();
        let x = t
            .input(Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let p = t.pool_max2d(x, 2, 2).unwrap();
        assert_eq!(t.value(p).data(), &[4.0]);

        let src: Vec<f64> = (0..25).map(f64::from).collect();
        let x = t.input(Tensor::new(vec![1, 5, 5, 1], src).unwrap()).unwrap();
        let c = t.crop_center(x, 3, 3).unwrap();
        assert_eq!(
            t.value(c).data(),
            &[6.0, 7.0, 8.0, 11.0, 12.0, 13.0, 16.0, 17.0, 18.0]
        );
        assert!(t.crop_center(x, 6, 3).is_err());
        let same = t.crop_center(x, 5, 5).unwrap();
        assert_eq!(t.value(same), t.value(x));

        let a = t.input(Tensor::zeros(vec![1, 2, 2, 3])).unwrap();
        let b = t.input(Tensor::ones(vec![1, 2, 2, 5])).unwrap();
        let cat = t.concat_channels(a, b).unwrap();
        assert_eq!(t.shape(cat), &[1, 2, 2, 8]);
        let bad = t.input(Tensor::ones(vec![1, 3, 2, 5])).unwrap();
        assert!(t.concat_channels(a, bad).is_err());
    }

    #[test]
    fn odd_extent_pools_floor() {
        let mut t = Tape::new();
        let x = t.input(Tensor::ones(vec![1, 5, 7, 2])).unwrap();
        let p = t.pool_max2d(x, 2, 2).unwrap();
        assert_eq!(t.shape(p), &[1, 2, 3, 2]);
    }

    #[test]
    fn simple_backward_examples() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![2.0])).unwrap();
        let y = t.relu(x).unwrap();
        let l = t.sum_all(y).unwrap();
        assert_eq!(t.backward(l).unwrap().wrt(x, &t).data(), &[1.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![0.0])).unwrap();
        let y = t.sigmoid(x).unwrap();
        let l = t.sum_all(y).unwrap();
        assert_eq!(t.backward(l).unwrap().wrt(x, &t).data(), &[0.25]);
    }

    #[test]
    fn non_scalar_loss_and_disconnected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let z = t.param(Tensor::from_vec(vec![5.0])).unwrap();
        let y = t.relu(x).unwrap();
        assert!(t.backward(y).is_err());
        let l = t.sum_all(y).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(z, &t).data(), &[0.0]);
    }

    #[test]
    fn non_finite_rejected() {
        let mut t = Tape::new();
        assert!(t.input(Tensor::from_vec(vec![f64::NAN])).is_err());
        let x = t.input(Tensor::from_vec(vec![1e300])).unwrap();
        assert!(matches!(t.scale(x, 1e300), Err(Error::NonFinite(_))));
    }
}
