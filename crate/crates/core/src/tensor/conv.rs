use serde::{Deserialize, Serialize};

use super::tape::BackwardArgs;
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    /// Weight `[kh, kw, Cin, Cout]`.
    Standard,
    /// Learned upsampling; weight `[kh, kw, Cin, Cout]`, output extent `H·s` under same padding.
    Transpose,
    /// Per-channel kernels; weight `[kh, kw, 1, C]`.
    Depthwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: Padding,
    pub mode: ConvMode,
}

impl ConvSpec {
    pub fn same() -> Self {
        ConvSpec {
            stride: 1,
            padding: Padding::Same,
            mode: ConvMode::Standard,
        }
    }

    pub fn transpose(stride: usize) -> Self {
        ConvSpec {
            stride,
            padding: Padding::Same,
            mode: ConvMode::Transpose,
        }
    }

    pub fn depthwise() -> Self {
        ConvSpec {
            stride: 1,
            padding: Padding::Same,
            mode: ConvMode::Depthwise,
        }
    }
}

/// Output extent and leading pad (gather modes) or leading crop (transpose)
/// along one spatial axis.
fn axis_geometry(input: usize, k: usize, s: usize, spec: &ConvSpec) -> Result<(usize, usize)> {
    match (spec.mode, spec.padding) {
        (ConvMode::Transpose, Padding::Same) => Ok((input * s, k.saturating_sub(s) / 2)),
        (ConvMode::Transpose, Padding::Valid) => Ok((input * s + k.saturating_sub(s), 0)),
        (_, Padding::Same) => {
            let out = input.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(input);
            Ok((out, total / 2))
        }
        (_, Padding::Valid) => {
            if input < k {
                return Err(Error::shape(format!(
                    "valid convolution: kernel {k} larger than extent {input}"
                )));
            }
            Ok(((input - k) / s + 1, 0))
        }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    pt: usize,
    pl: usize,
    s: usize,
}

impl Geometry {
    /// Input coordinate feeding output `o` through kernel tap `k` (gather modes).
    #[inline]
    fn src(o: usize, k: usize, s: usize, pad: usize, extent: usize) -> Option<usize> {
        let i = (o * s + k) as isize - pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }

    /// Output coordinate receiving input `i` through tap `k` (transpose).
    #[inline]
    fn dst(i: usize, k: usize, s: usize, crop: usize, extent: usize) -> Option<usize> {
        let o = (i * s + k) as isize - crop as isize;
        (o >= 0 && (o as usize) < extent).then_some(o as usize)
    }
}

fn conv_forward(x: &[f64], wt: &[f64], g: Geometry, mode: ConvMode) -> Vec<f64> {
    let Geometry {
        n,
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        oh,
        ow,
        pt,
        pl,
        s,
    } = g;
    let mut out = vec![0.0; n * oh * ow * cout];
    match mode {
        ConvMode::Standard => {
            for b in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let o = ((b * oh + oy) * ow + ox) * cout;
                        let orow = &mut out[o..o + cout];
                        for ky in 0..kh {
                            let Some(iy) = Geometry::src(oy, ky, s, pt, h) else { continue };
                            for kx in 0..kw {
                                let Some(ix) = Geometry::src(ox, kx, s, pl, w) else { continue };
                                let xo = ((b * h + iy) * w + ix) * cin;
                                let wo = (ky * kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let xv = x[xo + ci];
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let wrow = &wt[wo + ci * cout..wo + (ci + 1) * cout];
                                    for (acc, wv) in orow.iter_mut().zip(wrow) {
                                        *acc += xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        ConvMode::Depthwise => {
            for b in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let o = ((b * oh + oy) * ow + ox) * cout;
                        let orow = &mut out[o..o + cout];
                        for ky in 0..kh {
                            let Some(iy) = Geometry::src(oy, ky, s, pt, h) else { continue };
                            for kx in 0..kw {
                                let Some(ix) = Geometry::src(ox, kx, s, pl, w) else { continue };
                                let xo = ((b * h + iy) * w + ix) * cin;
                                let wo = (ky * kw + kx) * cout;
                                for c in 0..cout {
                                    orow[c] += x[xo + c] * wt[wo + c];
                                }
                            }
                        }
                    }
                }
            }
        }
        ConvMode::Transpose => {
            for b in 0..n {
                for iy in 0..h {
                    for ix in 0..w {
                        let xo = ((b * h + iy) * w + ix) * cin;
                        for ky in 0..kh {
                            let Some(oy) = Geometry::dst(iy, ky, s, pt, oh) else { continue };
                            for kx in 0..kw {
                                let Some(ox) = Geometry::dst(ix, kx, s, pl, ow) else { continue };
                                let o = ((b * oh + oy) * ow + ox) * cout;
                                let wo = (ky * kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let xv = x[xo + ci];
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let wrow = &wt[wo + ci * cout..wo + (ci + 1) * cout];
                                    for (acc, wv) in out[o..o + cout].iter_mut().zip(wrow) {
                                        *acc += xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight)`, each only when requested.
fn conv_backward(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    g: Geometry,
    mode: ConvMode,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let Geometry {
        n,
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        oh,
        ow,
        pt,
        pl,
        s,
    } = g;
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = need_w.then(|| vec![0.0; wt.len()]);
    // Visits every (input pixel, output pixel, tap) triple once.
    let mut visit = |xo: usize, o: usize, tap: usize| {
        let grow = &gout[o..o + cout];
        match mode {
            ConvMode::Depthwise => {
                let wo = tap * cout;
                if let Some(gx) = gx.as_mut() {
                    for c in 0..cout {
                        gx[xo + c] += grow[c] * wt[wo + c];
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    for c in 0..cout {
                        gw[wo + c] += grow[c] * x[xo + c];
                    }
                }
            }
            _ => {
                let wo = tap * cin * cout;
                for ci in 0..cin {
                    let r = wo + ci * cout..wo + (ci + 1) * cout;
                    if let Some(gx) = gx.as_mut() {
                        gx[xo + ci] += grow.iter().zip(&wt[r.clone()]).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xv = x[xo + ci];
                        if xv != 0.0 {
                            for (acc, gv) in gw[r].iter_mut().zip(grow) {
                                *acc += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    };
    match mode {
        ConvMode::Standard | ConvMode::Depthwise => {
            for b in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let o = ((b * oh + oy) * ow + ox) * cout;
                        for ky in 0..kh {
                            let Some(iy) = Geometry::src(oy, ky, s, pt, h) else { continue };
                            for kx in 0..kw {
                                let Some(ix) = Geometry::src(ox, kx, s, pl, w) else { continue };
                                visit(((b * h + iy) * w + ix) * cin, o, ky * kw + kx);
                            }
                        }
                    }
                }
            }
        }
        ConvMode::Transpose => {
            for b in 0..n {
                for iy in 0..h {
                    for ix in 0..w {
                        let xo = ((b * h + iy) * w + ix) * cin;
                        for ky in 0..kh {
                            let Some(oy) = Geometry::dst(iy, ky, s, pt, oh) else { continue };
                            for kx in 0..kw {
                                let Some(ox) = Geometry::dst(ix, kx, s, pl, ow) else { continue };
                                visit(xo, ((b * oh + oy) * ow + ox) * cout, ky * kw + kx);
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

impl Tape {
    /// 2-D convolution over NHWC input. `bias`, when given, has shape `[Cout]`.
    pub fn convolve2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        if spec.stride < 1 {
            return Err(Error::invalid("convolution stride must be >= 1"));
        }
        let [n, h, wd, cin] = self.value(x).nhwc("convolve2d input")?;
        let &[kh, kw, wcin, cout] = self.value(w).shape() else {
            return Err(Error::shape(format!(
                "convolution weight must be [kh, kw, Cin, Cout], got {:?}",
                self.value(w).shape()
            )));
        };
        let expected_cin = if spec.mode == ConvMode::Depthwise { 1 } else { cin };
        if wcin != expected_cin || (spec.mode == ConvMode::Depthwise && cout != cin) {
            return Err(Error::shape(format!(
                "{:?} convolution: input has {cin} channels, weight is {:?}",
                spec.mode,
                self.value(w).shape()
            )));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::shape("empty convolution kernel"));
        }
        let (oh, pt) = axis_geometry(h, kh, spec.stride, &spec)?;
        let (ow, pl) = axis_geometry(wd, kw, spec.stride, &spec)?;
        let geom = Geometry {
            n,
            h,
            w: wd,
            cin,
            kh,
            kw,
            cout,
            oh,
            ow,
            pt,
            pl,
            s: spec.stride,
        };
        let out = conv_forward(self.value(x).data(), self.value(w).data(), geom, spec.mode);
        let out = Tensor::new(vec![n, oh, ow, cout], out)?;
        let mode = spec.mode;
        let y = self.push(
            "convolve2d",
            out,
            &[x, w],
            Box::new(move |a: &BackwardArgs| {
                let (gx, gw) = conv_backward(
                    a.inputs[0].data(),
                    a.inputs[1].data(),
                    a.grad.data(),
                    geom,
                    mode,
                    a.needs[0],
                    a.needs[1],
                );
                vec![
                    gx.map(|g| Tensor::new(a.inputs[0].shape().to_vec(), g).expect("shape")),
                    gw.map(|g| Tensor::new(a.inputs[1].shape().to_vec(), g).expect("shape")),
                ]
            }),
        )?;
        match bias {
            Some(b) => self.add_channel(y, b),
            None => Ok(y),
        }
    }
}
