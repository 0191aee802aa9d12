//! The bilinear selective scan as a single tape op.
//!
//! Per batch item `b` and channel `j`, with `M_t = I - Δ_t/2·A` and
//! `P_t = I + Δ_t/2·A`:
//!
//! ```text
//! x_t = M_t⁻¹ (P_t x_{t-1} + Δ_t B_t u_t),    y_t = C_t·x_t + D_j u_t
//! ```
//!
//! The backward pass replays the stored states in reverse; with
//! `r_t = M_t⁻ᵀ ∂L/∂x_t`:
//!
//! ```text
//! ∂L/∂x_{t-1} += P_tᵀ r_t
//! ∂L/∂Δ_t      = r_tᵀ (A (x_{t-1} + x_t) / 2 + B_t u_t)
//! ∂L/∂B_t     += Δ_t u_t r_t
//! ∂L/∂u_t      = Δ_t (B_t·r_t) + D_j ∂L/∂y_t
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tensor::tape::BackwardArgs;
use crate::tensor::{Tape, Tensor, Var};

/// State matrix in a form the inner loops can use directly.
#[derive(Clone)]
struct StateMatrix {
    n: usize,
    /// Row-major.
    a: Vec<f64>,
    lower: bool,
}

impl StateMatrix {
    fn new(a: &DMatrix<f64>) -> Self {
        let n = a.nrows();
        let mut rows = vec![0.0; n * n];
        let mut lower = true;
        for i in 0..n {
            for j in 0..n {
                rows[i * n + j] = a[(i, j)];
                if j > i && a[(i, j)] != 0.0 {
                    lower = false;
                }
            }
        }
        StateMatrix { n, a: rows, lower }
    }

    /// `x_new = M⁻¹(P x + Δ·bu)` where `bu = B·u`.
    fn forward(&self, dt: f64, x: &[f64], b: &[f64], u: f64, out: &mut [f64]) {
        let n = self.n;
        let h = dt / 2.0;
        let mut z = vec![0.0; n];
        for i in 0..n {
            let row = &self.a[i * n..(i + 1) * n];
            let cols = if self.lower { i + 1 } else { n };
            let ax: f64 = row[..cols].iter().zip(&x[..cols]).map(|(a, x)| a * x).sum();
            z[i] = x[i] + h * ax + dt * b[i] * u;
        }
        if self.lower {
            for i in 0..n {
                let row = &self.a[i * n..(i + 1) * n];
                let acc: f64 = row[..i].iter().zip(&out[..i]).map(|(a, v)| a * v).sum();
                out[i] = (z[i] + h * acc) / (1.0 - h * row[i]);
            }
        } else {
            let m = self.m(h);
            let sol = m.lu().solve(&DVector::from_vec(z)).expect("I - Δ/2·A invertible");
            out.copy_from_slice(sol.as_slice());
        }
    }

    /// Solves `Mᵀ r = g`.
    fn solve_transposed(&self, dt: f64, g: &[f64], r: &mut [f64]) {
        let n = self.n;
        let h = dt / 2.0;
        if self.lower {
            for i in (0..n).rev() {
                let mut acc = 0.0;
                for k in i + 1..n {
                    acc += self.a[k * n + i] * r[k];
                }
                r[i] = (g[i] + h * acc) / (1.0 - h * self.a[i * n + i]);
            }
        } else {
            let mt = self.m(h).transpose();
            let sol = mt
                .lu()
                .solve(&DVector::from_column_slice(g))
                .expect("I - Δ/2·A invertible");
            r.copy_from_slice(sol.as_slice());
        }
    }

    fn m(&self, h: f64) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |i, j| (i == j) as u8 as f64 - h * self.a[i * n + j])
    }

    /// `v ↦ Aᵀ v` added into `out` with weight `w`.
    fn add_at_v(&self, v: &[f64], w: f64, out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let vi = v[i] * w;
            if vi == 0.0 {
                continue;
            }
            let row = &self.a[i * n..(i + 1) * n];
            let cols = if self.lower { i + 1 } else { n };
            for j in 0..cols {
                out[j] += row[j] * vi;
            }
        }
    }

    /// `rᵀ A s`.
    fn bilinear(&self, r: &[f64], s: &[f64]) -> f64 {
        let n = self.n;
        let mut acc = 0.0;
        for i in 0..n {
            if r[i] == 0.0 {
                continue;
            }
            let row = &self.a[i * n..(i + 1) * n];
            let cols = if self.lower { i + 1 } else { n };
            acc += r[i] * row[..cols].iter().zip(&s[..cols]).map(|(a, s)| a * s).sum::<f64>();
        }
        acc
    }
}

impl Tape {
    /// Selective scan over `u: [N, L, D]` with step sizes `delta: [N, L, D]`,
    /// input-dependent `b, c: [N, L, n]`, optional skip `d_skip: [D]` and a
    /// fixed state matrix `a: n×n`. Returns `y: [N, L, D]`.
    pub fn ssm_scan(
        &mut self,
        u: Var,
        delta: Var,
        b: Var,
        c: Var,
        d_skip: Option<Var>,
        a: &DMatrix<f64>,
    ) -> Result<Var> {
        let &[nb, l, d] = self.shape(u) else {
            return Err(Error::shape(format!("ssm_scan input {:?}", self.shape(u))));
        };
        let n = a.nrows();
        if a.ncols() != n || n == 0 {
            return Err(Error::shape("ssm_scan: state matrix must be square"));
        }
        if self.shape(delta) != [nb, l, d] {
            return Err(Error::shape(format!("ssm_scan step sizes {:?}", self.shape(delta))));
        }
        if self.shape(b) != [nb, l, n] || self.shape(c) != [nb, l, n] {
            return Err(Error::shape(format!(
                "ssm_scan B {:?} / C {:?} for state dim {n}",
                self.shape(b),
                self.shape(c)
            )));
        }
        if let Some(ds) = d_skip {
            if self.shape(ds) != [d] {
                return Err(Error::shape(format!("ssm_scan skip {:?}", self.shape(ds))));
            }
        }
        if let Some(bad) = self.value(delta).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::invalid(format!("ssm_scan step size must be > 0, got {bad}")));
        }
        let sm = StateMatrix::new(a);
        if !sm.lower {
            for &dt in self.value(delta).data() {
                if !sm.m(dt / 2.0).is_invertible() {
                    return Err(Error::Singular(format!("I - Δ/2·A at Δ = {dt}")));
                }
            }
        }

        let uv = self.value(u).data();
        let dv = self.value(delta).data();
        let bv = self.value(b).data();
        let cv = self.value(c).data();
        let skip: Option<&[f64]> = d_skip.map(|v| self.value(v).data());
        // states[((b·L + t)·D + j)·n ..] = x_t for channel j
        let mut states = vec![0.0; nb * l * d * n];
        let mut y = vec![0.0; nb * l * d];
        let zero = vec![0.0; n];
        for bi in 0..nb {
            for t in 0..l {
                let row = bi * l + t;
                let bt = &bv[row * n..(row + 1) * n];
                let ct = &cv[row * n..(row + 1) * n];
                for j in 0..d {
                    let e = row * d + j;
                    let (before, rest) = states.split_at_mut(e * n);
                    let prev: &[f64] = if t == 0 { &zero } else { &before[(e - d) * n..(e - d + 1) * n] };
                    let cur = &mut rest[..n];
                    sm.forward(dv[e], prev, bt, uv[e], cur);
                    let mut yv: f64 = ct.iter().zip(cur.iter()).map(|(c, x)| c * x).sum();
                    if let Some(s) = skip {
                        yv += s[j] * uv[e];
                    }
                    y[e] = yv;
                }
            }
        }
        let out = Tensor::new(vec![nb, l, d], y)?;
        let mut inputs = vec![u, delta, b, c];
        if let Some(ds) = d_skip {
            inputs.push(ds);
        }
        self.push(
            "ssm_scan",
            out,
            &inputs,
            Box::new(move |args: &BackwardArgs| {
                let g = args.grad.data();
                let uv = args.inputs[0].data();
                let dv = args.inputs[1].data();
                let bv = args.inputs[2].data();
                let cv = args.inputs[3].data();
                let skip = args.inputs.get(4).map(|t| t.data());
                let mut gu = vec![0.0; uv.len()];
                let mut gd = vec![0.0; dv.len()];
                let mut gb = vec![0.0; bv.len()];
                let mut gc = vec![0.0; cv.len()];
                let mut gskip = vec![0.0; d];
                let mut carry = vec![0.0; nb * d * n];
                let mut gx = vec![0.0; n];
                let mut r = vec![0.0; n];
                let mut mid = vec![0.0; n];
                for bi in 0..nb {
                    for t in (0..l).rev() {
                        let row = bi * l + t;
                        let bt = &bv[row * n..(row + 1) * n];
                        let ct = &cv[row * n..(row + 1) * n];
                        for j in 0..d {
                            let e = row * d + j;
                            let gy = g[e];
                            let cur = &states[e * n..(e + 1) * n];
                            let prev: &[f64] = if t == 0 { &zero } else { &states[(e - d) * n..(e - d + 1) * n] };
                            let cj = &mut carry[(bi * d + j) * n..(bi * d + j + 1) * n];
                            for k in 0..n {
                                gx[k] = gy * ct[k] + cj[k];
                                gc[row * n + k] += gy * cur[k];
                            }
                            if let Some(s) = skip {
                                gu[e] += s[j] * gy;
                                gskip[j] += gy * uv[e];
                            }
                            if gx.iter().all(|&v| v == 0.0) {
                                cj.iter_mut().for_each(|v| *v = 0.0);
                                continue;
                            }
                            let dt = dv[e];
                            sm.solve_transposed(dt, &gx, &mut r);
                            let rb: f64 = r.iter().zip(bt).map(|(r, b)| r * b).sum();
                            for k in 0..n {
                                mid[k] = prev[k] + cur[k];
                                gb[row * n + k] += dt * uv[e] * r[k];
                            }
                            gd[e] = 0.5 * sm.bilinear(&r, &mid) + rb * uv[e];
                            gu[e] += dt * rb;
                            cj.copy_from_slice(&r);
                            sm.add_at_v(&r, dt / 2.0, cj);
                        }
                    }
                }
                let shape = |i: usize| args.inputs[i].shape().to_vec();
                let mut out = vec![
                    args.needs[0].then(|| Tensor::new(shape(0), gu).expect("shape")),
                    args.needs[1].then(|| Tensor::new(shape(1), gd).expect("shape")),
                    args.needs[2].then(|| Tensor::new(shape(2), gb).expect("shape")),
                    args.needs[3].then(|| Tensor::new(shape(3), gc).expect("shape")),
                ];
                if args.inputs.len() == 5 {
                    out.push(args.needs[4].then(|| Tensor::from_vec(gskip)));
                }
                out
            }),
        )
    }
}
