//! Vision state-space module and the vision Mamba layer.
//!
//! Feature maps are `[N, H, W, C]`; a `[N, L, C]` sequence is treated as a
//! `1 × L` map. The depthwise convolution runs on the unflattened grid, the
//! state-space scan on cross-scan flattenings of it.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, Initializer, LayerNorm, Linear, ParamId, ParamStore};
use crate::ssm::hippo_legs;
use crate::tensor::{ConvSpec, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SsmMode {
    /// One learned step size per channel, shared `B`, `C`.
    Lti,
    /// Step size, `B` and `C` computed from the input at every position.
    #[default]
    Selective,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VSSConfig {
    pub channels: usize,
    /// Channel expansion factor λ; `λ·C` must be integral.
    pub expansion: f64,
    pub state_dim: usize,
    /// Cross-scan directions: 1, 2 or 4.
    pub directions: usize,
    pub dwconv_kernel: usize,
    pub mode: SsmMode,
}

impl VSSConfig {
    pub fn new(channels: usize) -> Self {
        VSSConfig {
            channels,
            expansion: 2.0,
            state_dim: 8,
            directions: 4,
            dwconv_kernel: 3,
            mode: SsmMode::Selective,
        }
    }

    /// `λ·C`.
    pub fn inner(&self) -> Result<usize> {
        let v = self.expansion * self.channels as f64;
        if !(v >= 1.0) || (v - v.round()).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "expansion {} times {} channels is not a positive integer",
                self.expansion, self.channels
            )));
        }
        Ok(v.round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.inner()?;
        if self.state_dim < 1 {
            return Err(Error::invalid("state_dim must be >= 1"));
        }
        if ![1, 2, 4].contains(&self.directions) {
            return Err(Error::invalid(format!(
                "scan directions must be 1, 2 or 4, got {}",
                self.directions
            )));
        }
        if self.dwconv_kernel % 2 == 0 {
            return Err(Error::invalid("dwconv kernel must be odd"));
        }
        Ok(())
    }
}

/// Sequence order of a direction: position `i` of the flattened sequence
/// reads grid cell `order[i]` (row-major index).
///
/// 0: row-major, 1: row-major reversed, 2: column-major, 3: column-major reversed.
pub fn scan_order(h: usize, w: usize, direction: usize) -> Result<Vec<usize>> {
    if h * w == 0 {
        return Err(Error::shape("cross-scan of an empty map"));
    }
    let row_major: Vec<usize> = (0..h * w).collect();
    let col_major: Vec<usize> = (0..h * w).map(|i| (i % h) * w + i / h).collect();
    match direction {
        0 => Ok(row_major),
        1 => Ok(row_major.into_iter().rev().collect()),
        2 => Ok(col_major),
        3 => Ok(col_major.into_iter().rev().collect()),
        _ => Err(Error::invalid(format!("scan direction {direction} not in 0..4"))),
    }
}

fn inverse(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

/// Flattens `[N, H, W, C]` into `[N, H·W, C]` along `direction`.
pub fn scan_2d(feature: &Tensor, direction: usize) -> Result<Tensor> {
    let [n, h, w, c] = feature.nhwc("scan_2d")?;
    let order = scan_order(h, w, direction)?;
    let mut out = Vec::with_capacity(feature.len());
    for b in 0..n {
        for &cell in &order {
            let src = (b * h * w + cell) * c;
            out.extend_from_slice(&feature.data()[src..src + c]);
        }
    }
    Tensor::new(vec![n, h * w, c], out)
}

/// Inverts each direction's flattening and averages the maps. `seqs[k]`
/// must come from direction `k`.
pub fn merge_2d(seqs: &[Tensor], h: usize, w: usize) -> Result<Tensor> {
    if seqs.is_empty() {
        return Err(Error::invalid("merge_2d of no sequences"));
    }
    let &[n, l, c] = seqs[0].shape() else {
        return Err(Error::shape(format!("merge_2d sequence {:?}", seqs[0].shape())));
    };
    if l != h * w {
        return Err(Error::shape(format!("sequence length {l} for a {h}x{w} map")));
    }
    let mut acc = vec![0.0; n * l * c];
    for (dir, s) in seqs.iter().enumerate() {
        if s.shape() != [n, l, c] {
            return Err(Error::shape("merge_2d sequences disagree"));
        }
        let order = scan_order(h, w, dir)?;
        for b in 0..n {
            for (i, &cell) in order.iter().enumerate() {
                let src = (b * l + i) * c;
                let dst = (b * l + cell) * c;
                for k in 0..c {
                    acc[dst + k] += s.data()[src + k];
                }
            }
        }
    }
    let k = seqs.len() as f64;
    acc.iter_mut().for_each(|v| *v /= k);
    Tensor::new(vec![n, h, w, c], acc)
}

impl Tape {
    /// Tape form of [`scan_2d`].
    pub fn scan_2d(&mut self, x: Var, direction: usize) -> Result<Var> {
        let [n, h, w, c] = self.value(x).nhwc("scan_2d")?;
        let order = scan_order(h, w, direction)?;
        let flat = self.reshape(x, &[n, h * w, c])?;
        if direction == 0 {
            return Ok(flat);
        }
        self.permute_rows(flat, &order)
    }

    /// Tape form of [`merge_2d`].
    pub fn merge_2d(&mut self, seqs: &[Var], h: usize, w: usize) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::invalid("merge_2d of no sequences"));
        }
        let mut acc: Option<Var> = None;
        for (dir, &s) in seqs.iter().enumerate() {
            let order = scan_order(h, w, dir)?;
            let back = if dir == 0 { s } else { self.permute_rows(s, &inverse(&order))? };
            acc = Some(match acc {
                None => back,
                Some(a) => self.add(a, back)?,
            });
        }
        let acc = acc.expect("non-empty");
        let &[n, _, c] = self.shape(acc) else {
            return Err(Error::shape("merge_2d sequence rank"));
        };
        let mean = self.scale(acc, 1.0 / seqs.len() as f64)?;
        self.reshape(mean, &[n, h, w, c])
    }
}

/// Sublayer substitutions for testing; the production path uses the defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VssHooks {
    pub skip_dwconv: bool,
    pub skip_silu: bool,
}

#[derive(Debug, Clone)]
pub enum SsmParams {
    Lti {
        a: ParamId,
        log_delta: ParamId,
        b: ParamId,
        c: ParamId,
        d: ParamId,
    },
    Selective {
        a: ParamId,
        delta: Linear,
        b: Linear,
        c: Linear,
        d: ParamId,
    },
}

impl SsmParams {
    pub fn a(&self) -> ParamId {
        match self {
            SsmParams::Lti { a, .. } | SsmParams::Selective { a, .. } => *a,
        }
    }
}

/// `W_out = Linear(LN(SSM(SiLU(DWConv(Linear(W))))) ⊙ SiLU(Linear(W)))`.
#[derive(Debug, Clone)]
pub struct Vss {
    pub cfg: VSSConfig,
    pub in_ssm: Linear,
    pub dwconv: Conv2d,
    pub ssm: SsmParams,
    pub norm: LayerNorm,
    pub in_gate: Linear,
    pub out: Linear,
    pub hooks: VssHooks,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl Vss {
    /// Registers parameters under `vss.<index>.*` and `ssm.<index>.*`.
    pub fn new(store: &mut ParamStore, init: &mut Initializer, index: usize, cfg: VSSConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let d = cfg.inner()?;
        let n = cfg.state_dim;
        let p = format!("vss.{index}");
        let s = format!("ssm.{index}");
        let in_ssm = Linear::new(store, init, &format!("{p}.in_ssm"), c, d, true)?;
        let dwconv = Conv2d::new(
            store,
            init,
            &format!("{p}.dwconv"),
            cfg.dwconv_kernel,
            d,
            d,
            true,
            ConvSpec::depthwise(),
        )?;
        let a_mat = hippo_legs(n)?;
        let a_t = Tensor::new(vec![n, n], (0..n * n).map(|k| a_mat[(k / n, k % n)]).collect())?;
        let a = store.add(format!("{s}.A"), a_t, false)?;
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let ssm = match cfg.mode {
            SsmMode::Lti => {
                let log_delta = store.add(format!("{s}.log_delta"), init.uniform(&[d], lo, hi), true)?;
                let b = store.add(
                    format!("{s}.B"),
                    Tensor::from_vec((0..n).map(|i| ((2 * i + 1) as f64).sqrt()).collect()),
                    true,
                )?;
                let c_t = init.he_uniform(&[n], n);
                let c = store.add(format!("{s}.C"), c_t, true)?;
                let dd = store.add(format!("{s}.D"), Tensor::ones(vec![d]), true)?;
                SsmParams::Lti {
                    a,
                    log_delta,
                    b,
                    c,
                    d: dd,
                }
            }
            SsmMode::Selective => {
                let delta = Linear::new(store, init, &format!("{s}.delta"), d, d, true)?;
                let scale = 0.1;
                store
                    .value_mut(delta.w)
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v *= scale);
                let bias = init.uniform(&[d], lo, hi).map(|v| inverse_softplus(v.exp()));
                *store.value_mut(delta.b.expect("bias")) = bias;
                let b = Linear::new(store, init, &format!("{s}.B"), d, n, false)?;
                let c = Linear::new(store, init, &format!("{s}.C"), d, n, false)?;
                let dd = store.add(format!("{s}.D"), Tensor::ones(vec![d]), true)?;
                SsmParams::Selective {
                    a,
                    delta,
                    b,
                    c,
                    d: dd,
                }
            }
        };
        let norm = LayerNorm::new(store, &format!("{p}.norm"), d)?;
        let in_gate = Linear::new(store, init, &format!("{p}.in_gate"), c, d, true)?;
        let out = Linear::new(store, init, &format!("{p}.out"), d, c, true)?;
        Ok(Vss {
            cfg,
            in_ssm,
            dwconv,
            ssm,
            norm,
            in_gate,
            out,
            hooks: VssHooks::default(),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (grid, orig) = as_grid(g.tape, x, self.cfg.channels)?;
        let pre = self.branch1_pre_norm(g, grid)?;
        let w1 = self.norm.forward(g, pre)?;
        let gate = self.in_gate.forward(g, grid)?;
        let w2 = g.tape.silu(gate)?;
        let fused = g.tape.mul(w1, w2)?;
        let out = self.out.forward(g, fused)?;
        g.tape.reshape(out, &orig)
    }

    /// Branch 1 up to (not including) its layer norm: the merged
    /// cross-scan SSM response of `SiLU(DWConv(Linear(x)))`.
    pub fn branch1_pre_norm(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (grid, _) = as_grid(g.tape, x, self.cfg.channels)?;
        let mut h = self.in_ssm.forward(g, grid)?;
        if !self.hooks.skip_dwconv {
            h = self.dwconv.forward(g, h)?;
        }
        if !self.hooks.skip_silu {
            h = g.tape.silu(h)?;
        }
        self.scan(g, h)
    }

    fn scan(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let [nb, hh, ww, d] = g.tape.value(h).nhwc("vss scan")?;
        let l = hh * ww;
        let n = self.cfg.state_dim;
        let a_store = g.store().value(self.ssm.a());
        if a_store.shape() != [n, n] {
            return Err(Error::shape(format!("state matrix {:?}", a_store.shape())));
        }
        let a = DMatrix::from_row_slice(n, n, a_store.data());
        let seq = g.tape.reshape(h, &[nb, l, d])?;
        let (delta, b, c, skip, per_position) = match &self.ssm {
            SsmParams::Lti {
                log_delta,
                b,
                c,
                d: dd,
                ..
            } => {
                let ld = g.param(*log_delta)?;
                let dt = g.tape.exp(ld)?;
                let dt = g.tape.expand_leading(dt, &[nb, l])?;
                let bv = g.param(*b)?;
                let bv = g.tape.expand_leading(bv, &[nb, l])?;
                let cv = g.param(*c)?;
                let cv = g.tape.expand_leading(cv, &[nb, l])?;
                (dt, bv, cv, g.param(*dd)?, false)
            }
            SsmParams::Selective {
                delta,
                b,
                c,
                d: dd,
                ..
            } => {
                let raw = delta.forward(g, seq)?;
                let dt = g.tape.activation(crate::tensor::Activation::Softplus, raw)?;
                let bv = b.forward(g, seq)?;
                let cv = c.forward(g, seq)?;
                (dt, bv, cv, g.param(*dd)?, true)
            }
        };
        let mut outs = Vec::with_capacity(self.cfg.directions);
        for dir in 0..self.cfg.directions {
            let order = scan_order(hh, ww, dir)?;
            let permute = |t: &mut Tape, v: Var| -> Result<Var> {
                if dir == 0 {
                    Ok(v)
                } else {
                    t.permute_rows(v, &order)
                }
            };
            let u_d = permute(g.tape, seq)?;
            let (dt_d, b_d, c_d) = if per_position {
                (permute(g.tape, delta)?, permute(g.tape, b)?, permute(g.tape, c)?)
            } else {
                (delta, b, c)
            };
            outs.push(g.tape.ssm_scan(u_d, dt_d, b_d, c_d, Some(skip), &a)?);
        }
        g.tape.merge_2d(&outs, hh, ww)
    }
}

/// Views `x` as `[N, H, W, C]`; returns the view and the original shape.
fn as_grid(t: &mut Tape, x: Var, channels: usize) -> Result<(Var, Vec<usize>)> {
    let shape = t.shape(x).to_vec();
    let grid = match shape.as_slice() {
        &[_, _, _, c] if c == channels => x,
        &[n, l, c] if c == channels => t.reshape(x, &[n, 1, l, c])?,
        s => {
            return Err(Error::shape(format!(
                "vss expects [N, H, W, {channels}] or [N, L, {channels}], got {s:?}"
            )))
        }
    };
    Ok((grid, shape))
}

/// `M̃ = VSS(LN(M)) + s ⊙ M`, output `Proj(LN(M̃))`.
#[derive(Debug, Clone)]
pub struct VmLayer {
    pub norm_in: LayerNorm,
    pub vss: Vss,
    pub s: ParamId,
    pub norm_out: LayerNorm,
    pub proj: Linear,
}

impl VmLayer {
    /// Registers `vm.<index>.*` (with `vm.<index>.s`) and the inner module's parameters.
    pub fn new(store: &mut ParamStore, init: &mut Initializer, index: usize, cfg: VSSConfig) -> Result<Self> {
        let c = cfg.channels;
        let p = format!("vm.{index}");
        let norm_in = LayerNorm::new(store, &format!("{p}.norm_in"), c)?;
        let vss = Vss::new(store, init, index, cfg)?;
        let s = store.add(format!("{p}.s"), Tensor::ones(vec![c]), true)?;
        let norm_out = LayerNorm::new(store, &format!("{p}.norm_out"), c)?;
        let proj = Linear::new(store, init, &format!("{p}.proj"), c, c, true)?;
        Ok(VmLayer {
            norm_in,
            vss,
            s,
            norm_out,
            proj,
        })
    }

    pub fn forward(&self, g: &mut Graph, m: Var) -> Result<Var> {
        let normed = self.norm_in.forward(g, m)?;
        let v = self.vss.forward(g, normed)?;
        let s = g.param(self.s)?;
        let skip = g.tape.mul_channel(m, s)?;
        let mt = g.tape.add(v, skip)?;
        let mt = self.norm_out.forward(g, mt)?;
        self.proj.forward(g, mt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fill;
    use crate::ssm::{discretize_bilinear, scan_recurrent, ContinuousSSM};

    #[test]
    fn scan_examples() {
        let one = Tensor::new(vec![1, 1, 1, 2], vec![3.0, 4.0]).unwrap();
        for d in 0..4 {
            assert_eq!(scan_2d(&one, d).unwrap().data(), &[3.0, 4.0]);
        }
        let m = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(scan_2d(&m, 0).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(scan_2d(&m, 1).unwrap().data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(scan_2d(&m, 2).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(scan_2d(&m, 3).unwrap().data(), &[4.0, 2.0, 3.0, 1.0]);
        assert!(scan_2d(&m, 4).is_err());
        assert!(scan_2d(&Tensor::zeros(vec![1, 0, 2, 1]), 0).is_err());
    }

    #[test]
    fn merge_inverts_scans() {
        let data: Vec<f64> = (0..2 * 3 * 5 * 2).map(|v| v as f64 * 0.5 - 3.0).collect();
        let x = Tensor::new(vec![2, 3, 5, 2], data).unwrap();
        let seqs: Vec<Tensor> = (0..4).map(|d| scan_2d(&x, d).unwrap()).collect();
        assert_eq!(merge_2d(&seqs, 3, 5).unwrap(), x);
        assert_eq!(merge_2d(&seqs[..1], 3, 5).unwrap(), x);

        let mut t = Tape::new();
        let xv = t.input(x.clone()).unwrap();
        let vs: Vec<Var> = (0..4).map(|d| t.scan_2d(xv, d).unwrap()).collect();
        for (d, v) in vs.iter().enumerate() {
            assert_eq!(t.value(*v), &seqs[d]);
        }
        let merged = t.merge_2d(&vs, 3, 5).unwrap();
        assert_eq!(t.value(merged), &x);
    }

    fn single_channel(mode: SsmMode) -> (ParamStore, Vss) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(0);
        let cfg = VSSConfig {
            channels: 1,
            expansion: 1.0,
            state_dim: 1,
            directions: 1,
            dwconv_kernel: 3,
            mode,
        };
        let mut vss = Vss::new(&mut store, &mut init, 0, cfg).unwrap();
        vss.hooks = VssHooks {
            skip_dwconv: true,
            skip_silu: true,
        };
        fill(&mut store, vss.in_ssm.w, 1.0);
        fill(&mut store, vss.in_ssm.b.unwrap(), 0.0);
        (store, vss)
    }

    #[test]
    fn hand_set_scalar_ssm_branch() {
        // A = -1, Δ = 2/3, B = 2 discretize to Ā = 0.5, B̄ = 1.
        let (mut store, vss) = single_channel(SsmMode::Lti);
        let SsmParams::Lti { a, log_delta, b, c, d } = vss.ssm.clone() else { unreachable!() };
        fill(&mut store, a, -1.0);
        fill(&mut store, log_delta, (2.0f64 / 3.0).ln());
        fill(&mut store, b, 2.0);
        fill(&mut store, c, 1.0);
        fill(&mut store, d, 0.0);
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &store, false);
        let x = g.tape.input(Tensor::new(vec![1, 3, 1], vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
        let y = vss.branch1_pre_norm(&mut g, x).unwrap();
        for (v, e) in g.tape.value(y).data().iter().zip([1.0, 0.5, 0.25]) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
    }

    #[test]
    fn reduces_to_layer_norm_of_ssm() {
        // λ = 1, identity input map, constant gate branch cancelled by the
        // output map: the module is LayerNorm ∘ SSM per channel.
        let (c, n, l) = (3, 2, 7);
        let mut store = ParamStore::new();
        let mut init = Initializer::new(4);
        let cfg = VSSConfig {
            channels: c,
            expansion: 1.0,
            state_dim: n,
            directions: 1,
            dwconv_kernel: 3,
            mode: SsmMode::Lti,
        };
        let mut vss = Vss::new(&mut store, &mut init, 0, cfg).unwrap();
        vss.hooks = VssHooks {
            skip_dwconv: true,
            skip_silu: true,
        };
        let eye = |store: &mut ParamStore, id: ParamId, k: f64| {
            let w = store.value_mut(id);
            for i in 0..c {
                for j in 0..c {
                    w.set(&[i, j], if i == j { k } else { 0.0 });
                }
            }
        };
        eye(&mut store, vss.in_ssm.w, 1.0);
        fill(&mut store, vss.in_gate.w, 0.0);
        fill(&mut store, vss.in_gate.b.unwrap(), 2.0);
        let silu2 = 2.0 / (1.0 + (-2.0f64).exp());
        eye(&mut store, vss.out.w, 1.0 / silu2);
        let SsmParams::Lti { a, log_delta, b, c: cc, d } = vss.ssm.clone() else { unreachable!() };
        let a_vals = [-0.8, 0.3, -0.5, -1.2];
        store.value_mut(a).data_mut().copy_from_slice(&a_vals);
        let deltas = [0.1, 0.4, 0.9];
        store
            .value_mut(log_delta)
            .data_mut()
            .iter_mut()
            .zip(deltas)
            .for_each(|(v, dl)| *v = f64::ln(dl));
        store.value_mut(b).data_mut().copy_from_slice(&[1.0, -0.5]);
        store.value_mut(cc).data_mut().copy_from_slice(&[0.7, 1.1]);
        store.value_mut(d).data_mut().copy_from_slice(&[0.0, 0.3, -0.2]);

        let u: Vec<f64> = (0..l * c).map(|k| ((k * 5 % 7) as f64) / 3.0 - 1.0).collect();
        let mut reference = vec![0.0; l * c];
        for j in 0..c {
            let cont = ContinuousSSM::new(
                DMatrix::from_row_slice(n, n, &a_vals),
                nalgebra::DVector::from_vec(vec![1.0, -0.5]),
                nalgebra::DVector::from_vec(vec![0.7, 1.1]),
                [0.0, 0.3, -0.2][j],
            )
            .unwrap();
            let uj: Vec<f64> = (0..l).map(|t| u[t * c + j]).collect();
            let yj = scan_recurrent(&discretize_bilinear(&cont, deltas[j]).unwrap(), &uj);
            for t in 0..l {
                reference[t * c + j] = yj[t];
            }
        }
        for row in reference.chunks_mut(c) {
            let m = row.iter().sum::<f64>() / c as f64;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / c as f64;
            row.iter_mut().for_each(|x| *x = (*x - m) / (v + crate::nn::LN_EPS).sqrt());
        }

        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &store, false);
        let x = g.tape.input(Tensor::new(vec![1, l, c], u).unwrap()).unwrap();
        let y = vss.forward(&mut g, x).unwrap();
        for (v, e) in g.tape.value(y).data().iter().zip(&reference) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
    }

    #[test]
    fn zero_weights_give_out_bias() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(1);
        let vss = Vss::new(&mut store, &mut init, 0, VSSConfig::new(3)).unwrap();
        for id in store.trainable_ids() {
            fill(&mut store, id, 0.0);
        }
        // keep step sizes positive: softplus(0) = ln 2
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &store, false);
        let x = g.tape.input(Tensor::full(vec![1, 2, 3, 3], 0.7)).unwrap();
        let y = vss.forward(&mut g, x).unwrap();
        assert!(g.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_preserved() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(2);
        let vss = Vss::new(&mut store, &mut init, 0, VSSConfig::new(8)).unwrap();
        assert_eq!(store.value(vss.in_ssm.w).shape(), &[8, 16]);
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &store, false);
        let x = g.tape.input(Tensor::full(vec![2, 16, 8], 0.1)).unwrap();
        let y = vss.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.shape(y), &[2, 16, 8]);
        let bad = g.tape.input(Tensor::zeros(vec![2, 16, 5])).unwrap();
        assert!(vss.forward(&mut g, bad).is_err());
    }

    #[test]
    fn vm_layer_degenerate_paths() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(3);
        let vm = VmLayer::new(&mut store, &mut init, 0, VSSConfig::new(4)).unwrap();
        fill(&mut store, vm.vss.out.w, 0.0);
        let proj = store.value_mut(vm.proj.w);
        for i in 0..4 {
            for j in 0..4 {
                proj.set(&[i, j], (i == j) as u8 as f64);
            }
        }
        let data: Vec<f64> = (0..2 * 8 * 4).map(|v| ((v * 37 % 11) as f64) - 5.0).collect();
        let input = Tensor::new(vec![2, 8, 4], data).unwrap();
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &store, false);
        let x = g.tape.input(input.clone()).unwrap();
        let y = vm.forward(&mut g, x).unwrap();
        let (gm, bt) = (
            g.tape.input(Tensor::ones(vec![4])).unwrap(),
            g.tape.input(Tensor::zeros(vec![4])).unwrap(),
        );
        let ln = g.tape.layer_norm(x, gm, bt, crate::nn::LN_EPS).unwrap();
        for (a, b) in g.tape.value(y).data().iter().zip(g.tape.value(ln).data()) {
            assert!((a - b).abs() < 1e-12);
        }

        fill(&mut store, vm.s, 0.0);
        fill(&mut store, vm.proj.b.unwrap(), 0.25);
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &store, false);
        let x = g.tape.input(input).unwrap();
        let y = vm.forward(&mut g, x).unwrap();
        assert!(g.tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn config_validation() {
        let mut cfg = VSSConfig::new(3);
        cfg.expansion = 1.5;
        assert!(cfg.validate().is_err());
        cfg.expansion = 2.0;
        cfg.directions = 3;
        assert!(cfg.validate().is_err());
        cfg.directions = 2;
        cfg.state_dim = 0;
        assert!(cfg.validate().is_err());
    }
}
