//! Encoder and decoder building blocks: the upsampling attention gate, the
//! attention-enhanced and residual upsampling blocks, the softmax heads and
//! the plain downsampling block.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Graph, Initializer, ParamStore};
use crate::tensor::{ConvSpec, Var};

/// How the gate produces its rate map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum GateRate {
    #[default]
    Learned,
    /// Rate fixed at 1: the gate passes `x` through unchanged.
    Open,
}

/// Test hooks for the gate; the production path uses the defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GateHooks {
    /// Skip the three batch normalizations.
    pub bn_identity: bool,
    pub rate: GateRate,
}

/// `att_x = x ⊙ σ(BN(ψ(ReLU(BN(θ(x)) + BN(φ(crop(g)))))))`.
#[derive(Debug, Clone)]
pub struct AttentionGate {
    pub theta: Conv2d,
    pub phi: Conv2d,
    pub psi: Conv2d,
    pub bn_theta: BatchNorm,
    pub bn_phi: BatchNorm,
    pub bn_psi: BatchNorm,
    pub hooks: GateHooks,
}

impl AttentionGate {
    /// Gate over `cx`-channel features with a `cg`-channel gating signal and
    /// `c` intermediate channels.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cx: usize,
        cg: usize,
        c: usize,
        momentum: f64,
    ) -> Result<Self> {
        if c < 1 {
            return Err(Error::invalid("gate width must be >= 1"));
        }
        let one = ConvSpec::same();
        Ok(AttentionGate {
            theta: Conv2d::new(store, init, &format!("{name}.theta"), 1, cx, c, true, one)?,
            phi: Conv2d::new(store, init, &format!("{name}.phi"), 1, cg, c, true, one)?,
            psi: Conv2d::new(store, init, &format!("{name}.psi"), 1, c, 1, true, one)?,
            bn_theta: BatchNorm::new(store, &format!("{name}.bn_theta"), c, momentum)?,
            bn_phi: BatchNorm::new(store, &format!("{name}.bn_phi"), c, momentum)?,
            bn_psi: BatchNorm::new(store, &format!("{name}.bn_psi"), 1, momentum)?,
            hooks: GateHooks::default(),
        })
    }

    fn bn(&self, bn: &BatchNorm, g: &mut Graph, x: Var) -> Result<Var> {
        if self.hooks.bn_identity {
            Ok(x)
        } else {
            bn.forward(g, x)
        }
    }

    /// Returns `(att_x, rate)` with `rate: [N, Hx, Wx, 1]`.
    pub fn forward(&self, g: &mut Graph, x: Var, gate: Var) -> Result<(Var, Var)> {
        let [n, hx, wx, _] = g.tape.value(x).nhwc("gate input")?;
        let [ng, hg, wg, _] = g.tape.value(gate).nhwc("gating signal")?;
        if ng != n {
            return Err(Error::shape(format!("gate batch {ng} vs input batch {n}")));
        }
        if hg < hx || wg < wx {
            return Err(Error::shape(format!(
                "gating signal {hg}x{wg} smaller than input {hx}x{wx}"
            )));
        }
        let cropped = g.tape.crop_center(gate, hx, wx)?;
        let t = self.theta.forward(g, x)?;
        let t = self.bn(&self.bn_theta, g, t)?;
        let p = self.phi.forward(g, cropped)?;
        let p = self.bn(&self.bn_phi, g, p)?;
        let sum = g.tape.add(t, p)?;
        let f = g.tape.relu(sum)?;
        let s = self.psi.forward(g, f)?;
        let s = self.bn(&self.bn_psi, g, s)?;
        let rate = match self.hooks.rate {
            GateRate::Learned => g.tape.sigmoid(s)?,
            GateRate::Open => g.tape.input(crate::tensor::Tensor::ones(vec![n, hx, wx, 1]))?,
        };
        let att = g.tape.mul_broadcast(x, rate)?;
        Ok((att, rate))
    }
}

/// Upsampling block: `x_up = ReLU(BN(ConvT(x)))`, gated by the skip
/// features (center-cropped when larger), then
/// `ReLU(BN(Conv(concat(x_up, attended))))`.
#[derive(Debug, Clone)]
pub struct UpBlock {
    pub filters: usize,
    pub up: Conv2d,
    pub bn_up: BatchNorm,
    pub gate: AttentionGate,
    pub fuse: Conv2d,
    pub bn_fuse: BatchNorm,
}

/// Outputs of [`UpBlock::forward_parts`].
#[derive(Debug, Clone, Copy)]
pub struct UpParts {
    pub out: Var,
    pub x_up: Var,
    pub rate: Var,
}

impl UpBlock {
    /// `cin` input channels, `cskip` skip channels, `filters` outputs (even),
    /// kernel `k`, upsampling stride `s`. The gate is named `gate_name`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        gate_name: &str,
        cin: usize,
        cskip: usize,
        filters: usize,
        k: usize,
        s: usize,
        momentum: f64,
    ) -> Result<Self> {
        if filters < 2 || filters % 2 != 0 {
            return Err(Error::invalid(format!("block filters must be even, got {filters}")));
        }
        let up = Conv2d::new(store, init, &format!("{name}.up"), k, cin, filters, false, ConvSpec::transpose(s))?;
        let bn_up = BatchNorm::new(store, &format!("{name}.bn_up"), filters, momentum)?;
        // x_up is gated, the skip features are the gating signal.
        let gate = AttentionGate::new(store, init, gate_name, filters, cskip, filters / 2, momentum)?;
        let fuse = Conv2d::new(
            store,
            init,
            &format!("{name}.fuse"),
            k,
            2 * filters,
            filters,
            false,
            ConvSpec::same(),
        )?;
        let bn_fuse = BatchNorm::new(store, &format!("{name}.bn_fuse"), filters, momentum)?;
        Ok(UpBlock {
            filters,
            up,
            bn_up,
            gate,
            fuse,
            bn_fuse,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, skip: Var) -> Result<Var> {
        Ok(self.forward_parts(g, x, skip)?.out)
    }

    pub fn forward_parts(&self, g: &mut Graph, x: Var, skip: Var) -> Result<UpParts> {
        let u = self.up.forward(g, x)?;
        let u = self.bn_up.forward(g, u)?;
        let x_up = g.tape.relu(u)?;
        let (attended, rate) = self.gate.forward(g, x_up, skip)?;
        let cat = g.tape.concat_channels(x_up, attended)?;
        let f = self.fuse.forward(g, cat)?;
        let f = self.bn_fuse.forward(g, f)?;
        let out = g.tape.relu(f)?;
        Ok(UpParts { out, x_up, rate })
    }
}

/// [`UpBlock`] plus an additive `Proj1×1(x_up)` around the fused convolution.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub main: UpBlock,
    pub proj: Conv2d,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cskip: usize,
        filters: usize,
        k: usize,
        s: usize,
        momentum: f64,
    ) -> Result<Self> {
        let main = UpBlock::new(
            store,
            init,
            name,
            &format!("{name}.gate"),
            cin,
            cskip,
            filters,
            k,
            s,
            momentum,
        )?;
        let proj = Conv2d::new(store, init, &format!("{name}.proj"), 1, filters, filters, true, ConvSpec::same())?;
        Ok(ResBlock { main, proj })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, skip: Var) -> Result<Var> {
        Ok(self.forward_parts(g, x, skip)?.out)
    }

    pub fn forward_parts(&self, g: &mut Graph, x: Var, skip: Var) -> Result<UpParts> {
        let parts = self.main.forward_parts(g, x, skip)?;
        let p = self.proj.forward(g, parts.x_up)?;
        let out = g.tape.add(parts.out, p)?;
        Ok(UpParts { out, ..parts })
    }
}

/// Convolution to `classes` channels followed by a channel softmax.
#[derive(Debug, Clone)]
pub struct SoftmaxHead {
    pub conv: Conv2d,
    pub classes: usize,
}

impl SoftmaxHead {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        k: usize,
        cin: usize,
        classes: usize,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid(format!("softmax head needs >= 2 classes, got {classes}")));
        }
        Ok(SoftmaxHead {
            conv: Conv2d::new(store, init, &format!("{name}.conv"), k, cin, classes, true, ConvSpec::same())?,
            classes,
        })
    }

    /// The reconstruction branch: 3×3 same-padded convolution then softmax.
    pub fn reconstruction(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        classes: usize,
    ) -> Result<Self> {
        Self::new(store, init, name, 3, cin, classes)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let logits = self.conv.forward(g, x)?;
        g.tape.softmax_channel(logits)
    }
}

/// Two `3×3` convolutions with batch norm and ReLU, then `2×2` max pooling.
#[derive(Debug, Clone)]
pub struct DownBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
}

impl DownBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        filters: usize,
        momentum: f64,
    ) -> Result<Self> {
        Ok(DownBlock {
            conv1: Conv2d::new(store, init, &format!("{name}.conv1"), 3, cin, filters, false, ConvSpec::same())?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), filters, momentum)?,
            conv2: Conv2d::new(store, init, &format!("{name}.conv2"), 3, filters, filters, false, ConvSpec::same())?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), filters, momentum)?,
        })
    }

    /// The two convolutions without pooling (also used as the bottleneck).
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = self.bn1.forward(g, h)?;
        let h = g.tape.relu(h)?;
        let h = self.conv2.forward(g, h)?;
        let h = self.bn2.forward(g, h)?;
        g.tape.relu(h)
    }

    /// Returns `(features_before_pool, pooled)`; odd extents pool by floor.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let [_, h, w, _] = g.tape.value(x).nhwc("downsample input")?;
        if h < 2 || w < 2 {
            return Err(Error::shape(format!("downsampling a {h}x{w} map")));
        }
        let f = self.features(g, x)?;
        let pooled = g.tape.pool_max2d(f, 2, 2)?;
        Ok((f, pooled))
    }
}
