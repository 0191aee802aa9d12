//! The segmentation network: encoder, bottleneck, decoder stages with
//! optional vision Mamba layers, segmentation head and the optional
//! reconstruction branch.

mod eval;
mod loss;
mod train;

pub use eval::{evaluate, predict, score, Prediction};
pub use loss::{bin_images, combined_loss, one_hot, LossWeights, SegLoss};
pub use train::{train, EpochReport, TrainConfig, Trainer, TrainingReport};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{DownBlock, GateRate, ResBlock, SoftmaxHead, UpBlock};
use crate::data::{Gray8, SliceRecord};
use crate::error::{Error, Result};
use crate::nn::{Graph, Initializer, ParamStore, BN_MOMENTUM};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Tape, Tensor, Var};
use crate::vss::{SsmMode, VSSConfig, VmLayer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    pub depth: usize,
    pub base_filters: usize,
    pub num_classes: usize,
    pub use_mamba: bool,
    pub mamba_mode: SsmMode,
    pub use_reconstruction: bool,
    /// Intensity bins of the reconstruction target; `None` means `num_classes`.
    pub recon_bins: Option<usize>,
    pub input_size: usize,
    pub state_dim: usize,
    pub kernel: usize,
    pub bn_momentum: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            depth: 4,
            base_filters: 16,
            num_classes: 2,
            use_mamba: true,
            mamba_mode: SsmMode::Selective,
            use_reconstruction: true,
            recon_bins: None,
            input_size: 256,
            state_dim: 8,
            kernel: 3,
            bn_momentum: BN_MOMENTUM,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::invalid("depth must be >= 1"));
        }
        if self.base_filters < 2 || self.base_filters % 2 != 0 {
            return Err(Error::invalid(format!("base_filters must be even, got {}", self.base_filters)));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be >= 2"));
        }
        if self.recon_bins() < 2 {
            return Err(Error::invalid("recon_bins must be >= 2"));
        }
        let unit = 1usize << self.depth.min(usize::BITS as usize - 1);
        if self.input_size == 0 || self.input_size % unit != 0 {
            return Err(Error::invalid(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size, self.depth
            )));
        }
        if self.state_dim < 1 || self.kernel < 1 {
            return Err(Error::invalid("state_dim and kernel must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid("bn_momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn recon_bins(&self) -> usize {
        self.recon_bins.unwrap_or(self.num_classes)
    }
}

/// Switches used by ablations and tests; they are stored with the weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkHooks {
    /// Every attention gate passes its input through (rate 1).
    pub gates_open: bool,
    /// Out-of-range input is an error instead of being clamped.
    pub strict_input: bool,
}

/// Rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Gates forced open, no Mamba, no reconstruction.
    HunetLike,
    Ahnet,
    AhnetRecon,
    MambaAhnet,
    MambaAhnetRecon,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::HunetLike,
        Variant::Ahnet,
        Variant::AhnetRecon,
        Variant::MambaAhnet,
        Variant::MambaAhnetRecon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::HunetLike => "hunet-like",
            Variant::Ahnet => "ahnet",
            Variant::AhnetRecon => "ahnet-recon",
            Variant::MambaAhnet => "mamba-ahnet",
            Variant::MambaAhnetRecon => "mamba-ahnet-recon",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }

    /// `base` with the variant's flags set.
    pub fn configure(self, base: NetworkSpec) -> (NetworkSpec, NetworkHooks) {
        let (mamba, recon, open) = match self {
            Variant::HunetLike => (false, false, true),
            Variant::Ahnet => (false, false, false),
            Variant::AhnetRecon => (false, true, false),
            Variant::MambaAhnet => (true, false, false),
            Variant::MambaAhnetRecon => (true, true, false),
        };
        let spec = NetworkSpec {
            use_mamba: mamba,
            use_reconstruction: recon,
            ..base
        };
        let hooks = NetworkHooks {
            gates_open: open,
            ..NetworkHooks::default()
        };
        (spec, hooks)
    }
}

/// One decoder stage: optional VM layer, attention upsampling, residual.
#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub vm: Option<VmLayer>,
    pub up: UpBlock,
    pub res: ResBlock,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub seg: Var,
    pub recon: Option<Var>,
    /// Gate rate maps, two per decoder stage.
    pub rates: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    hooks: NetworkHooks,
    pub store: ParamStore,
    encoder: Vec<DownBlock>,
    bottleneck: DownBlock,
    decoder: Vec<DecoderStage>,
    seg_head: SoftmaxHead,
    recon_head: Option<SoftmaxHead>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    spec: NetworkSpec,
    hooks: NetworkHooks,
}

pub(crate) const MODEL_META: &str = "meta.model";

impl Network {
    /// Builds the network; initial parameters are a pure function of
    /// `(spec, seed)`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let b = spec.base_filters;
        let m = spec.bn_momentum;
        let filters = |i: usize| b << i;
        let mut encoder = Vec::with_capacity(spec.depth);
        for i in 0..spec.depth {
            let cin = if i == 0 { 1 } else { filters(i - 1) };
            encoder.push(DownBlock::new(&mut store, &mut init, &format!("enc.{i}"), cin, filters(i), m)?);
        }
        let deep = filters(spec.depth);
        let bottleneck = DownBlock::new(
            &mut store,
            &mut init,
            &format!("enc.{}", spec.depth),
            filters(spec.depth - 1),
            deep,
            m,
        )?;
        let mut decoder = Vec::with_capacity(spec.depth);
        let mut cin = deep;
        for j in 0..spec.depth {
            let f = filters(spec.depth - 1 - j);
            let vm = if spec.use_mamba {
                let cfg = VSSConfig {
                    state_dim: spec.state_dim,
                    mode: spec.mamba_mode,
                    ..VSSConfig::new(cin)
                };
                Some(VmLayer::new(&mut store, &mut init, j, cfg)?)
            } else {
                None
            };
            let name = format!("dec.{j}");
            let up = UpBlock::new(&mut store, &mut init, &name, &format!("{name}.gate"), cin, f, f, spec.kernel, 2, m)?;
            let res = ResBlock::new(&mut store, &mut init, &format!("{name}.res"), f, f, f, spec.kernel, 1, m)?;
            decoder.push(DecoderStage { vm, up, res });
            cin = f;
        }
        let seg_head = SoftmaxHead::new(&mut store, &mut init, "seg", 1, b, spec.num_classes)?;
        let recon_head = if spec.use_reconstruction {
            Some(SoftmaxHead::reconstruction(&mut store, &mut init, "recon", b, spec.recon_bins())?)
        } else {
            None
        };
        Ok(Network {
            spec,
            hooks: NetworkHooks::default(),
            store,
            encoder,
            bottleneck,
            decoder,
            seg_head,
            recon_head,
        })
    }

    pub fn with_hooks(mut self, hooks: NetworkHooks) -> Self {
        self.set_hooks(hooks);
        self
    }

    pub fn set_hooks(&mut self, hooks: NetworkHooks) {
        self.hooks = hooks;
        let rate = if hooks.gates_open { GateRate::Open } else { GateRate::Learned };
        for st in &mut self.decoder {
            st.up.gate.hooks.rate = rate;
            st.res.main.gate.hooks.rate = rate;
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn hooks(&self) -> NetworkHooks {
        self.hooks
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Checks the value range (clamping or failing per the hooks) and the
    /// spatial divisibility of an `[N, H, W, 1]` batch.
    pub fn prepare_input(&self, images: &Tensor) -> Result<Tensor> {
        let [_, h, w, c] = images.nhwc("network input")?;
        if c != 1 {
            return Err(Error::shape(format!("network input has {c} channels, expected 1")));
        }
        let unit = 1usize << self.spec.depth;
        if h % unit != 0 || w % unit != 0 {
            return Err(Error::shape(format!("input {h}x{w} is not divisible by {unit}")));
        }
        if !images.is_finite() {
            return Err(Error::NonFinite("network input"));
        }
        let outside = images.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
        if outside == 0 {
            return Ok(images.clone());
        }
        if self.hooks.strict_input {
            return Err(Error::invalid(format!("{outside} input values outside [0, 1]")));
        }
        log::warn!("clamping {outside} input values into [0, 1]");
        Ok(images.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Builds the forward pass on `g`. `x` must already be prepared.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<Outputs> {
        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut h = x;
        for block in &self.encoder {
            let (skip, pooled) = block.forward(g, h)?;
            skips.push(skip);
            h = pooled;
        }
        h = self.bottleneck.features(g, h)?;
        let mut rates = Vec::with_capacity(2 * self.spec.depth);
        for (stage, skip) in self.decoder.iter().zip(skips.into_iter().rev()) {
            if let Some(vm) = &stage.vm {
                h = vm.forward(g, h)?;
            }
            let up = stage.up.forward_parts(g, h, skip)?;
            let res = stage.res.forward_parts(g, up.out, skip)?;
            rates.push(up.rate);
            rates.push(res.rate);
            h = res.out;
        }
        let seg = self.seg_head.forward(g, h)?;
        let recon = match &self.recon_head {
            Some(head) => Some(head.forward(g, h)?),
            None => None,
        };
        Ok(Outputs { seg, recon, rates })
    }

    /// Forward pass without gradients: `(seg_probs, recon_probs)`.
    pub fn forward(&self, images: &Tensor, training: bool) -> Result<(Tensor, Option<Tensor>)> {
        let x = self.prepare_input(images)?;
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &self.store, training);
        let xv = g.tape.input(x)?;
        let out = self.forward_graph(&mut g, xv)?;
        let seg = g.tape.value(out.seg).clone();
        let recon = out.recon.map(|r| g.tape.value(r).clone());
        Ok((seg, recon))
    }

    /// Weights, buffers and the model metadata.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.store.to_checkpoint();
        let meta = ModelMeta {
            spec: self.spec,
            hooks: self.hooks,
        };
        ck.push_bytes(MODEL_META, serde_json::to_vec(&meta)?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let raw = ck
            .bytes(MODEL_META)
            .ok_or_else(|| Error::Corrupt("checkpoint lacks model metadata".into()))?;
        let meta: ModelMeta = serde_json::from_slice(raw)?;
        let mut net = Network::new(meta.spec, 0)?.with_hooks(meta.hooks);
        net.store.load_checkpoint(ck)?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// `[N, H, W, 1]` batch scaled to `[0, 1]`.
pub fn images_to_tensor(images: &[&Gray8]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if im.height != h || im.width != w {
            return Err(Error::shape("images in a batch differ in size"));
        }
        data.extend(im.pixels.iter().map(|&p| p as f64 / 255.0));
    }
    Tensor::new(vec![images.len(), h, w, 1], data)
}

/// Images, one-hot labels and the records' reconstruction targets for a batch.
pub(crate) fn batch_tensors(records: &[&SliceRecord], classes: usize) -> Result<(Tensor, Tensor)> {
    let imgs: Vec<&Gray8> = records.iter().map(|r| &r.image).collect();
    let x = images_to_tensor(&imgs)?;
    let masks: Vec<&crate::metrics::Mask> = records.iter().map(|r| &r.label).collect();
    let y = one_hot(&masks, classes)?;
    Ok((x, y))
}
