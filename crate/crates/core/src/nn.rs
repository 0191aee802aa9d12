//! Named parameter storage, the tape binder and the layer primitives the
//! blocks are assembled from.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{BatchNormState, ConvMode, ConvSpec, Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Ordered, named tensors. Trainable entries receive gradients; the rest
/// are buffers such as batch-norm running statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.trainable[id.0]).collect()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.ids()
            .filter(|&id| self.trainable[id.0])
            .map(|id| self.values[id.0].len())
            .sum()
    }

    /// Mutable views of several distinct entries, in the order given.
    pub fn values_mut(&mut self, ids: &[ParamId]) -> Vec<&mut Tensor> {
        let mut slots: Vec<Option<&mut Tensor>> = self.values.iter_mut().map(Some).collect();
        ids.iter()
            .map(|id| slots[id.0].take().expect("distinct parameter ids"))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            ck.push_tensor(name.clone(), value.clone());
        }
        ck
    }

    /// Overwrites every entry from `ck`. Each name must be present with the
    /// same shape; extra checkpoint entries are ignored.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        for (name, value) in self.names.iter().zip(&mut self.values) {
            let t = ck
                .tensor(name)
                .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks `{name}`")))?;
            if t.shape() != value.shape() {
                return Err(Error::shape(format!(
                    "`{name}`: checkpoint {:?}, model {:?}",
                    t.shape(),
                    value.shape()
                )));
            }
            *value = t.clone();
        }
        Ok(())
    }
}

/// Seeded source of initial weights.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    /// `U(-√(6/fan_in), √(6/fan_in))`.
    pub fn he_uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let limit = (6.0 / fan_in.max(1) as f64).sqrt();
        self.uniform(shape, -limit, limit)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Binds store entries to tape variables for one forward pass and collects
/// the running-statistic updates produced by batch normalization.
pub struct Graph<'t, 's> {
    pub tape: &'t mut Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    training: bool,
    learn: bool,
    updates: Vec<(ParamId, Tensor)>,
}

impl<'t, 's> Graph<'t, 's> {
    /// Trainable entries are registered as gradient-carrying leaves.
    pub fn new(tape: &'t mut Tape, store: &'s ParamStore, training: bool) -> Self {
        Self::build(tape, store, training, true)
    }

    /// Every entry is a constant; for inference.
    pub fn frozen(tape: &'t mut Tape, store: &'s ParamStore, training: bool) -> Self {
        Self::build(tape, store, training, false)
    }

    fn build(tape: &'t mut Tape, store: &'s ParamStore, training: bool, learn: bool) -> Self {
        Graph {
            tape,
            store,
            bound: vec![None; store.len()],
            training,
            learn,
            updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let value = self.store.value(id).clone();
        let v = if self.learn && self.store.is_trainable(id) {
            self.tape.param(value)?
        } else {
            self.tape.input(value)?
        };
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Uses `var` in place of the stored value of `id`.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn record_update(&mut self, id: ParamId, value: Tensor) {
        self.updates.push((id, value));
    }

    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.updates)
    }

    /// Gradients of every bound trainable entry, zeros for unused ones.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let g = match self.bound[id.0] {
                    Some(v) => grads.wrt(v, self.tape),
                    None => Tensor::zeros(self.store.value(id).shape().to_vec()),
                };
                (id, g)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), init.he_uniform(&[cin, cout], cin), true)?;
        let b = bias
            .then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![cout]), true))
            .transpose()?;
        Ok(Linear { w, b })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let b = self.b.map(|b| g.param(b)).transpose()?;
        g.tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        bias: bool,
        spec: ConvSpec,
    ) -> Result<Self> {
        let (shape, fan_in) = match spec.mode {
            ConvMode::Depthwise => (vec![k, k, 1, cout], k * k),
            _ => (vec![k, k, cin, cout], k * k * cin),
        };
        let w = store.add(format!("{name}.w"), init.he_uniform(&shape, fan_in), true)?;
        let b = bias
            .then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![cout]), true))
            .transpose()?;
        Ok(Conv2d { w, b, spec })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let b = self.b.map(|b| g.param(b)).transpose()?;
        g.tape.convolve2d(x, w, b, self.spec)
    }
}

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistic in each batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, momentum: f64) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![c]), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![c]), true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(vec![c]), false)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(vec![c]), false)?,
            momentum,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        let store = g.store();
        let state = BatchNormState {
            mean: store.value(self.running_mean).data().to_vec(),
            var: store.value(self.running_var).data().to_vec(),
            momentum: self.momentum,
        };
        let training = g.training();
        let (y, next) = g.tape.batch_norm(x, gamma, beta, BN_EPS, &state, training)?;
        if let Some(next) = next {
            g.record_update(self.running_mean, Tensor::from_vec(next.mean));
            g.record_update(self.running_var, Tensor::from_vec(next.var));
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![c]), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![c]), true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        g.tape.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Fills a stored tensor with a constant (used by tests and ablation hooks).
pub fn fill(store: &mut ParamStore, id: ParamId, value: f64) {
    store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = value);
}
