use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::loss::{combined_loss, LossWeights};
use super::{batch_tensors, Network, NetworkHooks, NetworkSpec};
use crate::data::{DatasetBundle, SliceRecord};
use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::optim::{Optimizer, OptimizerConfig};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds both the initial weights and the epoch shuffles.
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    /// Stop once the mean training DSC (eval mode) reaches this value.
    pub target_dsc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 2,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            target_dsc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        self.loss.validate()?;
        Optimizer::new(self.optimizer).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
    pub train_dsc: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub parameter_count: usize,
    pub epochs: Vec<EpochReport>,
    pub stopped_early: bool,
}

impl TrainingReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainMeta {
    config: TrainConfig,
    epoch: usize,
    losses: Vec<f64>,
    opt_step: u64,
    opt_slots: usize,
}

const TRAIN_META: &str = "meta.train";

/// Network, optimizer state and epoch counter; everything needed to
/// continue a run exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    net: Network,
    opt: Optimizer,
    cfg: TrainConfig,
    epoch: usize,
    losses: Vec<f64>,
}

impl Trainer {
    pub fn new(spec: NetworkSpec, hooks: NetworkHooks, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Network::new(spec, cfg.seed)?.with_hooks(hooks);
        Self::from_network(net, cfg)
    }

    pub fn from_network(net: Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            net,
            opt: Optimizer::new(cfg.optimizer)?,
            cfg,
            epoch: 0,
            losses: Vec::new(),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    /// Changes the epoch budget of a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) -> Result<()> {
        let cfg = TrainConfig { epochs, ..self.cfg };
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    fn shuffled(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    fn step(&mut self, batch: &[&SliceRecord]) -> Result<f64> {
        let (x, y) = batch_tensors(batch, self.net.spec().num_classes)?;
        let x = self.net.prepare_input(&x)?;
        let (loss, grads, updates) = {
            let mut tape = Tape::new();
            let mut g = Graph::new(&mut tape, &self.net.store, true);
            let xv = g.tape.input(x.clone())?;
            let out = self.net.forward_graph(&mut g, xv)?;
            let l = combined_loss(&mut g, out.seg, &y, out.recon, &x, &self.cfg.loss)?;
            let value = g.tape.value(l).item();
            let grads = g.tape.backward(l)?;
            (value, g.param_grads(&grads), g.take_updates())
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let ids: Vec<_> = grads.iter().map(|(id, _)| *id).collect();
        let grad_refs: Vec<&Tensor> = grads.iter().map(|(_, t)| t).collect();
        let mut params = self.net.store.values_mut(&ids);
        self.opt.step(&mut params, &grad_refs)?;
        for (id, value) in updates {
            *self.net.store.value_mut(id) = value;
        }
        Ok(loss)
    }

    /// One pass over `bundle` in a seeded order; returns the mean loss.
    pub fn train_epoch(&mut self, bundle: &DatasetBundle) -> Result<f64> {
        if bundle.is_empty() {
            return Err(Error::invalid("empty training bundle"));
        }
        let recs = bundle.records();
        let order = self.shuffled(recs.len());
        let mut total = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&SliceRecord> = chunk.iter().map(|&i| &recs[i]).collect();
            total += self.step(&batch)? * chunk.len() as f64;
        }
        let loss = total / recs.len() as f64;
        self.epoch += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.net.to_checkpoint()?;
        let (step, m, v) = self.opt.state();
        for (i, (mi, vi)) in m.iter().zip(v).enumerate() {
            ck.push_tensor(format!("opt.m.{i:04}"), Tensor::from_vec(mi.clone()));
            ck.push_tensor(format!("opt.v.{i:04}"), Tensor::from_vec(vi.clone()));
        }
        let meta = TrainMeta {
            config: self.cfg,
            epoch: self.epoch,
            losses: self.losses.clone(),
            opt_step: step,
            opt_slots: m.len().min(v.len()),
        };
        ck.push_bytes(TRAIN_META, serde_json::to_vec(&meta)?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let raw = ck
            .bytes(TRAIN_META)
            .ok_or_else(|| Error::Corrupt("checkpoint lacks training state".into()))?;
        let meta: TrainMeta = serde_json::from_slice(raw)?;
        let net = Network::from_checkpoint(ck)?;
        let mut t = Trainer::from_network(net, meta.config)?;
        let slot = |kind: &str, i: usize| -> Result<Vec<f64>> {
            let name = format!("opt.{kind}.{i:04}");
            ck.tensor(&name)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks `{name}`")))
        };
        let m = (0..meta.opt_slots).map(|i| slot("m", i)).collect::<Result<_>>()?;
        let v = (0..meta.opt_slots).map(|i| slot("v", i)).collect::<Result<_>>()?;
        t.opt.restore(meta.opt_step, m, v);
        t.epoch = meta.epoch;
        t.losses = meta.losses;
        Ok(t)
    }

    pub fn resume(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Trains until `config().epochs` epochs are done (or the DSC target is
    /// met), writing `epoch_NNNN.mahw` into `dir` after every epoch.
    pub fn run(&mut self, bundle: &DatasetBundle, dir: Option<&Path>) -> Result<TrainingReport> {
        if bundle.is_empty() {
            return Err(Error::invalid("empty training bundle"));
        }
        if let Some(dir) = dir {
            ensure_writable(dir)?;
        }
        let mut report = TrainingReport {
            parameter_count: self.net.parameter_count(),
            epochs: Vec::new(),
            stopped_early: false,
        };
        while self.epoch < self.cfg.epochs {
            let start = Instant::now();
            let loss = self.train_epoch(bundle)?;
            let seconds = start.elapsed().as_secs_f64();
            let checkpoint = match dir {
                Some(dir) => {
                    let path = dir.join(format!("epoch_{:04}.mahw", self.epoch));
                    self.to_checkpoint()?.save(&path)?;
                    Some(path)
                }
                None => None,
            };
            let train_dsc = match self.cfg.target_dsc {
                Some(_) => evaluate(&self.net, bundle)?.aggregate.dsc.mean,
                None => None,
            };
            log::info!("epoch {} loss {loss:.6} ({seconds:.2}s)", self.epoch);
            report.epochs.push(EpochReport {
                epoch: self.epoch,
                loss,
                seconds,
                train_dsc,
                checkpoint,
            });
            if let (Some(target), Some(d)) = (self.cfg.target_dsc, train_dsc) {
                if d >= target {
                    report.stopped_early = self.epoch < self.cfg.epochs;
                    break;
                }
            }
        }
        Ok(report)
    }
}

fn ensure_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write_probe");
    std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

/// Builds a network from `spec` and trains it on `bundle`.
pub fn train(
    spec: NetworkSpec,
    hooks: NetworkHooks,
    cfg: TrainConfig,
    bundle: &DatasetBundle,
    checkpoint_dir: Option<&Path>,
) -> Result<(Network, TrainingReport)> {
    let mut t = Trainer::new(spec, hooks, cfg)?;
    let report = t.run(bundle, checkpoint_dir)?;
    Ok((t.into_network(), report))
}
