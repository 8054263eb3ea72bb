//! SGD training loop, per-epoch CSV log and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data_synth::SceneSample;
use crate::error::{Error, Result};
use crate::losses::SampleTargets;
use crate::model::Model;
use crate::numerics::{ParamSnapshot, Tape, Tensor};

pub const CHECKPOINT_VERSION: &str = "srank-checkpoint/1";
pub const LOG_HEADER: &str = "epoch,iterations,lr,total,partition,mask";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub total: f64,
    pub partition: f64,
    pub mask: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:.9},{:.9},{:.9}",
            self.epoch, self.iterations, self.lr, self.total, self.partition, self.mask
        )
    }
}

/// SGD with classical momentum: `v ← μv + g + λw`, `w ← w − η v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: model.store.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect(),
        }
    }

    /// Applies the store's accumulated gradients scaled by `grad_scale`,
    /// clipped to global norm `clip` when positive.
    pub fn step(&mut self, model: &mut Model, lr: f64, grad_scale: f64, clip: f64) {
        let norm = model.store.grad_norm() * grad_scale;
        let scale = if clip > 0.0 && norm > clip { grad_scale * clip / norm } else { grad_scale };
        for (p, v) in model.store.iter_mut().zip(&mut self.velocity) {
            let w = p.tensor.data_mut();
            for ((vi, wi), gi) in v.data_mut().iter_mut().zip(w.iter_mut()).zip(p.gradient.data()) {
                *vi = self.momentum * *vi + gi * scale + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }

    pub fn snapshot(&self, model: &Model) -> ParamSnapshot {
        ParamSnapshot(
            model
                .store
                .iter()
                .zip(&self.velocity)
                .map(|((_, p), v)| (p.name.clone(), v.clone()))
                .collect(),
        )
    }

    pub fn load(&mut self, model: &Model, snap: &ParamSnapshot) -> Result<()> {
        for ((_, p), v) in model.store.iter().zip(&mut self.velocity) {
            let t = snap
                .0
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing momentum for {}", p.name)))?;
            if t.shape() != v.shape() {
                return Err(Error::dim("momentum", v.shape(), t.shape()));
            }
            *v = t.clone();
        }
        Ok(())
    }
}

/// Accumulates gradients of one sample's total loss into the store and
/// returns `(total, rank term, mask term)`.
pub fn accumulate_sample(model: &mut Model, sample: &SceneSample, targets: &SampleTargets, cfg: &TrainConfig) -> Result<[f64; 3]> {
    let tape = Tape::new();
    let terms = model.loss(&tape, sample, targets, &cfg.loss, &cfg.focal)?;
    let values = [terms.total.item(), terms.partition.item(), terms.mask.item()];
    if !values[0].is_finite() {
        return Err(Error::Data(format!("non-finite loss on sample seed {}", sample.seed)));
    }
    let grads = tape.backward(terms.total)?;
    grads.accumulate_into(&mut model.store);
    Ok(values)
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub sgd: Sgd,
    pub epoch: usize,
    pub iteration: usize,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.model, cfg.seed)?;
        let sgd = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            sgd,
            epoch: 0,
            iteration: 0,
            log: Vec::new(),
        })
    }

    pub fn check_data(&self, data: &[SceneSample]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        if let Some(r) = data.iter().flat_map(|s| &s.instances).map(|i| i.rank).find(|&r| r > self.cfg.model.n) {
            return Err(Error::Config(format!("dataset has rank {r} but the model predicts N = {}", self.cfg.model.n)));
        }
        Ok(())
    }

    /// One mini-batch step over `batch`; returns the mean loss terms.
    pub fn step(&mut self, batch: &[(&SceneSample, &SampleTargets)], epoch: usize) -> Result<[f64; 3]> {
        self.model.store.zero_grad();
        let mut sums = [0.0; 3];
        for (s, t) in batch {
            let v = accumulate_sample(&mut self.model, s, t, &self.cfg)?;
            for (a, b) in sums.iter_mut().zip(v) {
                *a += b;
            }
        }
        let lr = self.cfg.lr_at(self.iteration, epoch);
        let b = batch.len() as f64;
        self.sgd.step(&mut self.model, lr, 1.0 / b, self.cfg.grad_clip);
        self.iteration += 1;
        Ok(sums.map(|v| v / b))
    }

    /// Runs one epoch (1-based numbering) with a seed-derived shuffle.
    pub fn run_epoch(&mut self, data: &[SceneSample], targets: &[SampleTargets]) -> Result<EpochLog> {
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9)));
        let mut sums = [0.0; 3];
        let mut batches = 0usize;
        let lr = self.cfg.lr_at(self.iteration, epoch);
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| (&data[i], &targets[i])).collect();
            let v = self.step(&batch, epoch)?;
            for (a, b) in sums.iter_mut().zip(v) {
                *a += b;
            }
            batches += 1;
        }
        self.epoch = epoch;
        let entry = EpochLog {
            epoch,
            iterations: self.iteration,
            lr,
            total: sums[0] / batches as f64,
            partition: sums[1] / batches as f64,
            mask: sums[2] / batches as f64,
        };
        self.log.push(entry.clone());
        Ok(entry)
    }

    /// Trains until `cfg.epochs`, calling `on_epoch` after each epoch.
    pub fn fit(&mut self, data: &[SceneSample], mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        self.check_data(data)?;
        let targets = data.iter().map(|s| self.model.targets(s)).collect::<Result<Vec<_>>>()?;
        while self.epoch < self.cfg.epochs {
            let e = self.run_epoch(data, &targets)?;
            on_epoch(&e);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION.into(),
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            epoch: self.epoch,
            iteration: self.iteration,
            config: self.cfg.clone(),
            params: self.model.store.snapshot(),
            momentum: self.sgd.snapshot(&self.model),
            log: self.log.clone(),
        }
    }

    /// Continues from a checkpoint; the configuration must hash identically.
    pub fn resume(cfg: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let hash = cfg.hash();
        if ck.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs current {hash}; refusing to resume",
                ck.config_hash
            )));
        }
        let mut t = Self::new(cfg)?;
        t.model.store.load_snapshot(&ck.params)?;
        t.sgd.load(&t.model, &ck.momentum)?;
        t.epoch = ck.epoch;
        t.iteration = ck.iteration;
        t.log = ck.log.clone();
        Ok(t)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub iteration: usize,
    pub config: TrainConfig,
    pub params: ParamSnapshot,
    pub momentum: ParamSnapshot,
    pub log: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", ck.version)));
        }
        if ck.config_hash != ck.config.hash() {
            return Err(Error::Checkpoint("stored config does not match its hash".into()));
        }
        Ok(ck)
    }

    /// Rebuilds the trained model.
    pub fn model(&self) -> Result<Model> {
        let mut m = Model::new(&self.config.model, self.seed)?;
        m.store.load_snapshot(&self.params)?;
        Ok(m)
    }
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
    for e in log {
        writeln!(f, "{}", e.csv_row()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Full-batch SGD on fixed samples for `steps` iterations; returns the
/// total loss before every step and after the last.
pub fn overfit(cfg: &TrainConfig, data: &[SceneSample], steps: usize) -> Result<Vec<f64>> {
    let mut t = Trainer::new(cfg)?;
    t.check_data(data)?;
    let targets = data.iter().map(|s| t.model.targets(s)).collect::<Result<Vec<_>>>()?;
    let batch: Vec<_> = data.iter().zip(&targets).collect();
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        losses.push(t.step(&batch, 1)?[0]);
    }
    let tape = Tape::new();
    let mut last = 0.0;
    for (s, tg) in &batch {
        last += t.model.loss(&tape, s, tg, &cfg.loss, &cfg.focal)?.total.item();
    }
    losses.push(last / batch.len() as f64);
    Ok(losses)
}
