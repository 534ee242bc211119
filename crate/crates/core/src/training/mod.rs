//! Supernet training: supernet-balanced sampling (SBS) across K supernets and
//! the uniform single-path one-shot baseline.

mod data;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use data::{load_split, save_split, synthetic, Dataset, SyntheticSpec};

use crate::engine::{cosine_lr, ParamId, SgdConfig, Tape, Tensor};
use crate::error::{Error, Result};
use crate::partition::{write_csv, Criterion, Partition, Router};
use crate::seed;
use crate::space::{SearchSpace, Subnet};
use crate::supernet::SupernetStore;

/// Upper bound on rejection draws per balanced sample.
pub const MAX_REJECTION_DRAWS: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Sbs,
    UniformOneShot,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sbs" => Ok(TrainMode::Sbs),
            "uniform" | "uniform_one_shot" | "one-shot" => Ok(TrainMode::UniformOneShot),
            other => Err(Error::Config(format!("unknown training mode {other:?} (expected sbs or uniform)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    /// 200 epochs, batch 1024, lr 0.12, momentum 0.9, weight decay 4e-5.
    pub fn full() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 1024,
            lr0: 0.12,
            momentum: 0.9,
            weight_decay: 4e-5,
            seed: 0,
            mode: TrainMode::Sbs,
        }
    }

    /// Small-scale preset for the synthetic dataset.
    pub fn desk() -> Self {
        TrainConfig { epochs: 20, batch_size: 64, lr0: 0.05, ..Self::full() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown training preset {other:?} (expected desk or full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 (batch statistics)".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(Error::Config(format!("lr0 must be finite and >= 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }

    pub fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig { lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }
}

/// One subnet drawn per subspace, in supernet order. Draws uniformly from the
/// whole space and keeps the first hit for each bin, so each returned subnet
/// is uniform within its subspace.
pub fn sample_balanced<R: Rng + ?Sized>(router: &Router, rng: &mut R) -> Result<Vec<(Subnet, usize)>> {
    let k = router.k();
    if let Some(empty) = router.partition().subspace_sizes.iter().position(|&n| n == 0) {
        return Err(Error::Partition(format!("subspace {empty} is empty")));
    }
    let mut slots: Vec<Option<Subnet>> = vec![None; k];
    let mut filled = 0;
    for _ in 0..MAX_REJECTION_DRAWS {
        let s = router.space().random_subnet(rng);
        let b = router.route(&s)?;
        if slots[b].is_none() {
            slots[b] = Some(s);
            filled += 1;
            if filled == k {
                return Ok(slots.into_iter().enumerate().map(|(i, s)| (s.expect("filled"), i)).collect());
            }
        }
    }
    let missing: Vec<usize> = slots.iter().enumerate().filter(|(_, s)| s.is_none()).map(|(i, _)| i).collect();
    Err(Error::Partition(format!(
        "no subnet found for subspaces {missing:?} after {MAX_REJECTION_DRAWS} draws"
    )))
}

/// One subnet's loss and update on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraw {
    pub supernet_k: usize,
    pub subnet_code: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// Sum of the per-supernet losses.
    pub loss: f64,
    pub draws: Vec<StepDraw>,
}

type ParamGrads = BTreeMap<ParamId, Tensor<f32>>;

fn loss_and_grads(
    store: &SupernetStore<f32>,
    router: &Router,
    subnet: &Subnet,
    k: usize,
    images: &Tensor<f32>,
    labels: &[usize],
) -> Result<(f64, ParamGrads)> {
    let mut tape = Tape::new(true);
    let logits = store.forward(&mut tape, router, subnet, k, images)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let value = f64::from(tape.value(loss).item());
    if !value.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {value} on supernet {k}")));
    }
    Ok((value, tape.backward(loss)?.into_params()))
}

fn update(
    store: &mut SupernetStore<f32>,
    router: &Router,
    picks: &[(Subnet, usize)],
    images: &Tensor<f32>,
    labels: &[usize],
    sgd: SgdConfig,
) -> Result<StepResult> {
    store.check_router(router)?;
    let shared: &SupernetStore<f32> = store;
    let results: Vec<Result<(f64, ParamGrads)>> =
        picks.par_iter().map(|(s, k)| loss_and_grads(shared, router, s, *k, images, labels)).collect();
    let mut draws = Vec::with_capacity(picks.len());
    let mut total = 0.0;
    for ((s, k), r) in picks.iter().zip(results) {
        let (loss, grads) = r?;
        store.net_mut(*k).apply(&grads, sgd)?;
        total += loss;
        draws.push(StepDraw { supernet_k: *k, subnet_code: router.space().encode(s)?, loss });
    }
    store.step += 1;
    Ok(StepResult { loss: total, draws })
}

/// One SBS step: K subnets (one per supernet) on the same mini-batch, each
/// supernet updated once with its own gradient.
pub fn sbs_step<R: Rng + ?Sized>(
    store: &mut SupernetStore<f32>,
    router: &Router,
    images: &Tensor<f32>,
    labels: &[usize],
    sgd: SgdConfig,
    rng: &mut R,
) -> Result<StepResult> {
    let picks = sample_balanced(router, rng)?;
    update(store, router, &picks, images, labels, sgd)
}

/// One uniform single-path step on a K = 1 store.
pub fn uniform_step<R: Rng + ?Sized>(
    store: &mut SupernetStore<f32>,
    router: &Router,
    images: &Tensor<f32>,
    labels: &[usize],
    sgd: SgdConfig,
    rng: &mut R,
) -> Result<StepResult> {
    if store.k() != 1 {
        return Err(Error::Contract(format!("uniform one-shot training needs K = 1, store has K = {}", store.k())));
    }
    let s = router.space().random_subnet(rng);
    update(store, router, &[(s, 0)], images, labels, sgd)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: u64,
    pub step: u64,
    pub supernet_k: usize,
    pub subnet_code: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub lr: f64,
    pub supernet_k: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_steps(&self, path: &Path, header: &str) -> Result<()> {
        write_csv(path, header, &self.steps)
    }

    pub fn write_epochs(&self, path: &Path, header: &str) -> Result<()> {
        write_csv(path, header, &self.epochs)
    }

    /// Mean loss over supernets for each logged epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let mut by_epoch: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for r in &self.epochs {
            let e = by_epoch.entry(r.epoch).or_default();
            e.0 += r.mean_loss;
            e.1 += 1;
        }
        by_epoch.values().map(|(s, n)| s / *n as f64).collect()
    }
}

fn steps_per_epoch(n: usize, batch: usize) -> Result<usize> {
    if n < 2 {
        return Err(Error::Validation(format!("training set has {n} samples, need at least 2")));
    }
    Ok((n / batch.min(n)).max(1))
}

fn run<F>(
    store: &mut SupernetStore<f32>,
    router: &Router,
    data: &Dataset,
    cfg: &TrainConfig,
    stop: u64,
    mut step: F,
) -> Result<TrainLog>
where
    F: FnMut(&mut SupernetStore<f32>, &Tensor<f32>, &[usize], SgdConfig, &mut seed::Rng) -> Result<StepResult>,
{
    cfg.validate()?;
    data.check_space(router.space())?;
    store.check_router(router)?;
    let batch = cfg.batch_size.min(data.len());
    let spe = steps_per_epoch(data.len(), cfg.batch_size)?;
    let total = cfg.epochs * spe as u64;
    let mut log = TrainLog::default();
    for epoch in store.epoch..stop.min(cfg.epochs) {
        let mut rng = seed::rng(seed::derive_index(cfg.seed, epoch));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = vec![(0.0, 0usize); store.k()];
        let epoch_lr = cosine_lr(epoch * spe as u64, total, cfg.lr0)?;
        for b in 0..spe {
            let global = epoch * spe as u64 + b as u64;
            let lr = cosine_lr(global, total, cfg.lr0)?;
            let (images, labels) = data.batch(&order[b * batch..(b + 1) * batch]);
            let res = step(store, &images, &labels, cfg.sgd(lr), &mut rng)?;
            for d in res.draws {
                sums[d.supernet_k].0 += d.loss;
                sums[d.supernet_k].1 += 1;
                log.steps.push(StepRecord {
                    epoch,
                    step: store.step,
                    supernet_k: d.supernet_k,
                    subnet_code: d.subnet_code,
                    loss: d.loss,
                    lr,
                });
            }
        }
        for (k, (s, n)) in sums.iter().enumerate() {
            log.epochs.push(EpochRecord {
                epoch,
                lr: epoch_lr,
                supernet_k: k,
                mean_loss: if *n > 0 { s / *n as f64 } else { f64::NAN },
            });
        }
        store.epoch = epoch + 1;
        log::info!("epoch {}/{}: mean loss {:?}", epoch + 1, cfg.epochs, log.epoch_losses().last());
    }
    Ok(log)
}

/// Full training loop with a cosine schedule over `epochs * steps_per_epoch`
/// steps. Resumes from `store.epoch`; epoch `e` draws from its own seed
/// stream, so an interrupted run resumes exactly.
pub fn train(store: &mut SupernetStore<f32>, router: &Router, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    train_until(store, router, data, cfg, cfg.epochs)
}

/// Like [`train`] but stops once `store.epoch` reaches `stop`; the schedule still spans `cfg.epochs`.
pub fn train_until(
    store: &mut SupernetStore<f32>,
    router: &Router,
    data: &Dataset,
    cfg: &TrainConfig,
    stop: u64,
) -> Result<TrainLog> {
    match cfg.mode {
        TrainMode::Sbs => run(store, router, data, cfg, stop, |st, x, y, sgd, rng| sbs_step(st, router, x, y, sgd, rng)),
        TrainMode::UniformOneShot => {
            run(store, router, data, cfg, stop, |st, x, y, sgd, rng| uniform_step(st, router, x, y, sgd, rng))
        }
    }
}

/// Train one subnet from scratch with its own K = 1, G = 1 network.
pub fn train_standalone(
    space: &SearchSpace,
    subnet: &Subnet,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(SupernetStore<f32>, Router)> {
    space.check_subnet(subnet)?;
    let partition = Partition::single(space, Criterion::nonlinear_count())?;
    let mut store = SupernetStore::init(space, &partition, 1, seed::derive(cfg.seed, "standalone-init"))?;
    let router = Router::new(space, partition)?;
    let pick = [(subnet.clone(), 0)];
    run(&mut store, &router, data, cfg, cfg.epochs, |st, x, y, sgd, _| update(st, &router, &pick, x, y, sgd))?;
    Ok((store, router))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    /// Top-1 accuracy as a fraction.
    pub accuracy: f64,
    pub loss: f64,
}

/// Top-1 accuracy and mean loss with weights inherited from the subnet's
/// assigned supernet. Batches are contiguous and in dataset order.
pub fn evaluate(
    store: &SupernetStore<f32>,
    router: &Router,
    subnet: &Subnet,
    data: &Dataset,
    batch_size: usize,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Validation("empty evaluation set".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("evaluation batch size must be positive".into()));
    }
    let k = router.route(subnet)?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    let mut start = 0;
    while start < data.len() {
        let end = (start + batch_size).min(data.len());
        let part = data.slice(start, end);
        let mut tape = Tape::new(false);
        let logits = store.forward(&mut tape, router, subnet, k, part.images())?;
        let l = tape.softmax_cross_entropy(logits, part.labels())?;
        loss += f64::from(tape.value(l).item()) * (end - start) as f64;
        let pred = tape.value(logits).argmax_rows();
        correct += pred.iter().zip(part.labels()).filter(|(p, l)| p == l).count();
        start = end;
    }
    let n = data.len() as f64;
    Ok(EvalResult { accuracy: correct as f64 / n, loss: loss / n })
}
