//! Adam optimization of the CTC objective over padded mini-batches, with a
//! step learning-rate schedule, dev-loss model selection, early stopping and
//! a hyperparameter grid search.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Chunk, InputModality};
use crate::ctc::LabelSequence;
use crate::error::{Error, Result};
use crate::model::{Mode, Model, ModelConfig, ModelInput, ParamSet};
use crate::numerics::{Tape, Tensor};

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub lr: Vec<f64>,
    pub batch: Vec<usize>,
    pub wd: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lr: vec![1e-3, 5e-4, 1e-4],
            batch: vec![8, 16, 32],
            wd: vec![1e-3, 5e-4, 1e-4],
        }
    }
}

impl GridSpec {
    /// Cells in lr-major, then batch, then wd order.
    pub fn cells(&self) -> Vec<(f64, usize, f64)> {
        let mut out = Vec::new();
        for &lr in &self.lr {
            for &batch in &self.batch {
                for &wd in &self.wd {
                    out.push((lr, batch, wd));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best dev loss.
    pub patience: Option<usize>,
    pub seed: u64,
    pub grid: GridSpec,
    /// Epoch budget of each grid-search cell.
    pub grid_epochs: usize,
    /// Fill the `wall_s` log column; off by default so logs are reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            weight_decay: 1e-4,
            lr_decay_factor: 0.9,
            lr_decay_every_epochs: 20,
            max_epochs: 120,
            patience: Some(30),
            seed: 0,
            grid: GridSpec::default(),
            grid_epochs: 10,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!("lr_decay_factor must lie in (0, 1], got {}", self.lr_decay_factor)));
        }
        if self.lr_decay_every_epochs == 0 {
            return Err(Error::Config("lr_decay_every_epochs must be ≥ 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = epoch.saturating_sub(1) / self.lr_decay_every_epochs;
        self.learning_rate * self.lr_decay_factor.powi(steps as i32)
    }
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update with bias correction and decoupled weight decay
/// (`p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p`).
pub fn adam_step(params: &mut ParamSet, grads: &[Vec<f64>], state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::State(format!(
            "optimizer expects {} parameter blocks, got {} gradients and {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (i, (name, p)) in params.entries_mut().enumerate() {
        let (g, m, v) = (&grads[i], &mut state.m[i], &mut state.v[i]);
        if g.len() != p.numel() || m.len() != p.numel() || v.len() != p.numel() {
            return Err(Error::State(format!("block {name}: gradient or moment size does not match the parameter")));
        }
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let update = (*mi / bc1) / ((*vi / bc2).sqrt() + ADAM_EPS);
            *x -= lr * update + lr * weight_decay * *x;
        }
    }
    Ok(())
}

/// A model-ready utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub frames: Tensor,
    pub labels: LabelSequence,
}

/// Features of `chunks` for the given modality, paired with transcripts.
pub fn prepare_examples(chunks: &[Chunk], modality: InputModality) -> Result<Vec<Example>> {
    chunks
        .iter()
        .map(|c| {
            Ok(Example {
                id: c.id.clone(),
                frames: c.features(modality)?.frames,
                labels: c.transcript.clone(),
            })
        })
        .collect()
}

/// Seeded shuffle, then the last `round(fraction · n)` examples (at least one) form the dev set.
pub fn split_dev(examples: Vec<Example>, fraction: f64, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    if !(fraction > 0.0 && fraction < 1.0) || examples.len() < 2 {
        return Err(Error::Config(format!(
            "cannot carve a dev fraction {fraction} out of {} examples",
            examples.len()
        )));
    }
    let mut examples = examples;
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_dev = ((fraction * examples.len() as f64).round() as usize).clamp(1, examples.len() - 1);
    let dev = examples.split_off(examples.len() - n_dev);
    Ok((examples, dev))
}

fn inputs<'a>(batch: &[&'a Example]) -> Vec<ModelInput<'a>> {
    batch.iter().map(|e| ModelInput { id: &e.id, frames: &e.frames }).collect()
}

/// Per-utterance CTC losses in eval mode, computed in padded batches of `batch_size`.
pub fn evaluate_losses(model: &Model, examples: &[Example], batch_size: usize) -> Result<Vec<f64>> {
    let batch_size = batch_size.max(1);
    let mut out = Vec::with_capacity(examples.len());
    let mut tape = Tape::new();
    for batch in examples.chunks(batch_size) {
        tape.clear();
        let refs: Vec<&Example> = batch.iter().collect();
        let labels: Vec<LabelSequence> = batch.iter().map(|e| e.labels.clone()).collect();
        let p = model.params.bind(&mut tape);
        let (_, per_utt) = model.loss_bound(&mut tape, &p, &inputs(&refs), &labels, Mode::Eval)?;
        out.extend_from_slice(tape.value(per_utt).data());
    }
    Ok(out)
}

pub fn mean_loss(model: &Model, examples: &[Example], batch_size: usize) -> Result<f64> {
    let losses = evaluate_losses(model, examples, batch_size)?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub wall_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest dev loss.
    pub best: Model,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn epochs_run(&self) -> usize {
        self.log.len()
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,train_loss,dev_loss,wall_s\n");
    for e in log {
        let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.lr, e.train_loss, e.dev_loss, e.wall_s);
    }
    s
}

pub fn train(model: Model, train_set: &[Example], dev_set: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train_set, dev_set, cfg, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    mut model: Model,
    train_set: &[Example],
    dev_set: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Config("training needs non-empty train and dev sets".into()));
    }
    for e in train_set.iter().chain(dev_set) {
        if e.frames.cols() != model.config.input_dim {
            return Err(Error::Config(format!(
                "utterance {} has feature width {}, model expects {}",
                e.id,
                e.frames.cols(),
                model.config.input_dim
            )));
        }
    }
    let start = Instant::now();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);
    let mut adam = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut tape = Tape::new();
    let mut log = Vec::new();
    let mut best = (model.clone(), 0, f64::INFINITY);

    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            tape.clear();
            let batch: Vec<&Example> = idx.iter().map(|&i| &train_set[i]).collect();
            let labels: Vec<LabelSequence> = batch.iter().map(|e| e.labels.clone()).collect();
            let p = model.params.bind(&mut tape);
            let (loss, _) = model
                .loss_bound(&mut tape, &p, &inputs(&batch), &labels, Mode::Train(&mut dropout_rng))
                .map_err(|e| match e {
                    Error::Numeric(_) => Error::Divergence {
                        epoch,
                        batch: b,
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss: value });
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = p
                .vars()
                .iter()
                .zip(model.params.tensors())
                .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], |g| g.data().to_vec()))
                .collect();
            adam_step(&mut model.params, &grads, &mut adam, lr, cfg.weight_decay)?;
            total += value * batch.len() as f64;
        }
        let dev_loss = mean_loss(&model, dev_set, cfg.batch_size)?;
        if !dev_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: usize::MAX,
                loss: dev_loss,
            });
        }
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: total / train_set.len() as f64,
            dev_loss,
            wall_s: if cfg.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        on_epoch(&entry);
        log.push(entry);
        if dev_loss < best.2 {
            best = (model.clone(), epoch, dev_loss);
        }
        if plateaued(epoch, best.1, cfg.patience) {
            break;
        }
    }
    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        best_dev_loss: best.2,
        log,
    })
}

/// True once `patience` epochs have passed without a new best.
fn plateaued(epoch: usize, best_epoch: usize, patience: Option<usize>) -> bool {
    patience.is_some_and(|p| epoch - best_epoch >= p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub lr: f64,
    pub batch: usize,
    pub wd: f64,
    /// `None` when the cell failed.
    pub best_dev_loss: Option<f64>,
    pub epochs_run: usize,
}

/// Trains every grid cell from the same initialization and seed with the
/// reduced `grid_epochs` budget; returns cells ranked by best dev loss
/// (failed cells last, ties in cell order).
pub fn grid_search(
    model_config: &ModelConfig,
    model_seed: u64,
    train_set: &[Example],
    dev_set: &[Example],
    base: &TrainConfig,
) -> Result<Vec<GridCell>> {
    let cells = base.grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let init = Model::new(model_config.clone(), model_seed)?;
    let mut out: Vec<GridCell> = cells
        .into_iter()
        .map(|(lr, batch, wd)| {
            let cfg = TrainConfig {
                learning_rate: lr,
                batch_size: batch,
                weight_decay: wd,
                max_epochs: base.grid_epochs,
                ..base.clone()
            };
            match train(init.clone(), train_set, dev_set, &cfg) {
                Ok(o) => GridCell {
                    lr,
                    batch,
                    wd,
                    best_dev_loss: Some(o.best_dev_loss),
                    epochs_run: o.epochs_run(),
                },
                Err(_) => GridCell {
                    lr,
                    batch,
                    wd,
                    best_dev_loss: None,
                    epochs_run: 0,
                },
            }
        })
        .collect();
    // Stable sort keeps cell order among ties.
    out.sort_by(|a, b| match (a.best_dev_loss, b.best_dev_loss) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    Ok(out)
}

pub fn grid_csv(cells: &[GridCell]) -> String {
    let mut s = String::from("lr,batch,wd,best_dev_loss,epochs_run\n");
    for c in cells {
        let loss = c.best_dev_loss.map_or_else(|| "failed".to_string(), |l| l.to_string());
        let _ = writeln!(s, "{},{},{},{},{}", c.lr, c.batch, c.wd, loss, c.epochs_run);
    }
    s
}
