//! Mini-batch training on margin loss, evaluation, and run records.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::capsule::batch_predictions;
use crate::checkpoint;
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::model::{ModelGraph, Params};
use crate::tensor::Tensor;

pub const RUN_CSV_HEADER: &str = "epoch,train_loss,train_acc,test_acc,seconds";
const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::Usage(format!("unknown optimizer '{s}' (sgd | adam)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub subsample_fraction: f64,
    pub split_ratio: f64,
    /// Stop after the first epoch whose train accuracy reaches this value.
    pub stop_at_train_acc: Option<f64>,
    /// Write wall-clock seconds to the run record; when off the column is 0.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            seed: 0,
            subsample_fraction: 0.5,
            split_ratio: 0.7,
            stop_at_train_acc: None,
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Contract("epochs and batch size must be at least 1".into()));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::Contract(format!(
                "subsample fraction must be in (0, 1], got {}",
                self.subsample_fraction
            )));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Contract("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<EpochRow>,
    /// Mean train-set loss of the initial weights.
    pub initial_train_loss: f64,
    /// Hex SHA-256 of the final checkpoint bytes.
    pub checksum: String,
}

impl RunRecord {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{RUN_CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.8},{:.6},{:.6},{:.3}\n",
                r.epoch, r.train_loss, r.train_acc, r.test_acc, r.seconds
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(RUN_CSV_HEADER) {
            return Err(Error::Format(format!("run record must start with '{RUN_CSV_HEADER}'")));
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("bad run record row '{line}'"));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            rows.push(EpochRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(1)?,
                train_acc: num(2)?,
                test_acc: num(3)?,
                seconds: num(4)?,
            });
        }
        Ok(RunRecord { rows, initial_train_loss: f64::NAN, checksum: String::new() })
    }
}

pub struct TrainOutcome {
    pub record: RunRecord,
    pub params: Params,
    pub checkpoint: Vec<u8>,
}

impl TrainOutcome {
    /// Writes `run.csv` and `model.ckpt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("run.csv"), self.record.to_csv())?;
        fs::write(dir.join("model.ckpt"), &self.checkpoint)?;
        Ok(())
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Adam {
    fn new(params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, params: &mut Params, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let (c1, c2) = (1.0 - BETA1.powi(self.t), 1.0 - BETA2.powi(self.t));
        for (k, ((_, p), g)) in params.tensors.iter_mut().zip(grads).enumerate() {
            for (((w, &gv), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut self.m[k]).zip(&mut self.v[k]) {
                *m = BETA1 * *m + (1.0 - BETA1) * gv;
                *v = BETA2 * *v + (1.0 - BETA2) * gv * gv;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
            }
        }
    }
}

fn check_compatible(model: &ModelGraph, data: &DatasetBundle) -> Result<()> {
    if model.caps.num_classes != data.num_classes() {
        return Err(Error::Contract(format!(
            "model predicts {} classes, dataset has {}",
            model.caps.num_classes,
            data.num_classes()
        )));
    }
    if model.input_extent() != data.size {
        return Err(Error::Contract(format!(
            "model expects {0}x{0} images, dataset has {1}x{1}",
            model.input_extent(),
            data.size
        )));
    }
    Ok(())
}

/// One optimisation step's forward/backward; returns (loss, predictions, gradients).
fn step(
    model: &ModelGraph,
    params: &Params,
    images: Tensor,
    labels: &[usize],
) -> Result<(f64, Vec<usize>, Vec<Tensor>)> {
    let g = Graph::new();
    let vars: Vec<Var<'_>> = params.tensors.iter().map(|(_, t)| g.param(t.clone())).collect();
    let caps = model.forward(&vars, g.constant(images))?;
    let preds = batch_predictions(&caps.value());
    let loss = caps.margin_loss(labels)?;
    let value = loss.value().data()[0];
    let grads = g.backward(loss)?;
    let grads = vars.iter().map(|v| grads.get(v).cloned().expect("every parameter is trainable")).collect();
    Ok((value, preds, grads))
}

/// Mean margin loss and predictions over `indices`, in evaluation batches.
fn forward_all(
    model: &ModelGraph,
    params: &Params,
    data: &DatasetBundle,
    indices: &[usize],
) -> Result<(f64, Vec<usize>)> {
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = params.tensors.iter().map(|(_, t)| g.constant(t.clone())).collect();
        let caps = model.forward(&vars, g.constant(data.images(chunk)))?;
        preds.extend(batch_predictions(&caps.value()));
        let loss = caps.margin_loss(&data.labels_of(chunk))?;
        total += loss.value().data()[0] * chunk.len() as f64;
    }
    Ok((total / indices.len().max(1) as f64, preds))
}

/// Trains from freshly initialised weights on `data.train`, evaluating on
/// `data.test` after every epoch. `(cfg.seed, model, data)` fix the result.
pub fn train(model: &ModelGraph, data: &DatasetBundle, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(model, data)?;
    if data.train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let mut params = model.init_params(cfg.seed)?;
    let mut adam = Adam::new(&params);
    let (initial_train_loss, _) = forward_all(model, &params, data, &data.train)?;
    let mut rows = Vec::new();
    let mut order = data.train.clone();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let labels = data.labels_of(batch);
            let (loss, preds, grads) = step(model, &params, data.images(batch), &labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("loss became {loss} in epoch {epoch}")));
            }
            loss_sum += loss * batch.len() as f64;
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            match cfg.optimizer {
                Optimizer::Adam => adam.step(&mut params, &grads, cfg.learning_rate),
                Optimizer::Sgd => {
                    for ((_, p), g) in params.tensors.iter_mut().zip(&grads) {
                        for (w, gv) in p.data_mut().iter_mut().zip(g.data()) {
                            *w -= cfg.learning_rate * gv;
                        }
                    }
                }
            }
        }
        let test_acc = if data.test.is_empty() { 0.0 } else { evaluate(model, &params, data, &data.test)?.accuracy };
        let train_acc = correct as f64 / order.len() as f64;
        rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_acc,
            test_acc,
            seconds: if cfg.record_timing { started.elapsed().as_secs_f64() } else { 0.0 },
        });
        if cfg.stop_at_train_acc.is_some_and(|t| train_acc >= t) {
            break;
        }
    }
    let checkpoint = checkpoint::to_bytes(model, &params)?;
    let record = RunRecord { rows, initial_train_loss, checksum: checkpoint::checksum_hex(&checkpoint) };
    Ok(TrainOutcome { record, params, checkpoint })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(model: &ModelGraph, params: &Params, data: &DatasetBundle, indices: &[usize]) -> Result<Evaluation> {
    check_compatible(model, data)?;
    if indices.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let (mean_loss, preds) = forward_all(model, params, data, indices)?;
    let k = data.num_classes();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&i, &p) in indices.iter().zip(&preds) {
        confusion[data.labels[i]][p] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    Ok(Evaluation { accuracy: correct as f64 / indices.len() as f64, mean_loss, confusion })
}
