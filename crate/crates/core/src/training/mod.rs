//! Training loops: supervised/teacher training, the two-phase committee
//! distillation schedule, and the LD / FD / MT baselines.

mod baselines;
mod distill;
mod report;

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::models::{build, save_checkpoint, ModelSpec, TapModel};
use crate::tensor::{Adam, AdamConfig, HasParams, Optimizer, Tape, Tensor};

pub use baselines::{baseline_fd, baseline_fd_with, baseline_ld, baseline_mt, fd_losses, soft_target};
pub use distill::{
    distill_objective, distill_step, importance_scores, regularizer_objective, regularizer_step,
    run_distillation, run_distillation_from, run_distillation_observed, CommitteeConfig, DistillOutcome, ImportanceFit, Phase, PhaseRecord,
    RegularizerTerms, StepLosses,
};
pub use report::{EpochMetrics, PassCounts, RunReport, TeacherMetric, REPORT_SCHEMA_VERSION};

/// Epoch/batch schedule and optimizer settings shared by every loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Where to drop the last finished epoch's model if training diverges.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        Ok(())
    }

    pub(crate) fn adam(&self) -> Adam {
        Adam::new(AdamConfig::with_lr(self.lr))
    }
}

/// A dataset with its split and cached title token hashes.
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub split: Split,
    hashes: Vec<Vec<u64>>,
}

const EVAL_CHUNK: usize = 2048;
const HOLDOUT_STREAM: u64 = 0x0068_6f6c_646f_7574;

impl<'a> TrainData<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        TrainData {
            dataset,
            split: dataset.split(),
            hashes: dataset.title_hashes(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch::from_indices(self.dataset, &self.hashes, indices)
    }

    /// Shuffled training batches for one epoch.
    pub(crate) fn epoch_batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut order = self.split.train.clone();
        order.shuffle(rng);
        order.chunks(batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn test_batches(&self) -> impl Iterator<Item = Batch> + '_ {
        self.split.test.chunks(EVAL_CHUNK).map(|c| self.batch(c))
    }

    pub fn train_batches(&self) -> impl Iterator<Item = Batch> + '_ {
        self.split.train.chunks(EVAL_CHUNK).map(|c| self.batch(c))
    }

    /// Splits off a seeded `fraction` of the training indices. Returns data
    /// training on the rest, and the held-out indices. Falls back to no
    /// holdout when the split is too small to spare an example.
    pub fn holdout(&self, fraction: f64, seed: u64) -> (TrainData<'a>, Vec<usize>) {
        let mut order = self.split.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ HOLDOUT_STREAM));
        let n = (order.len() as f64 * fraction).floor() as usize;
        if n == 0 || n == order.len() {
            return (self.clone(), Vec::new());
        }
        let mut held = order.split_off(order.len() - n);
        order.sort_unstable();
        held.sort_unstable();
        let fit = TrainData {
            dataset: self.dataset,
            split: Split {
                train: order,
                test: self.split.test.clone(),
            },
            hashes: self.hashes.clone(),
        };
        (fit, held)
    }

    pub(crate) fn require_train(&self) -> Result<()> {
        if self.split.train.is_empty() {
            return Err(Error::Precondition("training split is empty".into()));
        }
        Ok(())
    }
}

/// Mean squared error of a model's first output over a set of batches.
pub fn evaluate_batches(model: &TapModel, batches: impl Iterator<Item = Batch>) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in batches {
        let pred = model.predict(&b)?;
        let width = model.spec().output_dim;
        for (r, &y) in b.targets.iter().enumerate() {
            let d = pred[r * width] - y;
            total += d * d;
        }
        count += b.len();
    }
    if count == 0 {
        return Err(Error::Precondition("evaluation on an empty split".into()));
    }
    Ok(total / count as f64)
}

/// Held-out MSE (lower is better).
pub fn evaluate(model: &TapModel, data: &TrainData) -> Result<f64> {
    evaluate_batches(model, data.test_batches())
}

pub fn evaluate_train(model: &TapModel, data: &TrainData) -> Result<f64> {
    evaluate_batches(model, data.train_batches())
}

pub(crate) fn targets_tensor(batch: &Batch) -> Tensor {
    Tensor::from_parts(vec![batch.len(), 1], batch.targets.clone())
}

/// Task loss of a forward pass: MSE against ratings for a scalar head.
pub(crate) fn task_loss(tape: &mut Tape, model: &TapModel, pred: crate::tensor::Var, batch: &Batch) -> Result<crate::tensor::Var> {
    if model.spec().output_dim != 1 {
        return Err(Error::Config(format!(
            "model `{}` has a {}-way head; rating tasks need a scalar head",
            model.name(),
            model.spec().output_dim
        )));
    }
    let y = tape.constant(targets_tensor(batch));
    tape.mse_loss(pred, y)
}

pub(crate) fn check_finite(value: f64, context: &str, epoch: usize, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            context: context.to_string(),
            epoch,
            step,
        })
    }
}

/// Saves the last good model when a checkpoint directory is configured.
pub(crate) fn save_last_good(cfg: &TrainConfig, model: &TapModel, data: &TrainData) {
    if let Some(dir) = &cfg.checkpoint_dir {
        let path = dir.join(format!("{}.last-good.ckpt", model.name()));
        // Best effort: the divergence error is what the caller needs to see.
        let _ = std::fs::create_dir_all(dir)
            .map_err(Error::from)
            .and_then(|_| save_checkpoint(model, &data.dataset.schema, path));
    }
}

/// Records per-epoch metrics into a report.
pub(crate) fn push_epoch(
    report: &mut RunReport,
    model: &TapModel,
    data: &TrainData,
    epoch: usize,
    train_loss: f64,
    distill_loss: Option<f64>,
) -> Result<()> {
    let test_mse = evaluate(model, data)?;
    report.epochs.push(EpochMetrics {
        epoch,
        train_loss,
        distill_loss,
        test_mse,
    });
    Ok(())
}

/// Plain supervised training on the task loss. `model` is updated in place.
pub fn train_supervised(model: &mut TapModel, data: &TrainData, cfg: &TrainConfig) -> Result<RunReport> {
    fit_supervised(model, data, cfg, |_, _| Ok(()))
}

fn fit_supervised(
    model: &mut TapModel,
    data: &TrainData,
    cfg: &TrainConfig,
    mut after_epoch: impl FnMut(usize, &TapModel) -> Result<()>,
) -> Result<RunReport> {
    cfg.validate()?;
    data.require_train()?;
    let started = Instant::now();
    let mut report = RunReport::new("none", vec![], cfg.seed);
    report.initial_train_loss = evaluate_train(model, data)?;
    model.set_frozen(false);
    let mut opt = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut last_good = model.clone();
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        let batches = data.epoch_batches(cfg.batch_size, &mut rng);
        for (step, idx) in batches.iter().enumerate() {
            let batch = data.batch(idx);
            let loss = supervised_step(model, &batch, &mut opt)?;
            if let Err(e) = check_finite(loss, model.name(), epoch, step) {
                save_last_good(cfg, &last_good, data);
                return Err(e);
            }
            sum += loss;
        }
        push_epoch(&mut report, model, data, epoch, sum / batches.len() as f64, None)?;
        after_epoch(epoch, model)?;
        last_good = model.clone();
    }
    report.final_train_loss = evaluate_train(model, data)?;
    report.final_metric = report.epochs.last().map_or(f64::NAN, |e| e.test_mse);
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// One Adam step on the task loss; returns the batch loss.
pub fn supervised_step(model: &mut TapModel, batch: &Batch, opt: &mut Adam) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch)?;
    let loss = task_loss(&mut tape, model, out.prediction, batch)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    model.zero_grad();
    model.accumulate(&grads);
    opt.step(&mut model.params_mut());
    model.zero_grad();
    Ok(value)
}

/// Share of the training split a teacher sets aside to choose its epoch.
pub const TEACHER_HOLDOUT: f64 = 0.1;

/// Builds and trains a teacher from scratch. A [`TEACHER_HOLDOUT`] slice of
/// the training split is held out and the weights of the epoch with the
/// lowest MSE on it are kept. The result is frozen.
pub fn train_teacher(spec: &ModelSpec, data: &TrainData, cfg: &TrainConfig) -> Result<(TapModel, RunReport)> {
    let mut model = build(spec, &data.dataset.schema)?;
    let (fit, holdout) = data.holdout(TEACHER_HOLDOUT, cfg.seed);
    let mut best: Option<(f64, usize, TapModel)> = None;
    let mut report = fit_supervised(&mut model, &fit, cfg, |epoch, m| {
        if holdout.is_empty() {
            return Ok(());
        }
        let mse = evaluate_batches(m, holdout.chunks(EVAL_CHUNK).map(|c| data.batch(c)))?;
        if best.as_ref().is_none_or(|(b, _, _)| mse < *b) {
            best = Some((mse, epoch, m.clone()));
        }
        Ok(())
    })?;
    if let Some((_, epoch, m)) = best {
        model = m;
        report.selected_epoch = Some(epoch);
        report.final_metric = report.epochs[epoch - 1].test_mse;
        report.final_train_loss = evaluate_train(&model, data)?;
    }
    report.method = "teacher".into();
    report.committee = vec![spec.name.clone()];
    model.set_frozen(true);
    Ok((model, report))
}
