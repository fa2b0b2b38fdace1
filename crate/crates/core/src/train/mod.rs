//! Maximum-likelihood training: loss, optimizer, schedule, batching and a
//! resumable training loop.

mod batching;
mod optim;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub use batching::{make_batches, pack, padded_size};
pub use optim::{LrSchedule, Nag, StepInfo};

use crate::data::{Batch, Pair, PAD};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::Dpn;
use crate::nn::ForwardCtx;
use crate::tensor::{Scalar, Tape, Tensor};

/// Mean negative log-likelihood over the non-pad entries of `targets`.
///
/// `log_probs` is `[batch, time, vocab]` and `targets` the row-major
/// `[batch, time]` ids.
pub fn nll_loss<T: Scalar>(log_probs: &Tensor<T>, targets: &[usize], pad: usize) -> Result<Tensor<T>> {
    let picked = log_probs.select_last(targets)?;
    let count = targets.iter().filter(|&&y| y != pad).count();
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let weights: Vec<T> = targets.iter().map(|&y| if y == pad { T::zero() } else { T::one() }).collect();
    let weights = Tensor::from_vec(picked.shape().to_vec(), weights)?;
    picked.mul(&weights)?.sum_all()?.scale(T::cast(-1.0 / count as f64))
}

/// `(correct, total)` argmax predictions over non-pad targets.
pub fn token_accuracy<T: Scalar>(log_probs: &Tensor<T>, targets: &[usize], pad: usize) -> (usize, usize) {
    let v = log_probs.last_dim();
    let mut correct = 0;
    let mut total = 0;
    for (row, &y) in log_probs.data().chunks(v).zip(targets) {
        if y == pad {
            continue;
        }
        total += 1;
        let best = row
            .iter()
            .enumerate()
            .fold((0, row[0]), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
        correct += (best.0 == y) as usize;
    }
    (correct, total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub clip: Option<f64>,
    /// Padded source plus target tokens per batch.
    pub max_tokens: usize,
    pub max_epochs: usize,
    pub max_steps: Option<usize>,
    /// Validate every this many steps; `None` validates after each epoch.
    pub validate_every: Option<usize>,
    pub decay_factor: f64,
    pub patience: usize,
    /// Training stops once the learning rate falls below this.
    pub min_lr: f64,
    /// Stop once validation token accuracy reaches this fraction.
    pub target_accuracy: Option<f64>,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.25,
            momentum: 0.99,
            clip: None,
            max_tokens: 4000,
            max_epochs: 100,
            max_steps: None,
            validate_every: None,
            decay_factor: 10.0,
            patience: 1,
            min_lr: 1e-5,
            target_accuracy: None,
            log_every: 50,
            seed: 1,
        }
    }
}

/// Counters that locate a run inside its deterministic schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    /// Batches of the current epoch already consumed.
    pub batch_in_epoch: usize,
    pub lr: f64,
    pub schedule: Option<LrSchedule>,
    pub best_valid: Option<f64>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Train {
        step: usize,
        epoch: usize,
        loss: f64,
        accuracy: f64,
        lr: f64,
        grad_norm: f64,
        tokens: usize,
        tokens_per_sec: f64,
        elapsed: f64,
    },
    Valid {
        step: usize,
        epoch: usize,
        loss: f64,
        accuracy: f64,
        lr: f64,
        best: bool,
        elapsed: f64,
    },
}

/// Writes each record as one JSON line.
pub fn jsonl_sink<W: Write>(mut w: W) -> impl FnMut(&LogRecord) -> Result<()> {
    move |r| {
        let line = serde_json::to_string(r).expect("log record serializes");
        writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io("training log", e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub tokens: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
    pub tokens: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxSteps,
    MaxEpochs,
    TargetAccuracy,
    MinLr,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub reason: StopReason,
    pub steps: usize,
    pub last_valid: Option<EvalStats>,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.rotate_left(17) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Scores `pairs` without dropout.
pub fn evaluate(model: &Dpn<f32>, pairs: &[Pair], max_tokens: usize) -> Result<EvalStats> {
    let p = model.params.bind(None);
    let mut nll = 0.0;
    let mut correct = 0;
    let mut tokens = 0;
    for idx in pack(pairs, &sorted_order(pairs), max_tokens) {
        let rows: Vec<&Pair> = idx.iter().map(|&i| &pairs[i]).collect();
        let batch = Batch::from_pairs(&rows)?;
        let lp = model.forward(&p, &batch.src, &batch.src_lengths, &batch.tgt_in, &mut ForwardCtx::eval())?;
        let n = batch.target_tokens();
        nll += nll_loss(&lp, &batch.tgt_out, PAD)?.item()?.as_f64() * n as f64;
        let (c, _) = token_accuracy(&lp, &batch.tgt_out, PAD);
        correct += c;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(EvalStats {
        loss: nll / tokens as f64,
        accuracy: correct as f64 / tokens as f64,
        tokens,
    })
}

fn sorted_order(pairs: &[Pair]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].src.len(), pairs[i].tgt.len()));
    order
}

/// Model, optimizer and counters of one training run.
pub struct Trainer {
    pub model: Dpn<f32>,
    pub optim: Nag<f32>,
    pub config: TrainConfig,
    pub state: TrainState,
    /// Extra header entries (vocabularies, run metadata) kept in checkpoints.
    pub header: Map<String, Value>,
}

impl Trainer {
    pub fn new(model: Dpn<f32>, config: TrainConfig) -> Result<Self> {
        if config.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        if !(config.decay_factor > 1.0) || config.patience == 0 {
            return Err(Error::Config("decay_factor must exceed 1 and patience must be positive".into()));
        }
        let optim = Nag::new(config.lr, config.momentum, config.clip, &model.params)?;
        let state = TrainState {
            lr: config.lr,
            schedule: Some(LrSchedule::new(config.decay_factor, config.patience)),
            ..TrainState::default()
        };
        Ok(Trainer {
            model,
            optim,
            config,
            state,
            header: Map::new(),
        })
    }

    /// Forward, loss, backward and one optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepStats> {
        let tape = Tape::new();
        let p = self.model.params.bind(Some(&tape));
        let mut ctx = ForwardCtx::train(step_seed(self.config.seed, self.state.step));
        let lp = self.model.forward(&p, &batch.src, &batch.src_lengths, &batch.tgt_in, &mut ctx)?;
        let loss = nll_loss(&lp, &batch.tgt_out, PAD)?;
        let value = loss.item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss {value} at step {}", self.state.step)));
        }
        let (correct, tokens) = token_accuracy(&lp, &batch.tgt_out, PAD);
        let grads = p.gradients(&mut loss.backward()?);
        self.optim.lr = self.state.lr;
        let info = self.optim.step(&mut self.model.params, &grads)?;
        self.state.step += 1;
        Ok(StepStats {
            loss: value,
            correct,
            tokens,
            grad_norm: info.grad_norm,
        })
    }

    /// Trains until a stop condition fires, validating on `valid` and
    /// writing `last.ckpt`/`best.ckpt` into `checkpoint_dir` when given.
    pub fn run(
        &mut self,
        train: &[Pair],
        valid: &[Pair],
        log: &mut dyn FnMut(&LogRecord) -> Result<()>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<RunSummary> {
        if train.is_empty() {
            return Err(Error::Data("training corpus is empty".into()));
        }
        let start = Instant::now();
        let mut window_tokens = 0;
        let mut window_start = Instant::now();
        let mut last_valid = None;
        let reason = 'outer: loop {
            if self.state.epoch >= self.config.max_epochs {
                break StopReason::MaxEpochs;
            }
            let batches = make_batches(train, self.config.max_tokens, epoch_seed(self.config.seed, self.state.epoch));
            while self.state.batch_in_epoch < batches.len() {
                if self.config.max_steps.is_some_and(|m| self.state.step >= m) {
                    break 'outer StopReason::MaxSteps;
                }
                let rows: Vec<&Pair> = batches[self.state.batch_in_epoch].iter().map(|&i| &train[i]).collect();
                let batch = Batch::from_pairs(&rows)?;
                let stats = self.train_step(&batch)?;
                self.state.batch_in_epoch += 1;
                window_tokens += batch.padded_tokens();
                if self.config.log_every > 0 && self.state.step.is_multiple_of(self.config.log_every) {
                    let secs = window_start.elapsed().as_secs_f64();
                    log(&LogRecord::Train {
                        step: self.state.step,
                        epoch: self.state.epoch,
                        loss: stats.loss,
                        accuracy: stats.correct as f64 / stats.tokens as f64,
                        lr: self.state.lr,
                        grad_norm: stats.grad_norm,
                        tokens: stats.tokens,
                        tokens_per_sec: window_tokens as f64 / secs.max(1e-9),
                        elapsed: start.elapsed().as_secs_f64(),
                    })?;
                    window_tokens = 0;
                    window_start = Instant::now();
                }
                last_valid = None;
                if self.config.validate_every.is_some_and(|n| self.state.step.is_multiple_of(n)) {
                    let (v, stop) = self.validate(valid, log, checkpoint_dir, &start)?;
                    last_valid = v;
                    if let Some(r) = stop {
                        break 'outer r;
                    }
                }
            }
            self.state.epoch += 1;
            self.state.batch_in_epoch = 0;
            if self.config.validate_every.is_none() {
                let (v, stop) = self.validate(valid, log, checkpoint_dir, &start)?;
                last_valid = v;
                if let Some(r) = stop {
                    break r;
                }
            }
        };
        if reason == StopReason::MaxSteps && last_valid.is_none() && !valid.is_empty() {
            // Report-only: the schedule and best checkpoint are left alone.
            last_valid = Some(evaluate(&self.model, valid, self.config.max_tokens)?);
        }
        if let Some(dir) = checkpoint_dir {
            self.save(&dir.join("last.ckpt"))?;
        }
        Ok(RunSummary {
            reason,
            steps: self.state.step,
            last_valid,
        })
    }

    fn validate(
        &mut self,
        valid: &[Pair],
        log: &mut dyn FnMut(&LogRecord) -> Result<()>,
        checkpoint_dir: Option<&Path>,
        start: &Instant,
    ) -> Result<(Option<EvalStats>, Option<StopReason>)> {
        if valid.is_empty() {
            return Ok((None, None));
        }
        let stats = evaluate(&self.model, valid, self.config.max_tokens)?;
        let best = self.state.best_valid.is_none_or(|b| stats.loss < b);
        if best {
            self.state.best_valid = Some(stats.loss);
        }
        let schedule = self
            .state
            .schedule
            .get_or_insert_with(|| LrSchedule::new(self.config.decay_factor, self.config.patience));
        schedule.observe(&mut self.state.lr, stats.loss);
        log(&LogRecord::Valid {
            step: self.state.step,
            epoch: self.state.epoch,
            loss: stats.loss,
            accuracy: stats.accuracy,
            lr: self.state.lr,
            best,
            elapsed: start.elapsed().as_secs_f64(),
        })?;
        if let Some(dir) = checkpoint_dir {
            self.save(&dir.join("last.ckpt"))?;
            if best {
                self.save(&dir.join("best.ckpt"))?;
            }
        }
        let stop = if self.config.target_accuracy.is_some_and(|t| stats.accuracy >= t) {
            Some(StopReason::TargetAccuracy)
        } else if self.state.lr < self.config.min_lr {
            Some(StopReason::MinLr)
        } else {
            None
        };
        Ok((Some(stats), stop))
    }

    /// Parameters, velocities, config and counters.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut header = self.header.clone();
        header.insert("train".into(), serde_json::to_value(&self.config).expect("config serializes"));
        header.insert("state".into(), serde_json::to_value(&self.state).expect("state serializes"));
        let mut ck = self.model.to_checkpoint(header);
        for ((name, t), v) in self.model.params.iter().zip(self.optim.velocity()) {
            let vt = Tensor::from_vec(t.shape().to_vec(), v.clone()).expect("velocity matches parameter");
            ck.push(format!("optim/velocity/{name}"), &vt);
        }
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Restores a run. Velocities default to zero when the checkpoint has
    /// none; `config` overrides the stored training config.
    pub fn from_checkpoint(ck: &Checkpoint, config: Option<TrainConfig>) -> Result<Self> {
        let model = Dpn::from_checkpoint(ck)?;
        let stored: Option<TrainConfig> = ck
            .header
            .get("train")
            .map(|v| serde_json::from_value(v.clone()))
            .transpose()
            .map_err(|e| Error::Checkpoint(format!("training config: {e}")))?;
        let config = config.or(stored).unwrap_or_default();
        let mut trainer = Trainer::new(model, config)?;
        if let Some(v) = ck.header.get("state") {
            trainer.state = serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("training state: {e}")))?;
        }
        let mut velocity = Vec::new();
        for (name, t) in trainer.model.params.iter() {
            velocity.push(match ck.tensor(&format!("optim/velocity/{name}")) {
                Some(v) if v.shape == t.shape() => v.data.clone(),
                Some(v) => {
                    return Err(Error::Checkpoint(format!("velocity of {name} has shape {:?}", v.shape)));
                }
                None => vec![0.0; t.numel()],
            });
        }
        trainer.optim.set_velocity(velocity)?;
        trainer.header = ck
            .header
            .iter()
            .filter(|(k, _)| !matches!(k.as_str(), "model" | "train" | "state"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests;
