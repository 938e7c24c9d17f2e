//! Training protocol: summed squared trait error, SGD with weight decay,
//! plateau learning-rate decay, early stopping and best-epoch checkpointing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, SequenceSample};
use crate::evaluation::PredictionRecord;
use crate::model::checkpoint::Checkpoint;
use crate::model::{Dyadformer, ModelError, OceanVector, Participant};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tensor::{Tensor, TensorError};
use crate::transformer::ForwardCtx;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("no prediction for participant {0:?}")]
    MissingPrediction(Participant),
    #[error("parameter {0} received no gradient")]
    MissingGradient(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Diverged { epoch: usize, batch: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    /// Non-improving epochs before the learning rate is multiplied by `lr_factor`.
    pub lr_patience: usize,
    pub lr_factor: f64,
    /// Non-improving epochs before training stops.
    pub stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Participants whose errors enter the loss.
    pub participants: Vec<Participant>,
    pub momentum: f64,
    /// A validation loss improves when it is below `best − tolerance`.
    pub tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            weight_decay: 5e-3,
            lr_patience: 3,
            lr_factor: 0.5,
            stop_patience: 6,
            max_epochs: 50,
            batch_size: 16,
            seed: 0,
            participants: Participant::BOTH.to_vec(),
            momentum: 0.0,
            tolerance: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if self.lr_patience == 0 || self.stop_patience == 0 {
            return bad("patiences must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.participants.is_empty() {
            return bad("participant set must not be empty");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.tolerance >= 0.0) {
            return bad("weight_decay and tolerance must be nonnegative");
        }
        Ok(())
    }
}

/// `Σ_{p ∈ participants} Σ_traits (target − prediction)²`, differentiable.
/// `preds` is indexed by participant (0 = A, 1 = B).
pub fn sequence_loss(preds: &[Tensor], targets: &[OceanVector; 2], participants: &[Participant]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for &p in participants {
        let pred = preds.get(p.index()).ok_or(TrainError::MissingPrediction(p))?;
        let target = targets[p.index()].to_tensor().reshape(pred.shape())?;
        let d = pred.sub(&target)?;
        let sq = d.mul(&d)?.sum()?;
        total = Some(match total {
            Some(t) => t.add(&sq)?,
            None => sq,
        });
    }
    total.ok_or_else(|| TrainError::InvalidConfig("participant set must not be empty".into()))
}

/// What one optimizer step touched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepStats {
    /// Parameter tensors updated; each shared tensor counts once.
    pub tensors: usize,
    pub scalars: usize,
}

/// SGD with L2 weight decay and optional momentum:
/// `v ← μ·v + (∇θ + λ·θ)`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every trainable entry once, replacing it with a fresh leaf
    /// (which also clears its gradient).
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, weight_decay: f64) -> Result<StepStats> {
        let mut updates = Vec::new();
        for (name, t) in store.trainable() {
            let grad = t.grad().ok_or_else(|| TrainError::MissingGradient(name.to_string()))?;
            let theta = t.values();
            let new: Vec<f64> = if self.momentum == 0.0 {
                theta
                    .iter()
                    .zip(&grad)
                    .map(|(&w, &g)| w - lr * (g + weight_decay * w))
                    .collect()
            } else {
                let v = self
                    .velocity
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; theta.len()]);
                for ((vi, &w), &g) in v.iter_mut().zip(theta).zip(&grad) {
                    *vi = self.momentum * *vi + g + weight_decay * w;
                }
                theta.iter().zip(v.iter()).map(|(&w, &vi)| w - lr * vi).collect()
            };
            updates.push((name.to_string(), new));
        }
        let mut stats = StepStats { tensors: 0, scalars: 0 };
        for (name, values) in updates {
            stats.tensors += 1;
            stats.scalars += values.len();
            store.replace_values(&name, values)?;
        }
        Ok(stats)
    }
}

/// Plain SGD step: `θ ← θ − lr·(∇θ + weight_decay·θ)`.
pub fn sgd_step(store: &mut ParamStore, lr: f64, weight_decay: f64) -> Result<StepStats> {
    Sgd::new(0.0).step(store, lr, weight_decay)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub lr: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    /// Consecutive epochs without improvement; drives both patiences.
    pub epochs_since_improvement: usize,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            lr: config.lr0,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
            log: Vec::new(),
        }
    }
}

/// Outcome of one [`schedule_and_stop`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleStep {
    pub decision: Decision,
    pub improved: bool,
    pub lr_reduced: bool,
}

/// Records a validation loss. A strict improvement resets the counter;
/// otherwise it grows, the learning rate decays every `lr_patience`
/// non-improving epochs and training stops at `stop_patience`.
pub fn schedule_and_stop(state: &mut TrainState, val_loss: f64, config: &TrainConfig) -> ScheduleStep {
    let improved = val_loss < state.best_val_loss - config.tolerance;
    if improved {
        state.best_val_loss = val_loss;
        state.best_epoch = state.epoch;
        state.epochs_since_improvement = 0;
        return ScheduleStep {
            decision: Decision::Continue,
            improved,
            lr_reduced: false,
        };
    }
    state.epochs_since_improvement += 1;
    let k = state.epochs_since_improvement;
    if k >= config.stop_patience {
        return ScheduleStep {
            decision: Decision::Stop,
            improved,
            lr_reduced: false,
        };
    }
    let lr_reduced = k % config.lr_patience == 0;
    if lr_reduced {
        state.lr *= config.lr_factor;
    }
    ScheduleStep {
        decision: Decision::Continue,
        improved,
        lr_reduced,
    }
}

pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub checkpoint: Checkpoint,
    pub state: TrainState,
}

fn diverged(epoch: usize, batch: usize, reason: impl ToString) -> TrainError {
    TrainError::Diverged {
        epoch,
        batch,
        reason: reason.to_string(),
    }
}

/// Mean per-sequence loss in eval mode.
pub fn evaluate_loss(
    model: &Dyadformer,
    store: &ParamStore,
    samples: &[SequenceSample],
    participants: &[Participant],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation"));
    }
    let frozen = store.detached();
    let mut total = 0.0;
    for s in samples {
        let preds = model.forward(&frozen, &s.to_dyad_input()?, &mut ForwardCtx::eval())?;
        total += sequence_loss(&preds, &s.targets(), participants)?.item()?;
    }
    Ok(total / samples.len() as f64)
}

/// Runs the epoch loop and returns the best-validation checkpoint.
pub fn train(
    model: &Dyadformer,
    init: ParamStore,
    train_set: &[SequenceSample],
    val_set: &[SequenceSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut state = TrainState::new(config);
    let mut store = init;
    let mut best = store.clone();
    if config.max_epochs == 0 {
        return Ok(TrainOutcome {
            checkpoint: Checkpoint::new(model.config().clone(), best),
            state,
        });
    }
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }

    let root = RngStream::new(config.seed);
    let mut shuffle_rng = root.substream(1);
    let mut dropout_rng = root.substream(2);
    let mut sgd = Sgd::new(config.momentum);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.max_epochs {
        state.epoch = epoch;
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut ctx = ForwardCtx::train(model.config().dropout, dropout_rng);
            let mut total: Option<Tensor> = None;
            for &i in batch {
                let s = &train_set[i];
                let preds = model
                    .forward(&store, &s.to_dyad_input()?, &mut ctx)
                    .map_err(|e| diverged(epoch, b, e))?;
                let l = sequence_loss(&preds, &s.targets(), &config.participants).map_err(|e| diverged(epoch, b, e))?;
                total = Some(match total {
                    Some(t) => t.add(&l)?,
                    None => l,
                });
            }
            dropout_rng = ctx.into_rng();
            let loss = total
                .expect("nonempty batch")
                .scale(1.0 / batch.len() as f64)
                .map_err(|e| diverged(epoch, b, e))?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(diverged(epoch, b, format!("loss {value}")));
            }
            loss.backward()?;
            sgd.step(&mut store, state.lr, config.weight_decay)?;
            epoch_loss += value * batch.len() as f64;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = evaluate_loss(model, &store, val_set, &config.participants)?;
        if !val_loss.is_finite() {
            return Err(diverged(epoch, 0, format!("validation loss {val_loss}")));
        }
        let lr = state.lr;
        let step = schedule_and_stop(&mut state, val_loss, config);
        if step.improved {
            best = store.clone();
        }
        state.log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
            improved: step.improved,
        });
        if step.decision == Decision::Stop {
            break;
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(model.config().clone(), best),
        state,
    })
}

/// One JSON object per epoch.
pub fn write_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for e in log {
        serde_json::to_writer(&mut out, e).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        out.push(b'\n');
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(io)
}

/// Eval-mode predictions for every participant in `participants` on every
/// sample.
pub fn collect_predictions(
    model: &Dyadformer,
    store: &ParamStore,
    samples: &[SequenceSample],
    participants: &[Participant],
) -> Result<Vec<PredictionRecord>> {
    let frozen = store.detached();
    let mut out = Vec::with_capacity(samples.len() * participants.len());
    for s in samples {
        let preds = model.predict(&frozen, &s.to_dyad_input()?)?;
        let targets = s.targets();
        for &p in participants {
            out.push(PredictionRecord {
                session_id: s.session_id().to_string(),
                task: s.task(),
                participant_id: s.session.participants[p.index()].participant_id.clone(),
                sequence_start: s.start,
                prediction: preds[p.index()],
                ground_truth: targets[p.index()],
            });
        }
    }
    Ok(out)
}
