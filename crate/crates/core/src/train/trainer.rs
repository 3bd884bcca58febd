use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, MetricsReport, THRESHOLDS};
use super::optim::{adamw_step, clip_grad_norm, lr_schedule, AdamWParams, AdamWState};
use crate::autodiff::{Graph, ParamStore, Real};
use crate::data::{Batch, PreparedSample};
use crate::error::{Error, Result};
use crate::losses::{LossReport, LossWeights, ObjectiveOptions};
use crate::model::{Corruption, ModelConfig, PortModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    /// Label flip rate for the recovering branch.
    pub alpha: f64,
    pub weights: LossWeights,
    pub prt_enabled: bool,
    pub dual_align_enabled: bool,
    pub detach_teacher: bool,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            batch_size: 16,
            epochs: 100,
            lr0: 2e-4,
            weight_decay: 0.01,
            alpha: 0.2,
            weights: LossWeights::default(),
            prt_enabled: true,
            dual_align_enabled: true,
            detach_teacher: true,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return bad(format!(
                "clip_norm must be non-negative, got {}",
                self.clip_norm
            ));
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            align: self.dual_align_enabled,
            detach_teacher: self.detach_teacher,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
}

/// Hooks called during [`train`]. An error aborts training.
pub trait Observer<F: Real> {
    fn on_step(&mut self, _log: &StepLog) -> Result<()> {
        Ok(())
    }

    /// Called after each epoch's evaluation. `best` is set when this epoch
    /// has the highest validation mIoU so far.
    fn on_epoch(
        &mut self,
        _log: &EpochLog,
        _model: &PortModel,
        _store: &ParamStore<F>,
        _best: bool,
    ) -> Result<()> {
        Ok(())
    }
}

impl<F: Real> Observer<F> for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub model: PortModel,
    pub store: ParamStore<F>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Parameters of the best validation epoch, when a validation set exists.
    pub best: Option<(usize, f64, ParamStore<F>)>,
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const CORRUPTION_STREAM: u64 = 3;

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn check_samples(cfg: &ModelConfig, samples: &[PreparedSample], what: &str) -> Result<()> {
    for s in samples {
        if s.len() != cfg.len || s.video_dim() != cfg.video_dim || s.query.cols != cfg.query_dim {
            return Err(Error::Config(format!(
                "{what} sample `{}` is {}×{} video / {}-d query, model expects {}×{} / {}",
                s.annotation.video_id,
                s.len(),
                s.video_dim(),
                s.query.cols,
                cfg.len,
                cfg.video_dim,
                cfg.query_dim
            )));
        }
    }
    Ok(())
}

/// Trains from a fresh initialization. Shuffling, dropout and label
/// corruption draw from separate streams of `cfg.seed`, so switching the
/// recovering branch off leaves the other two sequences untouched.
pub fn train<F: Real>(
    cfg: &TrainConfig,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    observer: &mut impl Observer<F>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("train", "training set is empty"));
    }
    check_samples(&cfg.model, train_set, "training")?;
    check_samples(&cfg.model, val_set, "validation")?;

    let (model, mut store) = PortModel::init::<F>(&cfg.model, cfg.seed)?;
    let mut adam = AdamWState::new(&store, AdamWParams::default());
    let mut shuffle_rng = stream(cfg.seed, SHUFFLE_STREAM);
    let mut dropout_rng = stream(cfg.seed, DROPOUT_STREAM);
    let mut corruption_rng = stream(cfg.seed, CORRUPTION_STREAM);

    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let opts = cfg.objective();
    let mut steps = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore<F>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&PreparedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::<F>::new(&refs)?;
            let corruption = if cfg.prt_enabled {
                Some(Corruption::sample(
                    &batch.labels,
                    cfg.alpha,
                    &mut corruption_rng,
                )?)
            } else {
                None
            };
            let lr = lr_schedule(step, total_steps, cfg.lr0);
            let (loss, grads) = {
                let mut g = Graph::with_params(&store);
                let (_, obj) = model.loss(
                    &mut g,
                    &batch,
                    cfg.model.dropout,
                    &mut dropout_rng,
                    corruption.as_ref(),
                    &cfg.weights,
                    opts,
                )?;
                let loss = obj.report(&g);
                if !loss.total.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        loss: loss.total,
                    });
                }
                (loss, g.backward(obj.total)?)
            };
            store.zero_grads();
            store.accumulate(&grads);
            clip_grad_norm(&mut store, cfg.clip_norm);
            adamw_step(&mut store, &mut adam, lr, cfg.weight_decay)?;

            let log = StepLog { step, lr, loss };
            observer.on_step(&log)?;
            steps.push(log);
            step += 1;
        }

        let metrics = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(
                &model,
                &store,
                val_set,
                &THRESHOLDS,
                cfg.batch_size,
            )?)
        };
        let is_best = match (&metrics, &best) {
            (Some(m), Some((_, b, _))) => m.miou > *b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if is_best {
            let miou = metrics.as_ref().expect("validated above").miou;
            best = Some((epoch, miou, store.clone()));
        }
        let log = EpochLog { epoch, metrics };
        observer.on_epoch(&log, &model, &store, is_best)?;
        epochs.push(log);
    }

    Ok(TrainOutcome {
        model,
        store,
        steps,
        epochs,
        best,
    })
}
