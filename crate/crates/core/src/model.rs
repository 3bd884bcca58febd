//! The full model: encoder, highlighting and the two-branch span predictor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradCheckReport, Graph, ParamStore, Real, Tensor, Var};
use crate::data::{Batch, SpanLabels};
use crate::encoder::{Encoder, EncoderConfig, HighlightOutput, Masks, PositionalEncoding};
use crate::error::{Error, Result};
use crate::losses::{
    objective, objective_with_teacher, LossWeights, ObjectiveOptions, ObjectiveVars, Targets,
};
use crate::span_predictor::{flip_labels, BranchLogits, BranchOutput, SpanPredictor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub video_dim: usize,
    pub query_dim: usize,
    pub d: usize,
    /// Attention heads; 0 picks 4 for `d ≤ 64` and 8 otherwise.
    pub heads: usize,
    pub blocks: usize,
    pub len: usize,
    pub positional: PositionalEncoding,
    pub parallel_attention: bool,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            video_dim: 1024,
            query_dim: 300,
            d: 256,
            heads: 0,
            blocks: 1,
            len: 128,
            positional: PositionalEncoding::None,
            parallel_attention: true,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn heads(&self) -> usize {
        if self.heads == 0 {
            EncoderConfig::default_heads(self.d)
        } else {
            self.heads
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            video_dim: self.video_dim,
            query_dim: self.query_dim,
            d: self.d,
            heads: self.heads(),
            blocks: self.blocks,
            max_len: self.len,
            positional: self.positional,
            parallel_attention: self.parallel_attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.blocks == 0 {
            return Err(Error::Config(
                "at least one encoder block is required".into(),
            ));
        }
        self.encoder().validate()
    }
}

/// Corrupted start and end bit sequences for a batch, `[B·T]` each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corruption {
    pub start: Vec<bool>,
    pub end: Vec<bool>,
    pub flips: usize,
}

impl Corruption {
    /// Flips every sample's start and end one-hot sequences at rate `alpha`.
    pub fn sample<R: Rng>(labels: &[SpanLabels], alpha: f64, rng: &mut R) -> Result<Self> {
        let mut out = Corruption {
            start: Vec::new(),
            end: Vec::new(),
            flips: 0,
        };
        for l in labels {
            let valid = l.valid_mask();
            let s: Vec<bool> = (0..l.len).map(|t| t == l.start).collect();
            let e: Vec<bool> = (0..l.len).map(|t| t == l.end).collect();
            let (s, fs) = flip_labels(&s, alpha, &valid, rng)?;
            let (e, fe) = flip_labels(&e, alpha, &valid, rng)?;
            out.start.extend(s);
            out.end.extend(e);
            out.flips += fs + fe;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub highlight: HighlightOutput,
    pub pred: BranchLogits,
    pub rec: Option<BranchLogits>,
}

#[derive(Debug, Clone)]
pub struct PortModel {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub predictor: SpanPredictor,
}

impl PortModel {
    pub fn new<F: Real, R: Rng>(
        cfg: &ModelConfig,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(store, &cfg.encoder(), rng)?;
        let predictor = SpanPredictor::new(store, cfg.d, rng);
        Ok(PortModel {
            cfg: cfg.clone(),
            encoder,
            predictor,
        })
    }

    /// Builds parameters from a fixed seed.
    pub fn init<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = PortModel::new(cfg, &mut store, &mut rng)?;
        Ok((model, store))
    }

    pub fn masks<F: Real>(&self, batch: &Batch<F>) -> Result<Masks> {
        if batch.len != self.cfg.len {
            return Err(Error::shape("model input", &[self.cfg.len], &[batch.len]));
        }
        Masks::new(
            batch.size,
            batch.len,
            batch.query_len,
            batch.video_mask.clone(),
            batch.query_mask.clone(),
        )
    }

    /// Full forward pass. `dropout = 0` disables dropout; the recovering
    /// branch runs only when `corruption` is given.
    pub fn forward<F: Real, R: Rng>(
        &self,
        g: &mut Graph<'_, F>,
        batch: &Batch<F>,
        dropout: f64,
        rng: &mut R,
        corruption: Option<&Corruption>,
    ) -> Result<ForwardOutput> {
        let masks = self.masks(batch)?;
        let video = g.constant(batch.video.clone());
        let query = g.constant(batch.query.clone());
        let enc = self
            .encoder
            .forward(g, video, query, &masks, dropout, rng)?;
        let features = g.dropout(enc.highlight.features, dropout, rng)?;
        let shared = self.predictor.shared(g, features)?;
        let pred = self.predictor.predict(g, &shared)?;
        let rec = match corruption {
            Some(c) => Some(self.predictor.recover(g, &shared, &c.start, &c.end)?),
            None => None,
        };
        Ok(ForwardOutput {
            highlight: enc.highlight,
            pred,
            rec,
        })
    }

    /// Forward plus the weighted objective.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<F: Real, R: Rng>(
        &self,
        g: &mut Graph<'_, F>,
        batch: &Batch<F>,
        dropout: f64,
        rng: &mut R,
        corruption: Option<&Corruption>,
        weights: &LossWeights,
        opts: ObjectiveOptions,
    ) -> Result<(ForwardOutput, ObjectiveVars)> {
        let out = self.forward(g, batch, dropout, rng, corruption)?;
        let targets = targets(batch);
        let obj = objective(
            g,
            &out.pred,
            out.rec.as_ref(),
            out.highlight.logits,
            &targets,
            weights,
            opts,
        )?;
        Ok((out, obj))
    }

    /// Predicting-branch distributions without dropout or corruption.
    pub fn predict<F: Real>(
        &self,
        store: &ParamStore<F>,
        batch: &Batch<F>,
    ) -> Result<Vec<BranchOutput>> {
        let mut g = Graph::with_params(store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, batch, 0.0, &mut rng, None)?;
        BranchOutput::from_logits(&g, &out.pred, &batch.video_mask)
    }

    /// Both branches' distributions for a given corruption, no dropout.
    pub fn predict_both<F: Real>(
        &self,
        store: &ParamStore<F>,
        batch: &Batch<F>,
        corruption: &Corruption,
    ) -> Result<(Vec<BranchOutput>, Vec<BranchOutput>)> {
        let mut g = Graph::with_params(store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, batch, 0.0, &mut rng, Some(corruption))?;
        let rec = out.rec.expect("corruption given");
        Ok((
            BranchOutput::from_logits(&g, &out.pred, &batch.video_mask)?,
            BranchOutput::from_logits(&g, &rec, &batch.video_mask)?,
        ))
    }
}

pub fn targets<F: Real>(batch: &Batch<F>) -> Targets<F> {
    Targets {
        mask: batch.video_mask.clone(),
        start: batch.start_targets(),
        end: batch.end_targets(),
        highlight: batch.highlight_targets(),
    }
}

/// Seed and step used by the default full-model gradient check.
pub const GRAD_CHECK_SEED: u64 = 3;
pub const GRAD_CHECK_EPS: f64 = 3e-5;

/// Named configurations for the full-model gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckSize {
    /// `T = 8`, `d = 16`, `N = 4`, batch of 2.
    Tiny,
}

impl std::str::FromStr for CheckSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(CheckSize::Tiny),
            other => Err(Error::Config(format!("unknown size `{other}`"))),
        }
    }
}

/// Finite-difference check of every parameter of the full model under the
/// complete objective, in f64 with dropout off and a fixed corruption.
///
/// With `detach_teacher` the alignment target is frozen at the unperturbed
/// parameters, which is the function whose gradient training follows.
pub fn model_grad_check(
    size: CheckSize,
    seed: u64,
    eps: f64,
    detach_teacher: bool,
) -> Result<GradCheckReport> {
    let CheckSize::Tiny = size;
    let (t, d, n, b, dv, dw) = (8, 16, 4, 2, 6, 5);
    let cfg = ModelConfig {
        video_dim: dv,
        query_dim: dw,
        d,
        heads: 0,
        blocks: 1,
        len: t,
        positional: PositionalEncoding::Learned,
        parallel_attention: true,
        dropout: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, mut store) = PortModel::init::<f64>(&cfg, seed)?;
    // The recurrent and embedding tables start at a small scale; widen them
    // so that no gradient sits at the finite-difference noise floor.
    let scale = 0.6;
    for p in store.iter_mut() {
        if ["gru", "labels", "pos"].iter().any(|k| p.name.contains(k)) {
            for v in p.value.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += scale * z;
            }
        }
    }
    let batch = check_batch(&mut rng, b, t, n, dv, dw)?;
    let corruption = Corruption::sample(&batch.labels, 0.2, &mut rng)?;
    let weights = LossWeights::default();
    let opts = ObjectiveOptions {
        align: true,
        detach_teacher,
    };
    let frozen = if detach_teacher {
        let mut g = Graph::with_params(&store);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(&mut g, &batch, 0.0, &mut drop_rng, Some(&corruption))?;
        let rec = out.rec.expect("corruption given");
        Some((g.value(rec.start).clone(), g.value(rec.end).clone()))
    } else {
        None
    };
    grad_check(&mut store, eps, |g| {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(g, &batch, 0.0, &mut drop_rng, Some(&corruption))?;
        let teacher = frozen.as_ref().map(|(s, e)| BranchLogits {
            start: g.constant(s.clone()),
            end: g.constant(e.clone()),
        });
        let obj = objective_with_teacher(
            g,
            &out.pred,
            out.rec.as_ref(),
            teacher.as_ref(),
            out.highlight.logits,
            &targets(&batch),
            &weights,
            opts,
        )?;
        Ok::<Var, Error>(obj.total)
    })
}

/// Random padded batch: the second sample is shorter in both modalities.
fn check_batch<R: Rng>(
    rng: &mut R,
    b: usize,
    t: usize,
    n: usize,
    dv: usize,
    dw: usize,
) -> Result<Batch<f64>> {
    let mut video = vec![0.0; b * t * dv];
    let mut query = vec![0.0; b * n * dw];
    let mut video_mask = vec![false; b * t];
    let mut query_mask = vec![false; b * n];
    let mut labels = Vec::new();
    for bi in 0..b {
        let (valid, words) = if bi % 2 == 0 { (t, n) } else { (t - 2, n - 1) };
        for ti in 0..valid {
            video_mask[bi * t + ti] = true;
            for k in 0..dv {
                video[(bi * t + ti) * dv + k] = StandardNormal.sample(rng);
            }
        }
        for j in 0..words {
            query_mask[bi * n + j] = true;
            for k in 0..dw {
                query[(bi * n + j) * dw + k] = StandardNormal.sample(rng);
            }
        }
        let start = rng.random_range(0..valid);
        let end = rng.random_range(start..valid);
        labels.push(SpanLabels {
            start,
            end,
            valid_len: valid,
            len: t,
        });
    }
    Ok(Batch {
        size: b,
        len: t,
        query_len: n,
        video: Tensor::new(&[b, t, dv], video)?,
        video_mask,
        query: Tensor::new(&[b, n, dw], query)?,
        query_mask,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        generate_synthetic, prepare_all, HashEmbedder, PreparedSample, Sample, SyntheticConfig,
    };

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            video_dim: 6,
            query_dim: 5,
            d: 8,
            heads: 2,
            len: 10,
            ..ModelConfig::default()
        }
    }

    fn small_batch() -> Batch<f32> {
        let syn = SyntheticConfig {
            num_samples: 3,
            raw_len_min: 6,
            raw_len_max: 14,
            video_dim: 6,
            query_dim: 5,
            ..SyntheticConfig::default()
        };
        let emb = HashEmbedder::new(5);
        let samples: Vec<Sample> = generate_synthetic(&syn)
            .unwrap()
            .into_iter()
            .map(|s| Sample::from_synthetic(s, &emb))
            .collect();
        let prepared = prepare_all(&samples, 10).unwrap();
        let refs: Vec<&PreparedSample> = prepared.iter().collect();
        Batch::new(&refs).unwrap()
    }

    #[test]
    fn full_model_gradient_check() {
        let report =
            model_grad_check(CheckSize::Tiny, GRAD_CHECK_SEED, GRAD_CHECK_EPS, true).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(report.checked > 10_000);
    }

    #[test]
    fn undetached_alignment_gradient_check() {
        // Rounding of the scalar loss bounds the finite difference at about
        // 2e-11 absolute, which some 1e-7-sized entries sit close to.
        let report =
            model_grad_check(CheckSize::Tiny, GRAD_CHECK_SEED, GRAD_CHECK_EPS, false).unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn predictions_are_distributions_over_valid_steps() {
        let (model, store) = PortModel::init::<f32>(&small_cfg(), 1).unwrap();
        let batch = small_batch();
        let outs = model.predict(&store, &batch).unwrap();
        for (o, l) in outs.iter().zip(&batch.labels) {
            for dist in [&o.start, &o.end] {
                assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                assert!(dist[l.valid_len..].iter().all(|&p| p == 0.0));
            }
        }
    }

    #[test]
    fn prediction_ignores_labels() {
        let (model, store) = PortModel::init::<f32>(&small_cfg(), 2).unwrap();
        let batch = small_batch();
        let mut other = batch.clone();
        for l in &mut other.labels {
            l.start = 0;
            l.end = 0;
        }
        assert_eq!(
            model.predict(&store, &batch).unwrap(),
            model.predict(&store, &other).unwrap()
        );
    }

    #[test]
    fn corruption_changes_only_the_recovering_branch() {
        let (model, store) = PortModel::init::<f32>(&small_cfg(), 3).unwrap();
        let batch = small_batch();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Corruption::sample(&batch.labels, 0.2, &mut rng).unwrap();
        let b = Corruption::sample(&batch.labels, 0.9, &mut rng).unwrap();
        let (pa, ra) = model.predict_both(&store, &batch, &a).unwrap();
        let (pb, rb) = model.predict_both(&store, &batch, &b).unwrap();
        assert_eq!(pa, pb);
        assert_ne!(ra, rb);
        assert_eq!(pa, model.predict(&store, &batch).unwrap());
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = small_cfg();
        cfg.heads = 3;
        assert!(PortModel::init::<f32>(&cfg, 0).is_err());
        let mut cfg = small_cfg();
        cfg.dropout = 1.0;
        assert!(PortModel::init::<f32>(&cfg, 0).is_err());
    }
}
