use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{time_to_index, Annotation, FeatureMatrix, HashEmbedder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionMode {
    /// Near-flat (start, duration) distribution.
    Uniform,
    /// Early starts and short durations dominate.
    Biased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_samples: usize,
    pub raw_len_min: usize,
    pub raw_len_max: usize,
    pub duration_min_s: f64,
    pub duration_max_s: f64,
    pub video_dim: usize,
    pub query_dim: usize,
    pub query_len_min: usize,
    pub query_len_max: usize,
    pub vocab_size: usize,
    /// Signal power over noise variance; in-moment frames carry a unit-RMS
    /// signal plus `N(0, 1/snr)` noise.
    pub snr: f64,
    pub moment_ratio_mean: f64,
    pub position_mode: PositionMode,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_samples: 1000,
            raw_len_min: 64,
            raw_len_max: 256,
            duration_min_s: 20.0,
            duration_max_s: 60.0,
            video_dim: 1024,
            query_dim: 300,
            query_len_min: 4,
            query_len_max: 10,
            vocab_size: 1000,
            snr: 4.0,
            moment_ratio_mean: 0.19,
            position_mode: PositionMode::Uniform,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.moment_ratio_mean > 0.0 && self.moment_ratio_mean < 1.0) {
            return bad("moment_ratio_mean must lie in (0, 1)");
        }
        if self.position_mode == PositionMode::Biased && self.moment_ratio_mean * 1.5 > 1.0 {
            return bad("biased mode needs moment_ratio_mean <= 2/3");
        }
        if self.raw_len_min == 0 || self.raw_len_min > self.raw_len_max {
            return bad("need 1 <= raw_len_min <= raw_len_max");
        }
        if self.query_len_min == 0 || self.query_len_min > self.query_len_max {
            return bad("need 1 <= query_len_min <= query_len_max");
        }
        if !(self.duration_min_s > 0.0 && self.duration_min_s <= self.duration_max_s) {
            return bad("need 0 < duration_min_s <= duration_max_s");
        }
        if self.video_dim == 0 || self.query_dim == 0 || self.vocab_size == 0 {
            return bad("dimensions and vocabulary must be positive");
        }
        if self.snr.is_nan() || self.snr <= 0.0 {
            return bad("snr must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub annotation: Annotation,
    pub features: FeatureMatrix,
}

/// Draws normalized (start, length) for one moment.
fn draw_moment<R: Rng>(cfg: &SyntheticConfig, rng: &mut R) -> (f64, f64) {
    let m = cfg.moment_ratio_mean;
    match cfg.position_mode {
        PositionMode::Uniform => {
            let half = 0.95 * m.min(1.0 - m);
            let len = rng.random_range(m - half..=m + half);
            let start = rng.random_range(0.0..=1.0 - len);
            (start, len)
        }
        PositionMode::Biased => {
            let len = rng.random_range(0.5 * m..=1.5 * m);
            let u: f64 = rng.random();
            (u * u * u * (1.0 - len), len)
        }
    }
}

/// Generates a deterministic synthetic corpus. Sample `i` draws from its own
/// generator stream, so any index range can be produced independently.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<SyntheticSample>> {
    let generator = SyntheticGenerator::new(cfg.clone())?;
    (0..cfg.num_samples).map(|i| generator.sample(i)).collect()
}

/// Holds the fixed query-to-signal projection shared by every sample.
pub struct SyntheticGenerator {
    cfg: SyntheticConfig,
    projection: Vec<f64>,
}

impl SyntheticGenerator {
    pub fn new(cfg: SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let projection = (0..cfg.video_dim * cfg.query_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(SyntheticGenerator { cfg, projection })
    }

    pub fn sample(&self, index: usize) -> Result<SyntheticSample> {
        let cfg = &self.cfg;
        let projection = &self.projection;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64 + 1);

        let duration = rng.random_range(cfg.duration_min_s..=cfg.duration_max_s);
        let raw_len = rng.random_range(cfg.raw_len_min..=cfg.raw_len_max);
        let (start, len) = draw_moment(cfg, &mut rng);
        let start_s = start * duration;
        let end_s = ((start + len) * duration).min(duration);

        let n_tokens = rng.random_range(cfg.query_len_min..=cfg.query_len_max);
        let query = (0..n_tokens)
            .map(|_| format!("w{}", rng.random_range(0..cfg.vocab_size)))
            .collect::<Vec<_>>()
            .join(" ");
        let embedded = HashEmbedder::new(cfg.query_dim).embed_query(&query);

        let mut pooled = vec![0.0f64; cfg.query_dim];
        for r in 0..embedded.rows {
            for (p, &v) in pooled.iter_mut().zip(embedded.row(r)) {
                *p += v as f64 / embedded.rows as f64;
            }
        }
        let mut signal: Vec<f64> = (0..cfg.video_dim)
            .map(|i| {
                projection[i * cfg.query_dim..(i + 1) * cfg.query_dim]
                    .iter()
                    .zip(&pooled)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let norm = signal.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let scale = (cfg.video_dim as f64).sqrt() / norm;
        signal.iter_mut().for_each(|x| *x *= scale);

        let noise_std = 1.0 / cfg.snr.sqrt();
        let first = time_to_index(start_s, duration, raw_len)?;
        let last = time_to_index(end_s, duration, raw_len)?;
        let mut data = Vec::with_capacity(raw_len * cfg.video_dim);
        for t in 0..raw_len {
            let inside = (first..=last).contains(&t);
            for &s in &signal {
                let z: f64 = StandardNormal.sample(&mut rng);
                let noise = noise_std * z;
                data.push(if inside {
                    (s + noise) as f32
                } else {
                    noise as f32
                });
            }
        }

        Ok(SyntheticSample {
            annotation: Annotation {
                video_id: format!("syn{index:06}"),
                duration_s: duration,
                start_s,
                end_s,
                query,
            },
            features: FeatureMatrix::new(raw_len, cfg.video_dim, data)?,
        })
    }
}
