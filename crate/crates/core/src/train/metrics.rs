use serde::ser::{Serialize, SerializeMap, Serializer};

use crate::autodiff::{ParamStore, Real};
use crate::data::{index_to_time, Batch, PreparedSample};
use crate::error::{Error, Result};
use crate::model::{Corruption, PortModel};
use crate::span_predictor::select_span;

pub const THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Temporal IoU of two ordered `(start, end)` spans in seconds. Two
/// coincident points score 1; a point never overlaps a span.
pub fn iou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for (s, e) in [a, b] {
        if s.is_nan() || e.is_nan() || s > e {
            return Err(Error::invalid(
                "iou",
                format!("span ({s}, {e}) is not ordered"),
            ));
        }
    }
    let union = a.1.max(b.1) - a.0.min(b.0);
    if union == 0.0 {
        return Ok(1.0);
    }
    let overlap = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    Ok(overlap / union)
}

/// Percentages of samples at or above each IoU threshold, and the mean IoU.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub iou_at: Vec<(f64, f64)>,
    pub miou: f64,
    pub n: usize,
}

impl MetricsReport {
    pub fn from_ious(ious: &[f64], thresholds: &[f64]) -> Result<Self> {
        if ious.is_empty() {
            return Err(Error::invalid("metrics", "no samples"));
        }
        let n = ious.len();
        let pct = |k: usize| k as f64 * 100.0 / n as f64;
        let iou_at = thresholds
            .iter()
            .map(|&mu| (mu, pct(ious.iter().filter(|&&v| v >= mu).count())))
            .collect();
        let miou = ious.iter().sum::<f64>() / n as f64 * 100.0;
        Ok(MetricsReport { iou_at, miou, n })
    }

    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.iou_at
            .iter()
            .find(|(mu, _)| *mu == threshold)
            .map(|&(_, p)| p)
    }

    /// Scores never increase as the threshold rises.
    pub fn is_monotone(&self) -> bool {
        let mut sorted = self.iou_at.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        sorted.windows(2).all(|w| w[0].1 >= w[1].1)
    }
}

impl Serialize for MetricsReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.iou_at.len() + 2))?;
        for (mu, pct) in &self.iou_at {
            map.serialize_entry(&format!("iou@{mu}"), pct)?;
        }
        map.serialize_entry("miou", &self.miou)?;
        map.serialize_entry("n", &self.n)?;
        map.end()
    }
}

/// Top-1 prediction for one sample: frame indices and seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanPrediction {
    pub start_index: usize,
    pub end_index: usize,
    pub start_s: f64,
    pub end_s: f64,
}

/// Predicts every sample in batches of `batch_size`, without dropout or
/// corruption.
pub fn predict_spans<F: Real>(
    model: &PortModel,
    store: &ParamStore<F>,
    samples: &[PreparedSample],
    batch_size: usize,
) -> Result<Vec<SpanPrediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        let batch = Batch::<F>::new(&refs)?;
        for (dist, s) in model.predict(store, &batch)?.iter().zip(chunk) {
            let (i, j) = select_span(dist)?;
            let valid = s.labels.valid_len;
            let dur = s.annotation.duration_s;
            out.push(SpanPrediction {
                start_index: i,
                end_index: j,
                start_s: index_to_time(i, valid, dur),
                end_s: index_to_time(j, valid, dur),
            });
        }
    }
    Ok(out)
}

/// Recall@1 at each threshold plus mean IoU against the annotated spans.
pub fn evaluate<F: Real>(
    model: &PortModel,
    store: &ParamStore<F>,
    samples: &[PreparedSample],
    thresholds: &[f64],
    batch_size: usize,
) -> Result<MetricsReport> {
    let preds = predict_spans(model, store, samples, batch_size)?;
    let ious = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| {
            iou(
                (p.start_s, p.end_s),
                (s.annotation.start_s, s.annotation.end_s),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_ious(&ious, thresholds)
}

/// How often the recovering branch puts its argmax within `tolerance`
/// indices of the true boundaries.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RecoveryAccuracy {
    pub start: f64,
    pub end: f64,
    /// Both boundaries within tolerance.
    pub both: f64,
    pub n: usize,
}

fn argmax_valid(p: &[f64], valid: &[bool]) -> usize {
    let mut best = 0;
    let mut val = f64::NEG_INFINITY;
    for (i, (&v, &m)) in p.iter().zip(valid).enumerate() {
        if m && v > val {
            best = i;
            val = v;
        }
    }
    best
}

/// Runs the recovering branch on freshly sampled corruptions drawn from
/// `rng` and scores its argmax boundaries.
pub fn recovery_accuracy<F: Real, R: rand::Rng>(
    model: &PortModel,
    store: &ParamStore<F>,
    samples: &[PreparedSample],
    alpha: f64,
    tolerance: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<RecoveryAccuracy> {
    if samples.is_empty() {
        return Err(Error::invalid("recovery_accuracy", "no samples"));
    }
    let (mut s_ok, mut e_ok, mut both) = (0usize, 0usize, 0usize);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        let batch = Batch::<F>::new(&refs)?;
        let corruption = Corruption::sample(&batch.labels, alpha, rng)?;
        let (_, rec) = model.predict_both(store, &batch, &corruption)?;
        for (r, l) in rec.iter().zip(&batch.labels) {
            let s = argmax_valid(&r.start, &r.valid).abs_diff(l.start) <= tolerance;
            let e = argmax_valid(&r.end, &r.valid).abs_diff(l.end) <= tolerance;
            s_ok += s as usize;
            e_ok += e as usize;
            both += (s && e) as usize;
        }
    }
    let n = samples.len();
    let frac = |k: usize| k as f64 / n as f64;
    Ok(RecoveryAccuracy {
        start: frac(s_ok),
        end: frac(e_ok),
        both: frac(both),
        n,
    })
}
