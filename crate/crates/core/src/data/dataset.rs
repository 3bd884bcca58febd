use std::collections::HashMap;
use std::path::Path;

use super::{
    load_annotations, make_labels, read_features, resample_features, write_annotations,
    write_features, Annotation, FeatureMatrix, HashEmbedder, SpanLabels, SyntheticSample,
};
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const FEATURE_EXT: &str = "pft";

/// A raw (video features, query embedding, annotation) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub annotation: Annotation,
    pub video: FeatureMatrix,
    pub query: FeatureMatrix,
}

impl Sample {
    pub fn new(annotation: Annotation, video: FeatureMatrix, embedder: &HashEmbedder) -> Self {
        let query = embedder.embed_query(&annotation.query);
        Sample {
            annotation,
            video,
            query,
        }
    }

    pub fn from_synthetic(s: SyntheticSample, embedder: &HashEmbedder) -> Self {
        Sample::new(s.annotation, s.features, embedder)
    }
}

/// A sample resampled to the model's fixed length, with labels.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub annotation: Annotation,
    /// `len × video_dim`, zero-padded past `labels.valid_len`.
    pub video: Vec<f32>,
    pub query: FeatureMatrix,
    pub labels: SpanLabels,
}

impl PreparedSample {
    pub fn new(sample: &Sample, len: usize) -> Result<Self> {
        if sample.video.rows == 0 {
            return Err(Error::invalid(
                "prepare",
                format!("video `{}` has no frames", sample.annotation.video_id),
            ));
        }
        let (video, _mask, valid) = resample_features(
            &sample.video.data,
            sample.video.rows,
            sample.video.cols,
            len,
        );
        let labels = make_labels(&sample.annotation, valid, len)?;
        Ok(PreparedSample {
            annotation: sample.annotation.clone(),
            video,
            query: sample.query.clone(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len
    }

    pub fn is_empty(&self) -> bool {
        self.labels.len == 0
    }

    pub fn video_dim(&self) -> usize {
        self.video.len() / self.labels.len.max(1)
    }
}

pub fn prepare_all(samples: &[Sample], len: usize) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| PreparedSample::new(s, len))
        .collect()
}

/// Split by sample index: the first `⌈train_frac·n⌉` samples train.
pub fn split_by_index<T: Clone>(items: &[T], train_frac: f64) -> (Vec<T>, Vec<T>) {
    let cut = ((items.len() as f64) * train_frac).round() as usize;
    let cut = cut.min(items.len());
    (items[..cut].to_vec(), items[cut..].to_vec())
}

/// Padded minibatch. The video is `[B, T, d_v]`, the query `[B, N, d_w]`
/// with `N` the longest query in the batch.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    pub size: usize,
    pub len: usize,
    pub query_len: usize,
    pub video: Tensor<F>,
    pub video_mask: Vec<bool>,
    pub query: Tensor<F>,
    pub query_mask: Vec<bool>,
    pub labels: Vec<SpanLabels>,
}

impl<F: Real> Batch<F> {
    pub fn new(samples: &[&PreparedSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("batch", "empty batch"))?;
        let (len, dv, dw) = (first.len(), first.video_dim(), first.query.cols);
        let query_len = samples.iter().map(|s| s.query.rows).max().unwrap_or(1);
        let b = samples.len();
        let mut video = Vec::with_capacity(b * len * dv);
        let mut video_mask = Vec::with_capacity(b * len);
        let mut query = vec![F::zero(); b * query_len * dw];
        let mut query_mask = vec![false; b * query_len];
        for (i, s) in samples.iter().enumerate() {
            if s.len() != len || s.video_dim() != dv || s.query.cols != dw {
                return Err(Error::shape(
                    "batch",
                    &[len, dv, dw],
                    &[s.len(), s.video_dim(), s.query.cols],
                ));
            }
            video.extend(s.video.iter().map(|&v| F::of(v as f64)));
            video_mask.extend(s.labels.valid_mask());
            for r in 0..s.query.rows {
                let o = (i * query_len + r) * dw;
                for (dst, &v) in query[o..o + dw].iter_mut().zip(s.query.row(r)) {
                    *dst = F::of(v as f64);
                }
                query_mask[i * query_len + r] = true;
            }
        }
        Ok(Batch {
            size: b,
            len,
            query_len,
            video: Tensor::new(&[b, len, dv], video)?,
            video_mask,
            query: Tensor::new(&[b, query_len, dw], query)?,
            query_mask,
            labels: samples.iter().map(|s| s.labels.clone()).collect(),
        })
    }

    pub fn start_targets(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.start).collect()
    }

    pub fn end_targets(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.end).collect()
    }

    pub fn highlight_targets(&self) -> Vec<F> {
        self.labels
            .iter()
            .flat_map(|l| l.y_highlight())
            .map(F::of)
            .collect()
    }
}

/// Writes `annotations.jsonl` plus one `<video_id>.pft` per distinct video.
pub fn write_manifest(dir: impl AsRef<Path>, samples: &[SyntheticSample]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        write_features(
            dir.join(format!("{}.{FEATURE_EXT}", s.annotation.video_id)),
            &s.features,
        )?;
    }
    let mut buf = Vec::new();
    let anns: Vec<Annotation> = samples.iter().map(|s| s.annotation.clone()).collect();
    write_annotations(&mut buf, &anns)?;
    crate::fsutil::write_atomic(&dir.join(ANNOTATIONS_FILE), &buf)
}

/// Loads a manifest directory, embedding each query with `embedder`.
pub fn load_manifest(dir: impl AsRef<Path>, embedder: &HashEmbedder) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let annotations = load_annotations(dir.join(ANNOTATIONS_FILE))?;
    let mut cache: HashMap<String, FeatureMatrix> = HashMap::new();
    let mut out = Vec::with_capacity(annotations.len());
    for ann in annotations {
        let video = match cache.get(&ann.video_id) {
            Some(v) => v.clone(),
            None => {
                let v = read_features(dir.join(format!("{}.{FEATURE_EXT}", ann.video_id)))?;
                cache.insert(ann.video_id.clone(), v.clone());
                v
            }
        };
        out.push(Sample::new(ann, video, embedder));
    }
    Ok(out)
}
