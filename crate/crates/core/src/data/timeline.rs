use serde::{Deserialize, Serialize};

use super::Annotation;
use crate::error::{Error, Result};

/// Maps a time to a sequence index: round-half-up of `tau / duration * len`,
/// clamped to `[0, len - 1]`.
pub fn time_to_index(tau: f64, duration: f64, len: usize) -> Result<usize> {
    if duration.is_nan() || duration <= 0.0 {
        return Err(Error::invalid(
            "time_to_index",
            format!("duration {duration} must be positive"),
        ));
    }
    if len == 0 {
        return Err(Error::invalid("time_to_index", "sequence length is zero"));
    }
    let x = (tau / duration * len as f64 + 0.5).floor();
    Ok(x.clamp(0.0, (len - 1) as f64) as usize)
}

/// `i / len * duration`.
pub fn index_to_time(i: usize, len: usize, duration: f64) -> f64 {
    i as f64 / len as f64 * duration
}

/// Resamples a `raw_len × dim` row-major matrix to `len` rows.
///
/// Longer inputs are subsampled at rows `⌊k·raw_len/len⌋`; shorter ones are
/// copied and zero-padded. Returns the resampled rows, the valid-row mask and
/// the valid length.
pub fn resample_features(
    raw: &[f32],
    raw_len: usize,
    dim: usize,
    len: usize,
) -> (Vec<f32>, Vec<bool>, usize) {
    debug_assert_eq!(raw.len(), raw_len * dim);
    let mut out = vec![0.0f32; len * dim];
    let valid = raw_len.min(len);
    if raw_len > len {
        for k in 0..len {
            let src = k * raw_len / len;
            out[k * dim..(k + 1) * dim].copy_from_slice(&raw[src * dim..(src + 1) * dim]);
        }
    } else {
        out[..raw_len * dim].copy_from_slice(raw);
    }
    let mask = (0..len).map(|k| k < valid).collect();
    (out, mask, valid)
}

/// Per-sample supervision on a padded sequence of length `len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanLabels {
    pub start: usize,
    pub end: usize,
    pub valid_len: usize,
    pub len: usize,
}

impl SpanLabels {
    pub fn y_start(&self) -> Vec<f64> {
        self.one_hot(self.start)
    }

    pub fn y_end(&self) -> Vec<f64> {
        self.one_hot(self.end)
    }

    /// Foreground mask: 1 exactly on `[start, end]`.
    pub fn y_highlight(&self) -> Vec<f64> {
        (0..self.len)
            .map(|t| {
                if (self.start..=self.end).contains(&t) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.len).map(|t| t < self.valid_len).collect()
    }

    fn one_hot(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.len];
        v[i] = 1.0;
        v
    }
}

/// Boundary labels for `ann` on a timeline of `valid_len` real steps padded
/// to `len`.
pub fn make_labels(ann: &Annotation, valid_len: usize, len: usize) -> Result<SpanLabels> {
    if ann.start_s > ann.end_s {
        return Err(Error::InvalidSpan(format!(
            "start {} after end {}",
            ann.start_s, ann.end_s
        )));
    }
    if valid_len == 0 || valid_len > len {
        return Err(Error::invalid(
            "make_labels",
            format!("valid length {valid_len} not in 1..={len}"),
        ));
    }
    let start = time_to_index(ann.start_s, ann.duration_s, valid_len)?;
    let end = time_to_index(ann.end_s, ann.duration_s, valid_len)?;
    Ok(SpanLabels {
        start,
        end,
        valid_len,
        len,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ann(duration: f64, start: f64, end: f64) -> Annotation {
        Annotation {
            video_id: "v".into(),
            duration_s: duration,
            start_s: start,
            end_s: end,
            query: String::new(),
        }
    }

    #[test]
    fn time_to_index_examples() {
        assert_eq!(time_to_index(0.0, 38.15, 128).unwrap(), 0);
        assert_eq!(time_to_index(19.075, 38.15, 128).unwrap(), 64);
        assert_eq!(time_to_index(10.1, 38.15, 128).unwrap(), 34);
        assert_eq!(time_to_index(38.15, 38.15, 128).unwrap(), 127);
        assert!(time_to_index(1.0, 0.0, 128).is_err());
    }

    #[test]
    fn index_to_time_examples() {
        assert_eq!(index_to_time(0, 128, 38.15), 0.0);
        assert!((index_to_time(64, 128, 38.15) - 19.075).abs() < 1e-12);
    }

    #[test]
    fn resample_identity_stride_and_pad() {
        let raw: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let (out, mask, valid) = resample_features(&raw, 8, 2, 8);
        assert_eq!(out, raw);
        assert!(mask.iter().all(|&m| m));
        assert_eq!(valid, 8);

        let (out, _, _) = resample_features(&raw, 8, 2, 4);
        assert_eq!(out, vec![0.0, 1.0, 4.0, 5.0, 8.0, 9.0, 12.0, 13.0]);

        let (out, mask, valid) = resample_features(&raw[..10], 5, 2, 8);
        assert_eq!(&out[..10], &raw[..10]);
        assert!(out[10..].iter().all(|&v| v == 0.0));
        assert_eq!(
            mask,
            vec![true, true, true, true, true, false, false, false]
        );
        assert_eq!(valid, 5);
    }

    #[test]
    fn make_labels_examples() {
        let l = make_labels(&ann(38.15, 10.1, 16.4), 128, 128).unwrap();
        assert_eq!((l.start, l.end), (34, 55));

        let whole = make_labels(&ann(10.0, 0.0, 10.0), 6, 8).unwrap();
        assert_eq!(
            whole.y_highlight(),
            vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]
        );

        let point = make_labels(&ann(10.0, 3.0, 3.0), 8, 8).unwrap();
        assert_eq!(point.start, point.end);
        assert_eq!(point.y_highlight().iter().sum::<f64>(), 1.0);
        assert_eq!(point.y_start().iter().sum::<f64>(), 1.0);

        assert!(make_labels(&ann(10.0, 5.0, 3.0), 8, 8).is_err());
    }

    proptest! {
        #[test]
        fn time_to_index_is_monotone(duration in 0.5f64..200.0, a in 0.0f64..1.0, b in 0.0f64..1.0, len in 1usize..300) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(time_to_index(lo * duration, duration, len).unwrap()
                <= time_to_index(hi * duration, duration, len).unwrap());
        }

        #[test]
        fn labels_have_positive_foreground(duration in 0.5f64..200.0, a in 0.0f64..1.0, b in 0.0f64..1.0, len in 1usize..200) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let l = make_labels(&ann(duration, lo * duration, hi * duration), len, len).unwrap();
            prop_assert!(l.start <= l.end && l.end < len);
            prop_assert_eq!(l.y_highlight().iter().sum::<f64>() as usize, l.end - l.start + 1);
        }
    }
}
