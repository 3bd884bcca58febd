//! Dataset diagnostics: length statistics and the (start, duration) heatmap.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;

use crate::data::Annotation;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub count: usize,
    /// Averaged over distinct `video_id`s.
    pub mean_video_len_s: f64,
    pub mean_moment_len_s: f64,
    /// Mean of per-annotation `moment / video` ratios.
    pub mean_normalized_moment_len: f64,
}

pub fn dataset_stats(annotations: &[Annotation]) -> Result<DatasetStats> {
    if annotations.is_empty() {
        return Err(Error::invalid("dataset_stats", "no annotations"));
    }
    let n = annotations.len() as f64;

    // A video id listed with conflicting durations keeps the largest.
    let mut videos: HashMap<&str, f64> = HashMap::new();
    for a in annotations {
        let d = videos.entry(a.video_id.as_str()).or_insert(a.duration_s);
        *d = d.max(a.duration_s);
    }
    // Sorted so the sum does not depend on hash order.
    let mut durations: Vec<f64> = videos.into_values().collect();
    durations.sort_by(f64::total_cmp);
    let mean_video = durations.iter().sum::<f64>() / durations.len() as f64;

    let mut moments: Vec<f64> = annotations.iter().map(Annotation::moment_len_s).collect();
    let mut ratios: Vec<f64> = annotations
        .iter()
        .map(|a| a.moment_len_s() / a.duration_s)
        .collect();
    moments.sort_by(f64::total_cmp);
    ratios.sort_by(f64::total_cmp);

    Ok(DatasetStats {
        count: annotations.len(),
        mean_video_len_s: mean_video,
        mean_moment_len_s: moments.iter().sum::<f64>() / n,
        mean_normalized_moment_len: ratios.iter().sum::<f64>() / n,
    })
}

/// Percentage grid over normalized start (columns) and duration (rows).
#[derive(Debug, Clone, PartialEq)]
pub struct PositionHeatmap {
    pub bins: usize,
    pub samples: usize,
    counts: Vec<usize>,
}

impl PositionHeatmap {
    fn index(&self, start_bin: usize, duration_bin: usize) -> usize {
        duration_bin * self.bins + start_bin
    }

    pub fn count(&self, start_bin: usize, duration_bin: usize) -> usize {
        self.counts[self.index(start_bin, duration_bin)]
    }

    pub fn percent(&self, start_bin: usize, duration_bin: usize) -> f64 {
        self.count(start_bin, duration_bin) as f64 * 100.0 / self.samples as f64
    }

    /// Row-major by duration bin, each row ordered by start bin.
    pub fn percentages(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&c| c as f64 * 100.0 / self.samples as f64)
            .collect()
    }

    /// A cell can hold a moment only if some point of it has
    /// `start + duration <= 1` with positive area.
    pub fn is_feasible(&self, start_bin: usize, duration_bin: usize) -> bool {
        start_bin + duration_bin < self.bins
    }

    pub fn occupied(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn max_percent(&self) -> f64 {
        self.counts.iter().copied().max().unwrap_or(0) as f64 * 100.0 / self.samples as f64
    }

    pub fn mean_occupied_percent(&self) -> f64 {
        100.0 / self.occupied() as f64
    }

    /// Largest cell over the mean occupied cell; 1 when perfectly flat.
    pub fn peak_ratio(&self) -> f64 {
        self.max_percent() / self.mean_occupied_percent()
    }
}

fn bin_of(fraction: f64, bins: usize) -> usize {
    ((fraction * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

pub fn position_heatmap(annotations: &[Annotation], bins: usize) -> Result<PositionHeatmap> {
    if bins == 0 {
        return Err(Error::invalid("position_heatmap", "need at least one bin"));
    }
    if annotations.is_empty() {
        return Err(Error::invalid("position_heatmap", "no annotations"));
    }
    let mut map = PositionHeatmap {
        bins,
        samples: annotations.len(),
        counts: vec![0; bins * bins],
    };
    for a in annotations {
        let x = bin_of(a.start_s / a.duration_s, bins);
        let y = bin_of(a.moment_len_s() / a.duration_s, bins);
        let i = map.index(x, y);
        map.counts[i] += 1;
    }
    Ok(map)
}

/// Shannon entropy of `cells` divided by `ln(support)`. Zero cells are
/// skipped; a support of one cell scores 0.
pub fn normalized_entropy(cells: &[f64], support: usize) -> Result<f64> {
    let total: f64 = cells.iter().sum();
    if total.is_nan() || total <= 0.0 || cells.iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return Err(Error::invalid(
            "normalized_entropy",
            "cells must be finite, non-negative and not all zero",
        ));
    }
    let occupied = cells.iter().filter(|&&c| c > 0.0).count();
    if support < occupied {
        return Err(Error::invalid(
            "normalized_entropy",
            format!("support {support} smaller than {occupied} occupied cells"),
        ));
    }
    if support <= 1 {
        return Ok(0.0);
    }
    let h: f64 = cells
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.ln()
        })
        .sum();
    Ok((h / (support as f64).ln()).clamp(0.0, 1.0))
}

/// Normalized entropy over the feasible triangle. Occupied cells outside it
/// (only reachable through clamping) widen the support instead of being
/// dropped.
pub fn uniformity_score(map: &PositionHeatmap) -> Result<f64> {
    let b = map.bins;
    let support = (0..b)
        .flat_map(|y| (0..b).map(move |x| (x, y)))
        .filter(|&(x, y)| map.is_feasible(x, y) || map.count(x, y) > 0)
        .count();
    normalized_entropy(&map.percentages(), support)
}

pub fn stats_csv(stats: &DatasetStats) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(stats).map_err(csv_error)?;
    w.into_inner()
        .map_err(|e| Error::invalid("stats_csv", e.to_string()))
}

/// One row per duration bin, ascending; one column per start bin.
pub fn heatmap_csv(map: &PositionHeatmap) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    let pct = map.percentages();
    for row in pct.chunks(map.bins) {
        w.serialize(row).map_err(csv_error)?;
    }
    w.into_inner()
        .map_err(|e| Error::invalid("heatmap_csv", e.to_string()))
}

pub fn heatmap_meta(map: &PositionHeatmap) -> String {
    format!("bins={} samples={}\n", map.bins, map.samples)
}

pub const STATS_FILE: &str = "stats.csv";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const HEATMAP_META_FILE: &str = "heatmap_meta.txt";

/// Writes the three report files into `dir`, each atomically.
pub fn write_report(dir: &Path, stats: &DatasetStats, map: &PositionHeatmap) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(STATS_FILE), &stats_csv(stats)?)?;
    write_atomic(&dir.join(HEATMAP_FILE), &heatmap_csv(map)?)?;
    write_atomic(&dir.join(HEATMAP_META_FILE), heatmap_meta(map).as_bytes())
}

fn csv_error(e: csv::Error) -> Error {
    Error::invalid("csv", e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, PositionMode, SyntheticConfig};
    use proptest::prelude::*;

    fn ann(video: &str, duration: f64, start: f64, end: f64) -> Annotation {
        Annotation {
            video_id: video.into(),
            duration_s: duration,
            start_s: start,
            end_s: end,
            query: "q".into(),
        }
    }

    #[test]
    fn single_annotation_stats() {
        let s = dataset_stats(&[ann("a", 10.0, 2.0, 4.0)]).unwrap();
        assert_eq!(s.count, 1);
        assert_eq!(s.mean_video_len_s, 10.0);
        assert_eq!(s.mean_moment_len_s, 2.0);
        assert_eq!(s.mean_normalized_moment_len, 0.2);
    }

    #[test]
    fn normalized_length_is_mean_of_ratios() {
        let s = dataset_stats(&[ann("a", 10.0, 0.0, 5.0), ann("b", 100.0, 0.0, 5.0)]).unwrap();
        assert!((s.mean_normalized_moment_len - 0.275).abs() < 1e-15);
        assert!((s.mean_moment_len_s / s.mean_video_len_s - 5.0 / 55.0).abs() < 1e-15);
    }

    #[test]
    fn repeated_videos_count_once() {
        let anns = [
            ann("a", 10.0, 0.0, 1.0),
            ann("a", 10.0, 2.0, 3.0),
            ann("a", 10.0, 4.0, 5.0),
            ann("b", 40.0, 0.0, 1.0),
        ];
        assert_eq!(dataset_stats(&anns).unwrap().mean_video_len_s, 25.0);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(dataset_stats(&[]).is_err());
        assert!(position_heatmap(&[], 10).is_err());
        assert!(position_heatmap(&[ann("a", 1.0, 0.0, 1.0)], 0).is_err());
    }

    #[test]
    fn single_annotation_fills_one_cell() {
        let map = position_heatmap(&[ann("a", 10.0, 3.5, 5.0)], 10).unwrap();
        assert_eq!(map.percent(3, 1), 100.0);
        assert_eq!(map.occupied(), 1);
        assert_eq!(uniformity_score(&map).unwrap(), 0.0);
    }

    #[test]
    fn full_video_moment_clamps_to_the_top_row() {
        for b in [1, 4, 10] {
            let map = position_heatmap(&[ann("a", 7.0, 0.0, 7.0)], b).unwrap();
            assert_eq!(map.percent(0, b - 1), 100.0);
        }
    }

    #[test]
    fn zero_length_moment_at_the_end_clamps_start() {
        let map = position_heatmap(&[ann("a", 7.0, 7.0, 7.0)], 10).unwrap();
        assert_eq!(map.percent(9, 0), 100.0);
    }

    #[test]
    fn flat_feasible_region_scores_one() {
        let b = 5;
        let mut anns = Vec::new();
        for x in 0..b {
            for y in 0..b - x {
                let start = (x as f64 + 0.5) / b as f64;
                let len = (y as f64 + 0.1) / b as f64;
                anns.push(ann("v", 1.0, start, start + len));
            }
        }
        let map = position_heatmap(&anns, b).unwrap();
        assert_eq!(map.occupied(), b * (b + 1) / 2);
        assert!((uniformity_score(&map).unwrap() - 1.0).abs() < 1e-12);
        assert!((map.peak_ratio() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_cell_even_split_has_full_entropy() {
        assert!((normalized_entropy(&[50.0, 50.0], 2).unwrap() - 1.0).abs() < 1e-15);
        assert!((normalized_entropy(&[50.0, 50.0, 0.0, 0.0], 4).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(normalized_entropy(&[100.0], 1).unwrap(), 0.0);
        assert!(normalized_entropy(&[1.0, 1.0], 1).is_err());
        assert!(normalized_entropy(&[0.0], 1).is_err());
    }

    #[test]
    fn uniform_synthetic_heatmap_is_flat() {
        let cfg = SyntheticConfig {
            num_samples: 10_000,
            raw_len_min: 4,
            raw_len_max: 4,
            video_dim: 1,
            query_dim: 1,
            position_mode: PositionMode::Uniform,
            seed: 11,
            ..SyntheticConfig::default()
        };
        let anns: Vec<_> = generate_synthetic(&cfg)
            .unwrap()
            .into_iter()
            .map(|s| s.annotation)
            .collect();
        let map = position_heatmap(&anns, DEFAULT_BINS).unwrap();
        assert!(map.peak_ratio() < 3.0, "{}", map.peak_ratio());
        let total: f64 = map.percentages().iter().sum();
        assert!((total - 100.0).abs() < 1e-9);

        let mut biased = cfg.clone();
        biased.position_mode = PositionMode::Biased;
        let anns: Vec<_> = generate_synthetic(&biased)
            .unwrap()
            .into_iter()
            .map(|s| s.annotation)
            .collect();
        let skewed = position_heatmap(&anns, DEFAULT_BINS).unwrap();
        assert!(uniformity_score(&skewed).unwrap() < uniformity_score(&map).unwrap());
    }

    #[test]
    fn csv_output_shapes() {
        let anns = [ann("a", 10.0, 2.0, 4.0), ann("b", 20.0, 0.0, 20.0)];
        let stats = dataset_stats(&anns).unwrap();
        let text = String::from_utf8(stats_csv(&stats).unwrap()).unwrap();
        assert_eq!(
            text,
            "count,mean_video_len_s,mean_moment_len_s,mean_normalized_moment_len\n2,15.0,11.0,0.6\n"
        );

        let map = position_heatmap(&anns, 3).unwrap();
        let grid = String::from_utf8(heatmap_csv(&map).unwrap()).unwrap();
        assert_eq!(grid, "50.0,0.0,0.0\n0.0,0.0,0.0\n50.0,0.0,0.0\n");
        assert_eq!(heatmap_meta(&map), "bins=3 samples=2\n");

        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &stats, &map).unwrap();
        assert_eq!(
            std::fs::read_to_string(dir.path().join(HEATMAP_FILE)).unwrap(),
            grid
        );
    }

    fn arb_annotation() -> impl Strategy<Value = Annotation> {
        (1e-3f64..1e3, 0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(d, a, b)| {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            ann(
                &format!("v{}", (d * 7.0) as u64 % 5),
                d,
                lo * d,
                (hi * d).min(d),
            )
        })
    }

    proptest! {
        #[test]
        fn heatmap_totals_one_hundred(anns in prop::collection::vec(arb_annotation(), 1..200), b in 1usize..16) {
            let map = position_heatmap(&anns, b).unwrap();
            let total: f64 = map.percentages().iter().sum();
            prop_assert!((total - 100.0).abs() < 1e-9);
            let counted: usize = (0..b).flat_map(|y| (0..b).map(move |x| (x, y))).map(|(x, y)| map.count(x, y)).sum();
            prop_assert_eq!(counted, anns.len());
            let u = uniformity_score(&map).unwrap();
            prop_assert!((0.0..=1.0).contains(&u));
        }

        #[test]
        fn stats_ignore_order(anns in prop::collection::vec(arb_annotation(), 1..50), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = anns.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = dataset_stats(&anns).unwrap();
            let b = dataset_stats(&shuffled).unwrap();
            prop_assert_eq!(a.count, b.count);
            prop_assert_eq!(a.mean_video_len_s, b.mean_video_len_s);
            prop_assert_eq!(a.mean_moment_len_s, b.mean_moment_len_s);
            prop_assert_eq!(a.mean_normalized_moment_len, b.mean_normalized_moment_len);
            prop_assert!(a.mean_normalized_moment_len >= 0.0 && a.mean_normalized_moment_len <= 1.0);
        }
    }
}
