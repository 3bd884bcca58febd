use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use port_core::analysis::{dataset_stats, position_heatmap, write_report};
use port_core::autodiff::ParamStore;
use port_core::data::{
    generate_synthetic, load_annotations, load_manifest, prepare_all, read_features,
    split_by_index, write_manifest, Annotation, HashEmbedder, PreparedSample, Sample,
};
use port_core::model::{model_grad_check, CheckSize, PortModel, GRAD_CHECK_EPS, GRAD_CHECK_SEED};
use port_core::train::{
    evaluate, load_checkpoint, predict_spans, save_checkpoint, train as run_training, EpochLog,
    MetricsReport, Observer, StepLog, THRESHOLDS,
};
use port_core::write_atomic;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::exit::InputError;
use crate::{Size, Split};

pub const CONFIG_FILE: &str = "config.json";
pub const STEP_LOG: &str = "train_log.jsonl";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

/// Gradient checks at or above this error exit with a runtime failure.
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub struct Globals {
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(InputError::wrap)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

fn jsonl<T: Serialize>(rows: &[T]) -> port_core::Result<Vec<u8>> {
    let mut bytes = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut bytes, r)?;
        bytes.push(b'\n');
    }
    Ok(bytes)
}

pub fn gen_data(g: &Globals, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = RunConfig::resolve(config, &g.overrides, g.seed)?;
    let samples = generate_synthetic(&cfg.synthetic())?;
    create_dir(out)?;
    write_manifest(out, &samples)?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    println!("{}", json!({ "samples": samples.len(), "out": out }));
    Ok(())
}

pub fn stats(annotations: &Path, bins: usize, out: &Path) -> Result<()> {
    let anns = load_annotations(annotations)?;
    let stats = dataset_stats(&anns)?;
    let map = position_heatmap(&anns, bins)?;
    write_report(out, &stats, &map)?;
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

fn load_prepared(data: &Path, query_dim: usize, len: usize) -> Result<Vec<PreparedSample>> {
    let samples = load_manifest(data, &HashEmbedder::new(query_dim))?;
    if samples.is_empty() {
        return Err(InputError::msg(format!(
            "{} holds no annotations",
            data.display()
        )));
    }
    Ok(prepare_all(&samples, len)?)
}

struct RunWriter<'a> {
    out: &'a Path,
    cfg: &'a RunConfig,
    steps: Vec<StepLog>,
    epochs: Vec<EpochLog>,
    started: Instant,
}

impl Observer<f32> for RunWriter<'_> {
    fn on_step(&mut self, log: &StepLog) -> port_core::Result<()> {
        self.steps.push(*log);
        Ok(())
    }

    fn on_epoch(
        &mut self,
        log: &EpochLog,
        _: &PortModel,
        store: &ParamStore<f32>,
        best: bool,
    ) -> port_core::Result<()> {
        self.epochs.push(log.clone());
        let model = self.cfg.model();
        save_checkpoint(&self.out.join(LAST_CKPT), &model, store)?;
        if best {
            save_checkpoint(&self.out.join(BEST_CKPT), &model, store)?;
        }
        // Whole-file rewrites keep each log consistent with the checkpoints.
        write_atomic(&self.out.join(STEP_LOG), &jsonl(&self.steps)?)?;
        write_atomic(&self.out.join(EPOCH_LOG), &jsonl(&self.epochs)?)?;
        let miou = log
            .metrics
            .as_ref()
            .map(|m| format!(" miou={:.2}", m.miou))
            .unwrap_or_default();
        eprintln!(
            "epoch {}/{}{miou} ({:.1}s)",
            log.epoch + 1,
            self.cfg.epochs,
            self.started.elapsed().as_secs_f64()
        );
        Ok(())
    }
}

pub fn train(g: &Globals, config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::resolve(config, &g.overrides, g.seed)?;
    let prepared = load_prepared(data, cfg.query_dim, cfg.len)?;
    let width = prepared[0].video_dim();
    if width != cfg.video_dim {
        return Err(InputError::msg(format!(
            "features are {width}-d but video_dim is {}",
            cfg.video_dim
        )));
    }
    let (train_set, val_set) = split_by_index(&prepared, cfg.train_fraction);
    create_dir(out)?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;

    let mut writer = RunWriter {
        out,
        cfg: &cfg,
        steps: Vec::new(),
        epochs: Vec::new(),
        started: Instant::now(),
    };
    let outcome = run_training::<f32>(&cfg.train(), &train_set, &val_set, &mut writer)?;
    let last = outcome.epochs.last().and_then(|e| e.metrics.clone());
    let summary = json!({
        "train": train_set.len(),
        "val": val_set.len(),
        "steps": outcome.steps.len(),
        "last": last,
        "best_epoch": outcome.best.as_ref().map(|b| b.0),
        "best_miou": outcome.best.as_ref().map(|b| b.1),
    });
    println!("{summary}");
    Ok(())
}

pub fn metrics_table(label: &str, m: &MetricsReport) -> String {
    let mut head = String::from("| Method |");
    let mut rule = String::from("|--------|");
    let mut row = format!("| {label} |");
    for (mu, pct) in &m.iou_at {
        head.push_str(&format!(" IoU={mu} |"));
        rule.push_str("---------|");
        row.push_str(&format!(" {pct:.2} |"));
    }
    head.push_str(" mIoU |");
    rule.push_str("------|");
    row.push_str(&format!(" {:.2} |", m.miou));
    format!("{head}\n{rule}\n{row}\n")
}

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    split: Split,
    train_fraction: f64,
    label: &str,
) -> Result<()> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(InputError::msg(format!(
            "train_fraction must lie in (0, 1], got {train_fraction}"
        )));
    }
    let (model, store) = load_checkpoint::<f32>(checkpoint)?;
    let prepared = load_prepared(data, model.cfg.query_dim, model.cfg.len)?;
    let samples = match split {
        Split::All => prepared,
        Split::Train => split_by_index(&prepared, train_fraction).0,
        Split::Val => split_by_index(&prepared, train_fraction).1,
    };
    if samples.is_empty() {
        return Err(InputError::msg("selected split is empty"));
    }
    let report = evaluate(&model, &store, &samples, &THRESHOLDS, 16)?;
    write_json(out, &report)?;
    print!("{}", metrics_table(label, &report));
    Ok(())
}

pub fn predict(checkpoint: &Path, features: &Path, query: &str, duration_s: f64) -> Result<()> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(InputError::msg(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    let (model, store) = load_checkpoint::<f32>(checkpoint)?;
    let video = read_features(features)?;
    if video.cols != model.cfg.video_dim {
        return Err(InputError::msg(format!(
            "features are {}-d but the model expects {}",
            video.cols, model.cfg.video_dim
        )));
    }
    let ann = Annotation {
        video_id: features.display().to_string(),
        duration_s,
        start_s: 0.0,
        end_s: 0.0,
        query: query.to_string(),
    };
    let sample = Sample::new(ann, video, &HashEmbedder::new(model.cfg.query_dim));
    let prepared = PreparedSample::new(&sample, model.cfg.len)?;
    let p = predict_spans(&model, &store, std::slice::from_ref(&prepared), 1)?[0];
    let out = json!({
        "start_s": p.start_s,
        "end_s": p.end_s,
        "start_index": p.start_index,
        "end_index": p.end_index,
    });
    println!("{out}");
    Ok(())
}

pub fn gradcheck(g: &Globals, size: Size) -> Result<()> {
    let size = match size {
        Size::Tiny => CheckSize::Tiny,
    };
    let started = Instant::now();
    let report = model_grad_check(
        size,
        g.seed.unwrap_or(GRAD_CHECK_SEED),
        GRAD_CHECK_EPS,
        true,
    )?;
    let worst = report.worst.as_ref().map(|(n, k)| format!("{n}[{k}]"));
    let out = json!({
        "max_rel_error": report.max_rel_error,
        "checked": report.checked,
        "worst": worst,
        "seconds": started.elapsed().as_secs_f64(),
    });
    println!("{out}");
    if report.max_rel_error.is_nan() || report.max_rel_error >= GRAD_TOLERANCE {
        anyhow::bail!(
            "max relative error {:e} is not below {GRAD_TOLERANCE:e}",
            report.max_rel_error
        );
    }
    Ok(())
}
