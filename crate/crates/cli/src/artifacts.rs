//! File names and readers/writers for per-seed artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use wmark_core::metrics::{Histogram, ScoreSample};
use wmark_core::model::{load_checkpoint, save_checkpoint};
use wmark_core::{DetectionMetrics, MlpModel, Normalizer, Watermark};

use crate::error::CliError;

pub const CHECKPOINT: &str = "model.wmk1";
pub const NORMALIZER: &str = "normalizer.wmkn";
pub const ACCURACY: &str = "accuracy.csv";
pub const WATERMARK: &str = "watermark.wmkw";
pub const WATERMARK_TRACE: &str = "watermark_trace.csv";
pub const WATERMARK_ACCURACY: &str = "watermark_accuracy.csv";
pub const SWEEP: &str = "sweep.csv";
pub const SWEEP_BEST: &str = "sweep_best.json";
pub const SWEEP_WATERMARK: &str = "sweep_watermark.wmkw";
pub const SUMMARY: &str = "summary.csv";

pub fn metrics_file(tag: &str) -> String {
    format!("metrics_{tag}.csv")
}

pub fn scores_file(tag: &str, scorer: &str, ood: &str) -> String {
    format!("scores_{tag}_{scorer}_{ood}.csv")
}

pub fn histogram_file(tag: &str, scorer: &str, ood: &str) -> String {
    format!("hist_{tag}_{scorer}_{ood}.csv")
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn with_path(path: &Path, e: wmark_core::Error) -> CliError {
    match CliError::from(e) {
        CliError::Format(m) => CliError::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

pub fn load_model(path: &Path) -> Result<MlpModel, CliError> {
    load_checkpoint(&read(path)?).map_err(|e| with_path(path, e))
}

pub fn save_model(path: &Path, model: &MlpModel) -> Result<(), CliError> {
    write(path, &save_checkpoint(model))
}

pub fn load_normalizer(path: &Path) -> Result<Normalizer, CliError> {
    Normalizer::from_bytes(&read(path)?).map_err(|e| with_path(path, e))
}

pub fn load_watermark(path: &Path) -> Result<Watermark, CliError> {
    Watermark::from_bytes(&read(path)?).map_err(|e| with_path(path, e))
}

/// Serializes `rows` as CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    write(path, &bytes)
}

pub fn fixed6(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub scorer: String,
    pub watermarked: bool,
    pub ood_set: String,
    pub fpr95: String,
    pub auroc: String,
    pub aupr: String,
}

impl MetricsRow {
    pub fn new(scorer: &str, watermarked: bool, ood_set: &str, m: &DetectionMetrics) -> Self {
        MetricsRow {
            scorer: scorer.into(),
            watermarked,
            ood_set: ood_set.into(),
            fpr95: fixed6(m.fpr95),
            auroc: fixed6(m.auroc),
            aupr: fixed6(m.aupr),
        }
    }

    pub fn values(&self) -> Result<[f64; 3], CliError> {
        let p = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| CliError::Format(format!("bad metric value '{s}'")))
        };
        Ok([p(&self.fpr95)?, p(&self.auroc)?, p(&self.aupr)?])
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Result<Vec<MetricsRow>, csv::Error> = r.deserialize().collect();
    Ok(rows?)
}

#[derive(Serialize)]
struct ScoreRow {
    score: f64,
    is_id: u8,
}

pub fn write_scores(path: &Path, samples: &[ScoreSample]) -> Result<(), CliError> {
    let rows: Vec<ScoreRow> = samples
        .iter()
        .map(|s| ScoreRow {
            score: s.score,
            is_id: s.is_id as u8,
        })
        .collect();
    write_csv(path, &rows)
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct HistogramRow {
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub id_count: usize,
    pub ood_count: usize,
}

pub fn histogram_rows(h: &Histogram) -> Vec<HistogramRow> {
    (0..h.bins())
        .map(|i| {
            let (lo, hi) = h.bin_edges(i);
            HistogramRow {
                bin: i,
                lo,
                hi,
                id_count: h.id_counts[i],
                ood_count: h.ood_counts[i],
            }
        })
        .collect()
}

pub fn read_histogram(path: &Path) -> Result<Vec<HistogramRow>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Result<Vec<HistogramRow>, csv::Error> = r.deserialize().collect();
    Ok(rows?)
}

/// Seed directories under a run directory, sorted by seed.
pub fn seed_dirs(run: &Path) -> Result<Vec<(u64, PathBuf)>, CliError> {
    let entries = fs::read_dir(run).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", run.display())))?;
    let mut out = Vec::new();
    for e in entries {
        let e = e?;
        let name = e.file_name();
        let Some(seed) = name.to_str().and_then(|n| n.strip_prefix("seed_")).and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if e.path().is_dir() {
            out.push((seed, e.path()));
        }
    }
    out.sort();
    Ok(out)
}
