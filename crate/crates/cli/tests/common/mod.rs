#![allow(dead_code)]

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

/// A small two-class blob experiment that trains in well under a second.
pub fn blobs_config(out: &Path) -> Value {
    json!({
        "id_dataset": {
            "kind": "gaussian_blobs", "classes": 2, "dim": 6, "separation": 10.0,
            "train": 200, "validation": 100, "test": 200
        },
        "ood_datasets": [{ "name": "box", "kind": "uniform_box", "n": 200 }],
        "validation_ood": { "name": "box_val", "kind": "uniform_box", "n": 200 },
        "model": { "hidden": [8], "train": { "epochs": 10 } },
        "scorer": { "kind": "free_energy", "temperature": 1.0 },
        "extra_scorers": [{ "kind": "softmax" }],
        "watermark": { "epochs": 3, "lr_decay_epochs": [2] },
        "watermark_train_size": 64,
        "sweep": { "trials": 2 },
        "histogram_bins": 10,
        "output_dir": out,
        "seeds": [0]
    })
}

pub fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

pub fn wmark(args: &[&str]) -> i32 {
    let mut full = vec!["wmark"];
    full.extend_from_slice(args);
    wmark_cli::run(full)
}

pub fn wmark_ok(args: &[&str]) {
    assert_eq!(wmark(args), 0, "wmark {args:?} failed");
}

pub fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

pub fn csv_rows(path: impl AsRef<Path>) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path.as_ref()).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}
