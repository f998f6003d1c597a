//! Acceptance harness: independent oracles and a driver that runs the
//! command-line pipeline on the desk-scale blob task.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};
use wmark_core::data::gaussian_blobs;
use wmark_core::model::{save_checkpoint, MlpModel};
use wmark_core::watermark::train_watermark;
use wmark_core::{SeededRng, WatermarkConfig};

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

pub fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}


/// Hidden pre-activations, computed without the library forward pass.
pub fn hidden_preactivations(model: &MlpModel, x: &[f32]) -> Vec<f64> {
    let mut h: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let mut out = Vec::new();
    let n = model.layers().len();
    for layer in &model.layers()[..n - 1] {
        let mut next = Vec::with_capacity(layer.out_dim());
        for o in 0..layer.out_dim() {
            let row = &layer.weights()[o * layer.in_dim()..(o + 1) * layer.in_dim()];
            let a = layer.bias()[o] as f64 + row.iter().zip(&h).map(|(&w, &v)| w as f64 * v).sum::<f64>();
            out.push(a);
            next.push(a.max(0.0));
        }
        h = next;
    }
    out
}

// Exhaustive metric oracles.

pub fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut total = 0.0;
    for &a in id {
        for &b in ood {
            total += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    total / (id.len() * ood.len()) as f64
}

pub fn scan_fpr(id: &[f64], ood: &[f64], target: f64) -> f64 {
    let tpr = |t: f64| id.iter().filter(|&&s| s >= t).count() as f64 / id.len() as f64;
    let t = id
        .iter()
        .copied()
        .filter(|&t| tpr(t) >= target)
        .fold(f64::NEG_INFINITY, f64::max);
    ood.iter().filter(|&&s| s >= t).count() as f64 / ood.len() as f64
}

pub fn scan_aupr(id: &[f64], ood: &[f64]) -> f64 {
    let mut ts: Vec<f64> = id.iter().chain(ood).copied().collect();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    let (mut area, mut prev) = (0.0, 0.0);
    for t in ts {
        let tp = id.iter().filter(|&&s| s >= t).count() as f64;
        let fp = ood.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / id.len() as f64;
        area += (recall - prev) * tp / (tp + fp);
        prev = recall;
    }
    area
}

pub fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_blobs.json")
}

pub fn wmark(args: &[&str]) {
    let mut full = vec!["wmark"];
    full.extend_from_slice(args);
    let code = wmark_cli::run(full);
    assert_eq!(code, 0, "wmark {args:?} exited {code}");
}

pub fn sha256(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

/// `(fpr95, auroc)` of the free-energy scorer on the box set.
pub fn fe_metrics(seed_dir: &Path, tag: &str) -> (f64, f64) {
    let rows = csv_rows(&seed_dir.join(format!("metrics_{tag}.csv")));
    let r = rows
        .iter()
        .find(|r| r[0] == "free_energy" && r[2] == "box")
        .expect("free-energy box row");
    (r[3].parse().unwrap(), r[4].parse().unwrap())
}

pub struct SeedRun {
    dir: PathBuf,
    accuracy: f64,
    hashes: Vec<String>,
    secs: f64,
}

pub struct DeskRun {
    seeds: BTreeMap<u64, SeedRun>,
}

impl DeskRun {
    pub fn execute(out: &Path) -> DeskRun {
        let cfg = config_path();
        let cfg = cfg.to_str().unwrap();
        let out_s = out.to_str().unwrap();
        let mut seeds = BTreeMap::new();
        for seed in 0..5u64 {
            let t = Instant::now();
            let s = seed.to_string();
            let common = ["--config", cfg, "--seed", &s, "--out", out_s];
            let with = |verb: &str, extra: &[&str]| {
                let mut args = vec![verb];
                args.extend_from_slice(&common);
                args.extend_from_slice(extra);
                wmark(&args);
            };
            let dir = out.join(format!("seed_{seed}"));
            let model = dir.join("model.wmk1");
            with("train-classifier", &[]);
            let mut hashes = vec![sha256(&model)];
            with("evaluate", &[]);
            with("learn-watermark", &[]);
            hashes.push(sha256(&model));
            with("evaluate", &["--watermark"]);
            with("evaluate", &["--watermark", "--mask", "keep_large:p50"]);
            with("sweep", &[]);
            hashes.push(sha256(&model));
            with("evaluate", &["--watermark", "--watermark-file", "sweep_watermark.wmkw", "--tag", "swept"]);
            with(
                "evaluate",
                &["--watermark", "--watermark-file", "sweep_watermark.wmkw", "--mask", "keep_large:p50", "--tag", "swept-masked"],
            );
            hashes.push(sha256(&model));
            let acc = csv_rows(&dir.join("accuracy.csv"));
            let accuracy = acc.iter().find(|r| r[0] == "test").unwrap()[1].parse().unwrap();
            seeds.insert(
                seed,
                SeedRun {
                    dir,
                    accuracy,
                    hashes,
                    secs: t.elapsed().as_secs_f64(),
                },
            );
        }
        DeskRun { seeds }
    }

    pub fn gap_enlargement(&self) -> Verdict {
        let mut wins = 0;
        let mut detail = String::new();
        let mut accurate = true;
        let mut slowest = 0.0f64;
        for (seed, run) in &self.seeds {
            let (f0, a0) = fe_metrics(&run.dir, "plain");
            let (f1, a1) = fe_metrics(&run.dir, "swept");
            let win = a1 - a0 >= 0.02 && f0 - f1 >= 0.05;
            wins += win as usize;
            accurate &= run.accuracy >= 0.99;
            slowest = slowest.max(run.secs);
            let _ = write!(
                detail,
                "seed {seed}: acc {:.3} auroc {a0:.4}->{a1:.4} fpr95 {f0:.3}->{f1:.3}{}; ",
                run.accuracy,
                if win { " ok" } else { "" }
            );
        }
        let pass = wins >= 3 && accurate && slowest < 900.0;
        verdict(pass, format!("{wins}/5 seeds improved, slowest seed {slowest:.0}s; {detail}"))
    }

    pub fn checkpoint_hashes(&self) -> Verdict {
        let same = self.seeds.values().all(|r| r.hashes.windows(2).all(|w| w[0] == w[1]));
        // and in memory, directly around train_watermark
        let mut rng = SeededRng::new(6);
        let data = gaussian_blobs(2, 4, 6.0, 64, &mut rng).unwrap();
        let model = MlpModel::new(&[4, 8, 2], &mut rng).unwrap();
        let before = Sha256::digest(save_checkpoint(&model));
        train_watermark(&model, &data, &WatermarkConfig { epochs: 2, ..WatermarkConfig::default() }).unwrap();
        let after = Sha256::digest(save_checkpoint(&model));
        let first = &self.seeds[&0].hashes[0];
        verdict(
            same && before == after,
            format!("sha256 stable across learn-watermark, sweep and evaluate on 5 seeds (seed 0: {}..)", &first[..12]),
        )
    }

    pub fn accuracy_impact(&self) -> Verdict {
        let mut worst = 0.0f64;
        let mut detail = String::new();
        for (seed, run) in &self.seeds {
            let row = &csv_rows(&run.dir.join("watermark_accuracy.csv"))[0];
            let (clean, marked): (f64, f64) = (row[0].parse().unwrap(), row[1].parse().unwrap());
            worst = worst.max(clean - marked);
            let _ = write!(detail, "seed {seed}: {clean:.3}->{marked:.3}; ");
        }
        verdict(worst <= 0.05, format!("largest drop {:.1} points; {detail}", worst * 100.0))
    }

    /// The task's full watermark is the swept one; the default watermark's
    /// numbers are listed alongside.
    pub fn masking(&self) -> Verdict {
        let mut wins = 0;
        let mut detail = String::new();
        for (seed, run) in &self.seeds {
            let (_, full) = fe_metrics(&run.dir, "swept");
            let (_, masked) = fe_metrics(&run.dir, "swept-masked");
            let (_, d_full) = fe_metrics(&run.dir, "watermarked");
            let (_, d_masked) = fe_metrics(&run.dir, "masked");
            wins += (masked < full) as usize;
            let _ = write!(
                detail,
                "seed {seed}: auroc {full:.4} full / {masked:.4} masked (defaults {d_full:.4} / {d_masked:.4}); "
            );
        }
        verdict(wins >= 3, format!("{wins}/5 seeds lower; {detail}"))
    }
}

pub fn small_config(out: &Path) -> serde_json::Value {
    serde_json::json!({
        "id_dataset": { "kind": "gaussian_blobs", "classes": 3, "dim": 8, "separation": 7.0,
                        "train": 300, "validation": 150, "test": 300 },
        "ood_datasets": [{ "name": "box", "kind": "uniform_box", "n": 300 }],
        "validation_ood": { "name": "box_validation", "kind": "uniform_box", "n": 300 },
        "model": { "hidden": [16], "train": { "epochs": 10 } },
        "scorer": { "kind": "free_energy", "temperature": 1.0 },
        "extra_scorers": [{ "kind": "softmax" }, { "kind": "odin", "magnitude": 0.0014, "temperature": 1000.0 },
                          { "kind": "react", "clamp_quantile": 0.9, "base": { "kind": "free_energy", "temperature": 1.0 } }],
        "watermark": { "epochs": 6, "lr_decay_epochs": [3] },
        "watermark_train_size": 128,
        "sweep": { "trials": 3 },
        "output_dir": out,
        "seeds": [0, 1]
    })
}

pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "run.log") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
