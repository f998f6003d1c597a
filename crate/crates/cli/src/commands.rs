//! The five pipeline commands. Each `*_seed` function runs one seed's
//! pipeline single-threaded; `for_each_seed` fans seeds out over a pool.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use wmark_core::data::LabeledDataset;
use wmark_core::metrics::{detection_metrics, detection_metrics_with, quantile, samples_from, score_histogram, Positive};
use wmark_core::model::train_classifier;
use wmark_core::search::{coordinate_search, Coordinate};
use wmark_core::tensor::derive_seed;
use wmark_core::watermark::{apply_watermark, mask_watermark, train_watermark, MaskMode, NegativeSource, WatermarkLoss};
use wmark_core::{DetectionMetrics, MlpModel, Normalizer, SeededRng, Tensor, Watermark, WatermarkConfig};

use crate::artifacts::{self as art, MetricsRow};
use crate::config::{self, check_loss_matches, stream, ExperimentConfig, Prepared, SearchSpace};
use crate::error::CliError;
use crate::runlog::RunLog;

/// Thread cap for seed-level parallelism.
pub const THREADS_ENV: &str = "WMARK_THREADS";

pub fn for_each_seed<F>(seeds: &[u64], f: F) -> Result<(), CliError>
where
    F: Fn(u64) -> Result<(), CliError> + Sync,
{
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .map(|v| {
            v.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))
        })
        .transpose()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Runtime(e.to_string()))?;
    let results: Vec<Result<(), CliError>> = pool.install(|| seeds.par_iter().map(|&s| f(s)).collect());
    results.into_iter().collect()
}

fn dims_for(cfg: &ExperimentConfig, train: &LabeledDataset) -> Vec<usize> {
    let mut dims = vec![train.input_dim()];
    dims.extend(&cfg.model.hidden);
    dims.push(train.class_count());
    dims
}

#[derive(Serialize)]
struct AccuracyRow {
    split: &'static str,
    accuracy: String,
}

pub fn train_classifier_seed(cfg: &ExperimentConfig, seed: u64, log: &RunLog) -> Result<(), CliError> {
    let raw = config::load_id(cfg, seed)?;
    let norm = config::fit_normalizer(cfg, &raw.train);
    let train = norm.apply_dataset(&raw.train)?;
    let validation = norm.apply_dataset(&raw.validation)?;
    let test = norm.apply_dataset(&raw.test)?;
    let mut init = SeededRng::new(derive_seed(seed, stream::MODEL_INIT));
    let model = MlpModel::new(&dims_for(cfg, &train), &mut init)?;
    let trained = train_classifier(model, &train, &cfg.train_for_seed(seed))?;
    let model = trained.model;

    let dir = cfg.seed_dir(seed);
    art::save_model(&dir.join(art::CHECKPOINT), &model)?;
    art::write(&dir.join(art::NORMALIZER), &norm.to_bytes())?;
    let rows = [
        ("train", model.accuracy(&train)),
        ("validation", model.accuracy(&validation)),
        ("test", model.accuracy(&test)),
    ]
    .map(|(split, a)| AccuracyRow {
        split,
        accuracy: art::fixed6(a),
    });
    art::write_csv(&dir.join(art::ACCURACY), &rows)?;
    log.line(format!(
        "seed {seed}: classifier trained, test accuracy {}",
        rows[2].accuracy
    ));
    Ok(())
}

/// Checkpoint, normalizer and normalized data of a trained seed.
pub struct Stage {
    pub model: MlpModel,
    pub normalizer: Normalizer,
    pub data: Prepared,
}

pub fn load_stage(cfg: &ExperimentConfig, seed: u64) -> Result<Stage, CliError> {
    let dir = cfg.seed_dir(seed);
    let model = art::load_model(&dir.join(art::CHECKPOINT))?;
    let normalizer = art::load_normalizer(&dir.join(art::NORMALIZER))?;
    let data = config::prepare(cfg, seed, &normalizer)?;
    if data.id.train.input_dim() != model.input_dim() {
        return Err(CliError::Usage(format!(
            "checkpoint expects inputs of length {}, data has {}",
            model.input_dim(),
            data.id.train.input_dim()
        )));
    }
    Ok(Stage {
        model,
        normalizer,
        data,
    })
}

/// Fills in outlier rows for an outlier-set negative source.
fn attach_outliers(
    cfg: &ExperimentConfig,
    wcfg: &mut WatermarkConfig,
    norm: &Normalizer,
    dim: usize,
    seed: u64,
) -> Result<(), CliError> {
    if let NegativeSource::OutlierSet(set) = &mut wcfg.negative_source {
        let (i, spec) = cfg
            .outlier_sets
            .iter()
            .enumerate()
            .find(|(_, o)| o.name == set.name)
            .ok_or_else(|| CliError::Usage(format!("no outlier set named '{}'", set.name)))?;
        let x = config::load_ood(spec, dim, seed, stream::OUTLIERS + i as u64)?;
        set.data = Some(Arc::new(norm.apply(&x)?));
    }
    Ok(())
}

#[derive(Serialize)]
struct TraceRow {
    epoch: usize,
    risk: f64,
    l_id: f64,
    l_ood: f64,
}

#[derive(Serialize)]
struct WatermarkAccuracyRow {
    clean_accuracy: String,
    watermarked_accuracy: String,
}

fn watermarked_accuracy(model: &MlpModel, data: &LabeledDataset, w: &Tensor) -> Result<f64, CliError> {
    let shifted = data.with_inputs(apply_watermark(w, data.inputs())?)?;
    Ok(model.accuracy(&shifted))
}

pub fn learn_watermark_seed(cfg: &ExperimentConfig, seed: u64, log: &RunLog) -> Result<(), CliError> {
    check_loss_matches(&cfg.watermark.loss, &cfg.scorer)?;
    let stage = load_stage(cfg, seed)?;
    let id = &stage.data.id;
    let wdata = config::watermark_train_set(cfg, &id.train, seed);
    let mut wcfg = cfg.watermark_for_seed(seed);
    attach_outliers(cfg, &mut wcfg, &stage.normalizer, id.train.input_dim(), seed)?;
    let wm = train_watermark(&stage.model, &wdata, &wcfg)?;

    let dir = cfg.seed_dir(seed);
    art::write(&dir.join(art::WATERMARK), &wm.to_bytes())?;
    let trace: Vec<TraceRow> = wm
        .trace
        .iter()
        .enumerate()
        .map(|(epoch, r)| TraceRow {
            epoch,
            risk: r.risk,
            l_id: r.l_id,
            l_ood: r.l_ood,
        })
        .collect();
    art::write_csv(&dir.join(art::WATERMARK_TRACE), &trace)?;
    let clean = stage.model.accuracy(&id.test);
    let marked = watermarked_accuracy(&stage.model, &id.test, &wm.w)?;
    art::write_csv(
        &dir.join(art::WATERMARK_ACCURACY),
        &[WatermarkAccuracyRow {
            clean_accuracy: art::fixed6(clean),
            watermarked_accuracy: art::fixed6(marked),
        }],
    )?;
    log.line(format!(
        "seed {seed}: watermark learned, test accuracy {clean:.4} clean / {marked:.4} watermarked"
    ));
    Ok(())
}

/// Which elements of the watermark to keep, with `chi` either absolute or a
/// percentile of `|w|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub keep_large: bool,
    pub chi: Chi,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Chi {
    Absolute(f64),
    Percentile(f64),
}

impl MaskSpec {
    /// Parses `keep_large:<chi>` or `keep_small:<chi>`, where `<chi>` is a
    /// number or `p<percent>` (e.g. `p50`).
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Usage(format!("bad mask '{s}', expected keep_large:<chi> or keep_small:<chi>"));
        let (mode, chi) = s.split_once(':').ok_or_else(bad)?;
        let keep_large = match mode {
            "keep_large" => true,
            "keep_small" => false,
            _ => return Err(bad()),
        };
        let chi = match chi.strip_prefix('p') {
            Some(p) => {
                let p: f64 = p.parse().map_err(|_| bad())?;
                if !(0.0..=100.0).contains(&p) {
                    return Err(bad());
                }
                Chi::Percentile(p)
            }
            None => {
                let v: f64 = chi.parse().map_err(|_| bad())?;
                if !(v >= 0.0) {
                    return Err(bad());
                }
                Chi::Absolute(v)
            }
        };
        Ok(MaskSpec { keep_large, chi })
    }

    pub fn mode_for(&self, w: &Tensor) -> MaskMode {
        let chi = match self.chi {
            Chi::Absolute(v) => v,
            Chi::Percentile(p) => {
                let mut mags: Vec<f64> = w.data().iter().map(|v| v.abs() as f64).collect();
                quantile(&mut mags, p / 100.0)
            }
        };
        if self.keep_large {
            MaskMode::KeepLarge(chi)
        } else {
            MaskMode::KeepSmall(chi)
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub watermark: bool,
    /// Watermark file inside the seed directory.
    pub watermark_file: Option<String>,
    pub mask: Option<MaskSpec>,
    pub tag: Option<String>,
    pub positive: Positive,
}

impl EvalOptions {
    pub fn tag(&self) -> String {
        match (&self.tag, self.watermark, self.mask) {
            (Some(t), _, _) => t.clone(),
            (None, false, _) => "plain".into(),
            (None, true, None) => "watermarked".into(),
            (None, true, Some(_)) => "masked".into(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !self.watermark && (self.mask.is_some() || self.watermark_file.is_some()) {
            return Err(CliError::Usage("--mask and --watermark-file need --watermark".into()));
        }
        let tag = self.tag();
        if tag.is_empty() || !tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
            return Err(CliError::Usage(format!("tag '{tag}' must be non-empty [A-Za-z0-9-]")));
        }
        Ok(())
    }
}

pub fn evaluate_seed(cfg: &ExperimentConfig, seed: u64, opts: &EvalOptions, log: &RunLog) -> Result<(), CliError> {
    let stage = load_stage(cfg, seed)?;
    let dir = cfg.seed_dir(seed);
    let w = if opts.watermark {
        let file = opts.watermark_file.as_deref().unwrap_or(art::WATERMARK);
        let wm = art::load_watermark(&dir.join(file))?;
        if wm.dim() != stage.model.input_dim() {
            return Err(CliError::Usage(format!(
                "watermark has dimension {}, model expects {}",
                wm.dim(),
                stage.model.input_dim()
            )));
        }
        Some(match &opts.mask {
            Some(m) => mask_watermark(&wm.w, m.mode_for(&wm.w))?,
            None => wm.w,
        })
    } else {
        None
    };
    let wslice = w.as_ref().map(|t| t.data());
    let id = &stage.data.id;
    let fit_inputs = match &w {
        Some(w) => apply_watermark(w, id.train.inputs())?,
        None => id.train.inputs().clone(),
    };
    let tag = opts.tag();
    let mut rows = Vec::new();
    for scorer in cfg.scorers() {
        let fitted = scorer.fit(&stage.model, &fit_inputs)?;
        let name = scorer.name();
        let id_scores = fitted.score_rows(&stage.model, id.test.inputs(), wslice)?;
        for (ood_name, ood) in &stage.data.ood {
            let ood_scores = fitted.score_rows(&stage.model, ood, wslice)?;
            let samples = samples_from(&id_scores, &ood_scores);
            let m = detection_metrics_with(&samples, opts.positive)?;
            art::write_scores(&dir.join(art::scores_file(&tag, &name, ood_name)), &samples)?;
            let hist = score_histogram(&samples, cfg.histogram_bins)?;
            art::write_csv(&dir.join(art::histogram_file(&tag, &name, ood_name)), &art::histogram_rows(&hist))?;
            rows.push(MetricsRow::new(&name, opts.watermark, ood_name, &m));
        }
    }
    art::write_csv(&dir.join(art::metrics_file(&tag)), &rows)?;
    log.line(format!("seed {seed}: evaluated '{tag}' ({} rows)", rows.len()));
    Ok(())
}

/// Hyperparameter names in search order, with their current values in `cfg`.
fn coordinates(space: &SearchSpace, loss: &WatermarkLoss) -> Result<Vec<Coordinate>, CliError> {
    let coords: Vec<Coordinate> = space
        .coordinates()
        .into_iter()
        .map(|(name, c)| Coordinate {
            name: name.into(),
            candidates: c.to_vec(),
        })
        .collect();
    if coords.is_empty() {
        return Err(CliError::Usage("sweep search space is empty".into()));
    }
    if matches!(loss, WatermarkLoss::Softmax) && coords.iter().any(|c| c.name == "t1" || c.name == "t2") {
        return Err(CliError::Usage("t1/t2 can only be searched for the free-energy loss".into()));
    }
    Ok(coords)
}

fn get_param(cfg: &WatermarkConfig, name: &str) -> f64 {
    match (name, &cfg.loss) {
        ("sigma1", _) => cfg.sigma1,
        ("rho", _) => cfg.rho,
        ("beta", _) => cfg.beta,
        ("t1", WatermarkLoss::FreeEnergy { t1, .. }) => *t1,
        ("t2", WatermarkLoss::FreeEnergy { t2, .. }) => *t2,
        _ => unreachable!("unknown coordinate {name}"),
    }
}

fn set_param(cfg: &mut WatermarkConfig, name: &str, v: f64) {
    match (name, &mut cfg.loss) {
        ("sigma1", _) => cfg.sigma1 = v,
        ("rho", _) => cfg.rho = v,
        ("beta", _) => cfg.beta = v,
        ("t1", WatermarkLoss::FreeEnergy { t1, .. }) => *t1 = v,
        ("t2", WatermarkLoss::FreeEnergy { t2, .. }) => *t2 = v,
        _ => unreachable!("unknown coordinate {name}"),
    }
}

pub fn sweep_seed(cfg: &ExperimentConfig, seed: u64, trials: usize, log: &RunLog) -> Result<(), CliError> {
    check_loss_matches(&cfg.watermark.loss, &cfg.scorer)?;
    let val_spec = cfg.validation_ood()?;
    let space = cfg
        .sweep
        .space
        .clone()
        .unwrap_or_else(|| SearchSpace::paper_defaults(&cfg.watermark.loss));
    let coords = coordinates(&space, &cfg.watermark.loss)?;
    if trials == 0 {
        return Err(CliError::Usage("sweep needs at least one trial".into()));
    }
    let stage = load_stage(cfg, seed)?;
    let id = &stage.data.id;
    let dim = id.train.input_dim();
    let val_ood = stage.normalizer.apply(&config::load_ood(val_spec, dim, seed, stream::VALIDATION_OOD)?)?;
    let wdata = config::watermark_train_set(cfg, &id.train, seed);
    let mut base = cfg.watermark_for_seed(seed);
    attach_outliers(cfg, &mut base, &stage.normalizer, dim, seed)?;
    let start: Vec<f64> = coords.iter().map(|c| get_param(&base, &c.name)).collect();
    let config_at = |p: &[f64]| {
        let mut c = base.clone();
        for (coord, &v) in coords.iter().zip(p) {
            set_param(&mut c, &coord.name, v);
        }
        c
    };

    let mut learned: HashMap<Vec<u64>, Watermark> = HashMap::new();
    let mut rng = SeededRng::new(derive_seed(seed, stream::SWEEP));
    let outcome = coordinate_search(&coords, &start, trials, &mut rng, |p| {
        let wm = train_watermark(&stage.model, &wdata, &config_at(p))?;
        let id_scores = cfg.scorer.score_rows(&stage.model, id.validation.inputs(), Some(wm.w.data()))?;
        let ood_scores = cfg.scorer.score_rows(&stage.model, &val_ood, Some(wm.w.data()))?;
        let m: DetectionMetrics = detection_metrics(&samples_from(&id_scores, &ood_scores))?;
        learned.insert(p.iter().map(|v| v.to_bits()).collect(), wm);
        Ok(m)
    })?;

    let dir = cfg.seed_dir(seed);
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header = vec!["rank".to_string(), "trial".to_string()];
    header.extend(coords.iter().map(|c| c.name.clone()));
    header.extend(["fpr95", "auroc", "aupr"].map(String::from));
    w.write_record(&header)?;
    for (rank, e) in outcome.ranked().iter().enumerate() {
        let mut rec = vec![(rank + 1).to_string(), e.trial.to_string()];
        rec.extend(e.point.iter().map(|v| v.to_string()));
        rec.extend([e.metrics.fpr95, e.metrics.auroc, e.metrics.aupr].map(art::fixed6));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    art::write(&dir.join(art::SWEEP), &bytes)?;

    let best_key: Vec<u64> = outcome.best.point.iter().map(|v| v.to_bits()).collect();
    let best = &learned[&best_key];
    let json = serde_json::to_string_pretty(&best.config).map_err(|e| CliError::Runtime(e.to_string()))?;
    art::write(&dir.join(art::SWEEP_BEST), json.as_bytes())?;
    art::write(&dir.join(art::SWEEP_WATERMARK), &best.to_bytes())?;
    log.line(format!(
        "seed {seed}: sweep of {trials} trials over {} points, best validation fpr95 {:.6} auroc {:.6}",
        outcome.evaluated.len(),
        outcome.best.metrics.fpr95,
        outcome.best.metrics.auroc
    ));
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    tag: String,
    scorer: String,
    watermarked: bool,
    ood_set: String,
    seeds: usize,
    fpr95_mean: String,
    fpr95_std: String,
    auroc_mean: String,
    auroc_std: String,
    aupr_mean: String,
    aupr_std: String,
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregates every `metrics_<tag>.csv` under `run` into `summary.csv` and
/// converts score histograms into gnuplot data files under `plots/`.
pub fn report(run: &Path, log: &RunLog) -> Result<PathBuf, CliError> {
    type Key = (String, String, bool, String);
    let mut groups: BTreeMap<Key, Vec<[f64; 3]>> = BTreeMap::new();
    let plots = run.join("plots");
    let mut plot_names = Vec::new();
    for (seed, dir) in art::seed_dirs(run)? {
        let mut names: Vec<String> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().and_then(|e| e.file_name().into_string().ok()))
            .collect();
        names.sort();
        for name in names {
            if let Some(tag) = name.strip_prefix("metrics_").and_then(|n| n.strip_suffix(".csv")) {
                for row in art::read_metrics(&dir.join(&name))? {
                    let key = (tag.to_string(), row.scorer.clone(), row.watermarked, row.ood_set.clone());
                    groups.entry(key).or_default().push(row.values()?);
                }
            } else if let Some(stem) = name.strip_prefix("hist_").and_then(|n| n.strip_suffix(".csv")) {
                let rows = art::read_histogram(&dir.join(&name))?;
                let mut text = String::from("# bin_center id_count ood_count\n");
                for r in rows {
                    text.push_str(&format!("{} {} {}\n", (r.lo + r.hi) / 2.0, r.id_count, r.ood_count));
                }
                let out = format!("seed_{seed}_{stem}.dat");
                art::write(&plots.join(&out), text.as_bytes())?;
                plot_names.push(out);
            }
        }
    }
    if groups.is_empty() {
        return Err(CliError::Usage(format!("no runs found under {}", run.display())));
    }
    let rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((tag, scorer, watermarked, ood_set), vals)| {
            let col = |i: usize| mean_std(&vals.iter().map(|v| v[i]).collect::<Vec<_>>());
            let ((fm, fs), (am, as_), (pm, ps)) = (col(0), col(1), col(2));
            SummaryRow {
                tag,
                scorer,
                watermarked,
                ood_set,
                seeds: vals.len(),
                fpr95_mean: art::fixed6(fm),
                fpr95_std: art::fixed6(fs),
                auroc_mean: art::fixed6(am),
                auroc_std: art::fixed6(as_),
                aupr_mean: art::fixed6(pm),
                aupr_std: art::fixed6(ps),
            }
        })
        .collect();
    let summary = run.join(art::SUMMARY);
    art::write_csv(&summary, &rows)?;
    if !plot_names.is_empty() {
        let mut gp = String::from("set terminal pngcairo size 800,500\nset style fill transparent solid 0.5\n");
        for name in &plot_names {
            let png = name.trim_end_matches(".dat");
            gp.push_str(&format!(
                "set output '{png}.png'\nplot '{name}' using 1:2 with boxes title 'ID', '' using 1:3 with boxes title 'OOD'\n"
            ));
        }
        art::write(&plots.join("histograms.gp"), gp.as_bytes())?;
    }
    log.line(format!("report: {} summary rows, {} histograms", rows.len(), plot_names.len()));
    Ok(summary)
}
