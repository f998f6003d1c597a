//! Experiment configuration (JSON) and the datasets it describes.
//!
//! One file drives a full experiment row: data, classifier, scorers,
//! watermark, sweep space, output directory and seeds. Synthetic data is
//! regenerated from the seed on every command, so all commands of one seed
//! see identical samples.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wmark_core::data::{gaussian_blobs, load_idx, load_idx_images, uniform_box};
use wmark_core::tensor::derive_seed;
use wmark_core::watermark::{NegativeSource, WatermarkLoss};
use wmark_core::{LabeledDataset, Normalizer, Scorer, SeededRng, Tensor, TrainConfig, WatermarkConfig};

use crate::error::CliError;

/// Independent generator streams per seed.
pub mod stream {
    pub const ID_DATA: u64 = 1;
    pub const MODEL_INIT: u64 = 2;
    pub const CLASSIFIER: u64 = 3;
    pub const WATERMARK: u64 = 4;
    pub const SWEEP: u64 = 5;
    pub const VALIDATION_OOD: u64 = 6;
    pub const WATERMARK_SUBSET: u64 = 7;
    /// Outlier pool `i` uses `OUTLIERS + i`.
    pub const OUTLIERS: u64 = 50;
    /// Test OOD set `i` uses `TEST_OOD + i`.
    pub const TEST_OOD: u64 = 100;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IdDataset {
    GaussianBlobs {
        classes: usize,
        dim: usize,
        separation: f64,
        train: usize,
        validation: usize,
        test: usize,
    },
    /// IDX image/label files. The last `validation` training rows are held
    /// out from classifier and watermark training.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "default_idx_validation")]
        validation: usize,
    },
}

fn default_idx_validation() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OodSource {
    UniformBox { n: usize },
    IdxImages { path: PathBuf },
}

/// `deny_unknown_fields` does not combine with `flatten`; unknown keys are
/// rejected by the tagged source instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodDataset {
    pub name: String,
    #[serde(flatten)]
    pub source: OodSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Candidate values per hyperparameter. Absent keys are not searched.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma1: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2: Option<Vec<f64>>,
}

impl SearchSpace {
    /// The candidate sets of the CIFAR hyperparameter search for `loss`.
    pub fn paper_defaults(loss: &WatermarkLoss) -> Self {
        let tenths = |from: u32| (from..=10).map(|i| i as f64 / 10.0).collect::<Vec<_>>();
        let sigma1 = (0..=10).map(|i| i as f64 / 5.0).collect();
        let rho = vec![0.0, 0.02, 0.05, 0.07, 0.1, 0.2, 0.5, 0.7, 1.0, 2.0, 5.0];
        match loss {
            WatermarkLoss::Softmax => SearchSpace {
                sigma1: Some(sigma1),
                rho: Some(rho),
                beta: Some((0..=10).map(|i| i as f64 / 2.0).collect()),
                t1: None,
                t2: None,
            },
            WatermarkLoss::FreeEnergy { .. } => SearchSpace {
                sigma1: Some(sigma1),
                rho: Some(rho),
                beta: Some(vec![0.0, 0.02, 0.04, 0.06, 0.08, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0]),
                t1: Some(tenths(1)),
                t2: Some(tenths(1)),
            },
        }
    }

    /// Non-empty coordinates in a fixed order.
    pub fn coordinates(&self) -> BTreeMap<&'static str, &[f64]> {
        let mut out = BTreeMap::new();
        for (name, v) in [
            ("beta", &self.beta),
            ("rho", &self.rho),
            ("sigma1", &self.sigma1),
            ("t1", &self.t1),
            ("t2", &self.t2),
        ] {
            if let Some(v) = v {
                if !v.is_empty() {
                    out.insert(name, v.as_slice());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub trials: usize,
    /// Defaults to the standard candidate sets for the watermark's loss.
    #[serde(default)]
    pub space: Option<SearchSpace>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec { trials: 20, space: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id_dataset: IdDataset,
    pub ood_datasets: Vec<OodDataset>,
    /// Held-out OOD data used only by the sweep.
    #[serde(default)]
    pub validation_ood: Option<OodDataset>,
    /// Pools for the outlier-set negative source, looked up by name.
    #[serde(default)]
    pub outlier_sets: Vec<OodDataset>,
    pub model: ModelSpec,
    /// Standardize inputs with the ID training mean and std.
    #[serde(default = "yes")]
    pub normalize: bool,
    /// The scorer the watermark is learned for.
    pub scorer: Scorer,
    /// Further scorers reported by `evaluate`.
    #[serde(default)]
    pub extra_scorers: Vec<Scorer>,
    #[serde(default)]
    pub watermark: WatermarkConfig,
    /// Learn the watermark on this many ID training samples (all if absent).
    #[serde(default)]
    pub watermark_train_size: Option<usize>,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

fn yes() -> bool {
    true
}

fn default_bins() -> usize {
    50
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.seeds.is_empty() {
            return bad("config lists no seeds".into());
        }
        if self.ood_datasets.is_empty() {
            return bad("config lists no OOD datasets".into());
        }
        if self.histogram_bins == 0 {
            return bad("histogram_bins must be at least 1".into());
        }
        let mut names: Vec<&str> = self.ood_datasets.iter().map(|o| o.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("OOD dataset names must be unique".into());
        }
        for o in &self.ood_datasets {
            if o.name.is_empty() || !o.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return bad(format!("OOD dataset name '{}' must be non-empty [A-Za-z0-9_-]", o.name));
            }
        }
        let mut scorer_names: Vec<String> = self.scorers().iter().map(|s| s.name()).collect();
        scorer_names.sort_unstable();
        if scorer_names.windows(2).any(|w| w[0] == w[1]) {
            return bad("scorers must have distinct names".into());
        }
        let mut wcfg = self.watermark.clone();
        if let NegativeSource::OutlierSet(set) = &mut wcfg.negative_source {
            // rows are attached at run time
            set.data = Some(std::sync::Arc::new(Tensor::zeros(&[1, 1])));
        }
        wcfg.validate().map_err(|e| CliError::Usage(format!("watermark config: {e}")))?;
        Ok(())
    }

    /// Paths that must exist before any command runs.
    pub fn referenced_files(&self) -> Vec<&Path> {
        let mut out = Vec::new();
        if let IdDataset::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &self.id_dataset
        {
            out.extend([train_images.as_path(), train_labels, test_images, test_labels]);
        }
        for o in self.ood_datasets.iter().chain(&self.validation_ood).chain(&self.outlier_sets) {
            if let OodSource::IdxImages { path } = &o.source {
                out.push(path.as_path());
            }
        }
        out
    }

    pub fn check_files(&self) -> Result<(), CliError> {
        for p in self.referenced_files() {
            if !p.is_file() {
                return Err(CliError::Usage(format!("missing file {}", p.display())));
            }
        }
        Ok(())
    }

    /// The validation OOD set, which must exist and differ from every test
    /// OOD set.
    pub fn validation_ood(&self) -> Result<&OodDataset, CliError> {
        let v = self
            .validation_ood
            .as_ref()
            .ok_or_else(|| CliError::Usage("sweep needs a validation_ood dataset".into()))?;
        for o in &self.ood_datasets {
            let same_file = matches!((&v.source, &o.source),
                (OodSource::IdxImages { path: a }, OodSource::IdxImages { path: b }) if a == b);
            if o.name == v.name || same_file {
                return Err(CliError::Usage(format!(
                    "validation OOD set '{}' must be distinct from test OOD set '{}'",
                    v.name, o.name
                )));
            }
        }
        Ok(v)
    }

    pub fn scorers(&self) -> Vec<Scorer> {
        let mut v = vec![self.scorer.clone()];
        for s in &self.extra_scorers {
            if !v.contains(s) {
                v.push(s.clone());
            }
        }
        v
    }

    /// The watermark config for one seed, with the seed filled in.
    pub fn watermark_for_seed(&self, seed: u64) -> WatermarkConfig {
        WatermarkConfig {
            seed: derive_seed(seed, stream::WATERMARK),
            ..self.watermark.clone()
        }
    }

    pub fn train_for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(seed, stream::CLASSIFIER),
            ..self.model.train.clone()
        }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed_{seed}"))
    }
}

/// The watermark loss must be the training counterpart of the scorer.
pub fn check_loss_matches(loss: &WatermarkLoss, scorer: &Scorer) -> Result<(), CliError> {
    let ok = matches!(
        (loss, scorer),
        (WatermarkLoss::Softmax, Scorer::Softmax) | (WatermarkLoss::FreeEnergy { .. }, Scorer::FreeEnergy { .. })
    );
    if ok {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "watermark loss {loss:?} does not match scorer '{}'",
            scorer.name()
        )))
    }
}

/// ID splits after normalization.
#[derive(Debug, Clone)]
pub struct IdSplits {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
}

/// Loads (or generates) the raw ID splits for `seed`.
pub fn load_id(cfg: &ExperimentConfig, seed: u64) -> Result<IdSplits, CliError> {
    match &cfg.id_dataset {
        IdDataset::GaussianBlobs {
            classes,
            dim,
            separation,
            train,
            validation,
            test,
        } => {
            let mut rng = SeededRng::new(derive_seed(seed, stream::ID_DATA));
            let mut draw = |n: usize| {
                gaussian_blobs(*classes, *dim, *separation, n, &mut rng).map_err(|e| CliError::Usage(e.to_string()))
            };
            Ok(IdSplits {
                train: draw(*train)?,
                validation: draw(*validation)?,
                test: draw(*test)?,
            })
        }
        IdDataset::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            validation,
        } => {
            let full = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            if full.input_dim() != test.input_dim() {
                return Err(CliError::Format("train and test images differ in size".into()));
            }
            if *validation >= full.len() {
                return Err(CliError::Usage(format!(
                    "validation size {validation} leaves no training data ({} rows)",
                    full.len()
                )));
            }
            let cut = full.len() - validation;
            let train_idx: Vec<usize> = (0..cut).collect();
            let val_idx: Vec<usize> = (cut..full.len()).collect();
            Ok(IdSplits {
                train: full.subset(&train_idx),
                validation: full.subset(&val_idx),
                test,
            })
        }
    }
}

pub fn load_ood(ood: &OodDataset, dim: usize, seed: u64, stream: u64) -> Result<Tensor, CliError> {
    match &ood.source {
        OodSource::UniformBox { n } => {
            let mut rng = SeededRng::new(derive_seed(seed, stream));
            uniform_box(dim, *n, &mut rng).map_err(|e| CliError::Usage(e.to_string()))
        }
        OodSource::IdxImages { path } => {
            let (x, _) = load_idx_images(path)?;
            if x.row_len() != dim {
                return Err(CliError::Usage(format!(
                    "OOD set '{}' has dimension {}, ID data has {dim}",
                    ood.name,
                    x.row_len()
                )));
            }
            Ok(x)
        }
    }
}

pub fn fit_normalizer(cfg: &ExperimentConfig, train: &LabeledDataset) -> Normalizer {
    if cfg.normalize {
        Normalizer::fit_global(train.inputs())
    } else {
        Normalizer::identity()
    }
}

/// The data every command after training works on, normalized with the
/// stored statistics.
pub struct Prepared {
    pub id: IdSplits,
    /// `(name, samples)` per test OOD set, in config order.
    pub ood: Vec<(String, Tensor)>,
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64, norm: &Normalizer) -> Result<Prepared, CliError> {
    let raw = load_id(cfg, seed)?;
    let id = IdSplits {
        train: norm.apply_dataset(&raw.train)?,
        validation: norm.apply_dataset(&raw.validation)?,
        test: norm.apply_dataset(&raw.test)?,
    };
    let dim = id.train.input_dim();
    let mut ood = Vec::with_capacity(cfg.ood_datasets.len());
    for (i, o) in cfg.ood_datasets.iter().enumerate() {
        let x = load_ood(o, dim, seed, stream::TEST_OOD + i as u64)?;
        ood.push((o.name.clone(), norm.apply(&x)?));
    }
    Ok(Prepared { id, ood })
}

/// The ID rows the watermark is learned on.
pub fn watermark_train_set(cfg: &ExperimentConfig, train: &LabeledDataset, seed: u64) -> LabeledDataset {
    match cfg.watermark_train_size {
        Some(k) if k < train.len() => {
            let mut rng = SeededRng::new(derive_seed(seed, stream::WATERMARK_SUBSET));
            let mut idx = rng.permutation(train.len());
            idx.truncate(k);
            idx.sort_unstable();
            train.subset(&idx)
        }
        _ => train.clone(),
    }
}
