//! Fixtures shared by the benchmarks.

use wmark_core::data::gaussian_blobs;
use wmark_core::tensor::sample_gaussian;
use wmark_core::watermark::RiskBatch;
use wmark_core::{LabeledDataset, MlpModel, SeededRng};

pub struct Fixture {
    pub model: MlpModel,
    pub data: LabeledDataset,
    pub batch: RiskBatch,
}

/// A `dim -> hidden -> hidden -> classes` model with a batch of `m` blob
/// inputs and as many Gaussian negatives.
pub fn fixture(dim: usize, hidden: usize, classes: usize, m: usize) -> Fixture {
    let mut rng = SeededRng::new(42);
    let data = gaussian_blobs(classes, dim, 6.0, m, &mut rng).expect("blobs");
    let model = MlpModel::new(&[dim, hidden, hidden, classes], &mut rng).expect("model");
    let batch = RiskBatch {
        inputs: data.inputs().clone(),
        labels: data.labels().to_vec(),
        negatives: sample_gaussian(&mut rng, &[m, dim], 0.0, 0.6).expect("noise"),
    };
    Fixture { model, data, batch }
}

/// Interleaved ID and OOD scores with some overlap.
pub fn scores(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = SeededRng::new(7);
    let id = (0..n).map(|_| rng.standard_normal() + 1.0).collect();
    let ood = (0..n).map(|_| rng.standard_normal()).collect();
    (id, ood)
}
