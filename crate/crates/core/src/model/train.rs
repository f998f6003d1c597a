use serde::{Deserialize, Serialize};

use super::{MlpModel, ParamGrads};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::loss::LogitLoss;
use crate::tensor::{SeededRng, Tensor};

/// Mini-batch SGD settings. `lr_decay_epochs` lists the (zero-based) epochs
/// from which the learning rate is divided by a further factor of 10.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            lr_decay_epochs: vec![],
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_decayed(self.lr, &self.lr_decay_epochs, epoch)
    }
}

pub(crate) fn step_decayed(base: f64, decay_epochs: &[usize], epoch: usize) -> f64 {
    let drops = decay_epochs.iter().filter(|&&e| e <= epoch).count();
    base / 10f64.powi(drops as i32)
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: MlpModel,
    /// Mean mini-batch loss of each epoch, measured before each update.
    pub loss_trace: Vec<f64>,
}

/// SGD with momentum on the mean cross-entropy.
pub fn train_classifier(model: MlpModel, data: &LabeledDataset, cfg: &TrainConfig) -> Result<Trained> {
    run_sgd(model, data, None, cfg)
}

/// Outlier-exposure fine-tuning: mean cross-entropy on `id_data` plus
/// `lambda` times the mean uniform cross-entropy on outliers drawn from
/// `outliers` (one per ID batch member).
///
/// Outliers are drawn from a generator separate from the one that shuffles the
/// ID data, so `lambda = 0` retraces `train_classifier` exactly.
pub fn fine_tune_oe(
    model: MlpModel,
    id_data: &LabeledDataset,
    outliers: &Tensor,
    cfg: &TrainConfig,
    lambda: f64,
) -> Result<Trained> {
    if outliers.row_len() != model.input_dim() {
        return Err(Error::invalid(format!(
            "outliers have dimension {}, model expects {}",
            outliers.row_len(),
            model.input_dim()
        )));
    }
    run_sgd(model, id_data, Some((outliers, lambda)), cfg)
}

fn run_sgd(
    mut model: MlpModel,
    data: &LabeledDataset,
    outliers: Option<(&Tensor, f64)>,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.input_dim() != model.input_dim() {
        return Err(Error::invalid(format!(
            "data dimension {} does not match model input {}",
            data.input_dim(),
            model.input_dim()
        )));
    }
    let classes = model.class_count();
    if let Some(&bad) = data.labels().iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {bad} outside [0, {classes})")));
    }

    let mut rng = SeededRng::new(cfg.seed);
    let mut outlier_rng = rng.derive(1);
    let mut velocity = ParamGrads::zeros_like(&model);
    let mut loss_trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = rng.permutation(data.len());
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = ParamGrads::zeros_like(&model);
            let k = batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let loss = LogitLoss::CrossEntropy { label: data.labels()[i] };
                let trace = model.trace(data.inputs().row(i));
                batch_loss += loss.value(trace.logits()) / k;
                let dl: Vec<f64> = loss.grad(trace.logits()).into_iter().map(|g| g / k).collect();
                model.backward(&trace, &dl, Some(&mut grads));
            }
            if let Some((pool, lambda)) = outliers {
                for _ in batch {
                    let o = pool.row(outlier_rng.below(pool.rows()));
                    let loss = LogitLoss::UniformCrossEntropy;
                    let trace = model.trace(o);
                    batch_loss += lambda * loss.value(trace.logits()) / k;
                    let dl: Vec<f64> = loss
                        .grad(trace.logits())
                        .into_iter()
                        .map(|g| lambda * g / k)
                        .collect();
                    model.backward(&trace, &dl, Some(&mut grads));
                }
            }
            apply_momentum_step(&mut model, &mut velocity, &grads, lr, cfg.momentum);
            epoch_loss += batch_loss;
            batches += 1;
        }
        loss_trace.push(epoch_loss / batches as f64);
    }
    Ok(Trained { model, loss_trace })
}

// v <- mu v + g ; p <- p - lr v
fn apply_momentum_step(model: &mut MlpModel, velocity: &mut ParamGrads, grads: &ParamGrads, lr: f64, mu: f64) {
    for (l, (w, b)) in model.layers_mut().enumerate() {
        for ((p, v), g) in w.iter_mut().zip(&mut velocity.weights[l]).zip(&grads.weights[l]) {
            *v = mu * *v + g;
            *p = (*p as f64 - lr * *v) as f32;
        }
        for ((p, v), g) in b.iter_mut().zip(&mut velocity.bias[l]).zip(&grads.bias[l]) {
            *v = mu * *v + g;
            *p = (*p as f64 - lr * *v) as f32;
        }
    }
}
