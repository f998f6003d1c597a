//! Universal input-space watermarks.
//!
//! A watermark `w` is a single input-shaped vector added to every test input.
//! It is learned against a frozen classifier by minimising
//!
//! ```text
//! L(w) = sum_i l_id(x_i + w, y_i) + beta * sum_j l_ood(n_j + w)
//! ```
//!
//! over ID mini-batches `x_i` and freshly drawn negatives `n_j` (Gaussian
//! noise by default), using signed-gradient steps taken at the SAM-perturbed
//! point `w + kappa`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codec::{put_f32s_le, put_u32_le, Reader};
use crate::data::{shift_image, LabeledDataset, ShiftKind};
use crate::error::{Error, Result};
use crate::loss::LogitLoss;
use crate::model::train::step_decayed;
use crate::model::MlpModel;
use crate::tensor::{sample_gaussian, sign_f32, SeededRng, Tensor};

pub const WATERMARK_MAGIC: &[u8; 4] = b"WMKW";

/// The ID/OOD objective pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WatermarkLoss {
    /// Cross-entropy on ID, cross-entropy to the uniform label on negatives.
    Softmax,
    /// `sum_k exp(-z_k / t1)` on ID, `sum_k exp(z_k / t2)` on negatives.
    FreeEnergy { t1: f64, t2: f64 },
}

impl WatermarkLoss {
    pub fn id_loss(&self, label: usize) -> LogitLoss {
        match *self {
            WatermarkLoss::Softmax => LogitLoss::CrossEntropy { label },
            WatermarkLoss::FreeEnergy { t1, .. } => LogitLoss::FreeEnergyId { temperature: t1 },
        }
    }

    pub fn ood_loss(&self) -> LogitLoss {
        match *self {
            WatermarkLoss::Softmax => LogitLoss::UniformCrossEntropy,
            WatermarkLoss::FreeEnergy { t2, .. } => LogitLoss::FreeEnergyOod { temperature: t2 },
        }
    }
}

/// A held-out outlier pool. Only the name is serialized; the rows must be
/// attached before training.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OutlierSet {
    pub name: String,
    #[serde(skip)]
    pub data: Option<Arc<Tensor>>,
}

impl PartialEq for OutlierSet {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.data.as_deref() == other.data.as_deref()
    }
}

/// Where the OOD-term inputs of each step come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NegativeSource {
    /// `m` draws of `N(0, sigma1^2 I)`.
    GaussianNoise,
    /// `m` rows drawn uniformly from an outlier pool.
    OutlierSet(OutlierSet),
    /// `m` noise draws plus a shifting augmentation of every batch member.
    AugmentedId { kinds: Vec<ShiftKind> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WatermarkConfig {
    pub loss: WatermarkLoss,
    pub beta: f64,
    /// Standard deviation of the noise negatives.
    pub sigma1: f64,
    /// Standard deviation of the initial watermark.
    pub sigma2: f64,
    /// SAM radius.
    pub rho: f64,
    /// Signed-step size.
    pub alpha: f64,
    pub epochs: usize,
    pub lr_decay_epochs: Vec<usize>,
    pub batch_size: usize,
    pub negative_source: NegativeSource,
    pub seed: u64,
}

impl Default for WatermarkConfig {
    /// Free-energy settings of the CIFAR-10 search.
    fn default() -> Self {
        WatermarkConfig {
            loss: WatermarkLoss::FreeEnergy { t1: 0.2, t2: 0.7 },
            beta: 0.1,
            sigma1: 0.6,
            sigma2: 0.001,
            rho: 0.7,
            alpha: 0.01,
            epochs: 50,
            lr_decay_epochs: vec![25],
            batch_size: 64,
            negative_source: NegativeSource::GaussianNoise,
            seed: 0,
        }
    }
}

impl WatermarkConfig {
    /// Softmax settings of the CIFAR-10 search.
    pub fn softmax_defaults() -> Self {
        WatermarkConfig {
            loss: WatermarkLoss::Softmax,
            beta: 3.5,
            sigma1: 0.4,
            rho: 1.0,
            ..WatermarkConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [("beta", self.beta), ("sigma1", self.sigma1), ("sigma2", self.sigma2), ("rho", self.rho)];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if let WatermarkLoss::FreeEnergy { t1, t2 } = self.loss {
            if !(t1 > 0.0) || !(t2 > 0.0) {
                return Err(Error::invalid(format!("temperatures must be positive, got t1={t1}, t2={t2}")));
            }
        }
        match &self.negative_source {
            NegativeSource::OutlierSet(o) if o.data.is_none() => {
                Err(Error::invalid(format!("outlier set '{}' has no data attached", o.name)))
            }
            NegativeSource::AugmentedId { kinds } if kinds.is_empty() => {
                Err(Error::invalid("augmented negatives need at least one shift kind"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Risk {
    pub risk: f64,
    pub l_id: f64,
    pub l_ood: f64,
}

#[derive(Debug, Clone)]
pub struct Watermark {
    pub w: Tensor,
    pub config: WatermarkConfig,
    /// Mean per-step risk of each epoch, measured before each update.
    pub trace: Vec<Risk>,
}

impl Watermark {
    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// `"WMKW" | u32 d | d f32 | u32 n | n bytes of UTF-8 JSON config`,
    /// little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let blob = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::with_capacity(12 + 4 * self.w.len() + blob.len());
        out.extend_from_slice(WATERMARK_MAGIC);
        put_u32_le(&mut out, self.w.len() as u32);
        put_f32s_le(&mut out, self.w.data());
        put_u32_le(&mut out, blob.len() as u32);
        out.extend_from_slice(&blob);
        out
    }

    /// Decodes a watermark file. The trace is not stored and comes back empty.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(WATERMARK_MAGIC)?;
        let at = r.offset();
        let d = r.u32_le("dimension")? as usize;
        if d == 0 {
            return Err(Error::format(at, "watermark dimension is zero"));
        }
        let w_at = r.offset();
        let w = r.f32_vec_le(d, "watermark")?;
        let w = Tensor::from_vec(w).map_err(|e| Error::format(w_at, e.to_string()))?;
        let n = r.u32_le("config length")? as usize;
        let blob_at = r.offset();
        let blob = r.take(n, "config")?;
        r.finish()?;
        let text = std::str::from_utf8(blob).map_err(|e| Error::format(blob_at, format!("config is not UTF-8: {e}")))?;
        let config = serde_json::from_str(text).map_err(|e| Error::format(blob_at, format!("bad config: {e}")))?;
        Ok(Watermark {
            w,
            config,
            trace: Vec::new(),
        })
    }
}

fn check_dim(model: &MlpModel, len: usize) -> Result<()> {
    if len != model.input_dim() {
        return Err(Error::invalid(format!(
            "input has length {len}, model expects {}",
            model.input_dim()
        )));
    }
    Ok(())
}

fn check_label(model: &MlpModel, y: usize) -> Result<()> {
    if y >= model.class_count() {
        return Err(Error::invalid(format!("label {y} outside [0, {})", model.class_count())));
    }
    Ok(())
}

pub fn loss_id_softmax(model: &MlpModel, x: &[f32], y: usize) -> Result<f64> {
    check_dim(model, x.len())?;
    check_label(model, y)?;
    Ok(LogitLoss::CrossEntropy { label: y }.value(&model.logits(x)))
}

pub fn loss_ood_softmax(model: &MlpModel, x: &[f32]) -> Result<f64> {
    check_dim(model, x.len())?;
    Ok(LogitLoss::UniformCrossEntropy.value(&model.logits(x)))
}

pub fn loss_id_fe(model: &MlpModel, x: &[f32], t1: f64) -> Result<f64> {
    check_dim(model, x.len())?;
    if !(t1 > 0.0) {
        return Err(Error::invalid("t1 must be positive"));
    }
    Ok(LogitLoss::FreeEnergyId { temperature: t1 }.value(&model.logits(x)))
}

pub fn loss_ood_fe(model: &MlpModel, x: &[f32], t2: f64) -> Result<f64> {
    check_dim(model, x.len())?;
    if !(t2 > 0.0) {
        return Err(Error::invalid("t2 must be positive"));
    }
    Ok(LogitLoss::FreeEnergyOod { temperature: t2 }.value(&model.logits(x)))
}

/// One step's data: an ID mini-batch and the inputs of the OOD term.
#[derive(Debug, Clone)]
pub struct RiskBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub negatives: Tensor,
}

impl RiskBatch {
    fn check(&self, model: &MlpModel, w: &[f32]) -> Result<()> {
        check_dim(model, w.len())?;
        check_dim(model, self.inputs.row_len())?;
        check_dim(model, self.negatives.row_len())?;
        if self.inputs.rows() != self.labels.len() {
            return Err(Error::invalid("batch inputs and labels differ in length"));
        }
        for &y in &self.labels {
            check_label(model, y)?;
        }
        Ok(())
    }
}

fn shifted(x: &[f32], w: &[f32], out: &mut [f32]) {
    for ((o, &a), &b) in out.iter_mut().zip(x).zip(w) {
        *o = a + b;
    }
}

/// Summed ID loss plus `beta` times the summed OOD loss, all on inputs
/// shifted by `w`.
pub fn total_risk(model: &MlpModel, batch: &RiskBatch, w: &[f32], cfg: &WatermarkConfig) -> Result<Risk> {
    batch.check(model, w)?;
    let mut buf = vec![0.0f32; w.len()];
    let mut l_id = 0.0;
    for (x, &y) in batch.inputs.iter_rows().zip(&batch.labels) {
        shifted(x, w, &mut buf);
        l_id += cfg.loss.id_loss(y).value(&model.logits(&buf));
    }
    let ood = cfg.loss.ood_loss();
    let mut l_ood = 0.0;
    for n in batch.negatives.iter_rows() {
        shifted(n, w, &mut buf);
        l_ood += ood.value(&model.logits(&buf));
    }
    Ok(Risk {
        risk: l_id + cfg.beta * l_ood,
        l_id,
        l_ood,
    })
}

/// Risk at `w` and its gradient with respect to `w`. Because `w` enters only
/// through `x + w`, the gradient is the sum of per-sample input gradients.
pub fn risk_gradient(model: &MlpModel, batch: &RiskBatch, w: &[f32], cfg: &WatermarkConfig) -> Result<(Risk, Vec<f64>)> {
    batch.check(model, w)?;
    let mut buf = vec![0.0f32; w.len()];
    let mut grad = vec![0.0f64; w.len()];
    let mut l_id = 0.0;
    for (x, &y) in batch.inputs.iter_rows().zip(&batch.labels) {
        shifted(x, w, &mut buf);
        let trace = model.trace(&buf);
        let loss = cfg.loss.id_loss(y);
        l_id += loss.value(trace.logits());
        let g = model.backward(&trace, &loss.grad(trace.logits()), None);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let ood = cfg.loss.ood_loss();
    let mut l_ood = 0.0;
    let mut ood_grad = vec![0.0f64; w.len()];
    for n in batch.negatives.iter_rows() {
        shifted(n, w, &mut buf);
        let trace = model.trace(&buf);
        l_ood += ood.value(trace.logits());
        let g = model.backward(&trace, &ood.grad(trace.logits()), None);
        for (a, b) in ood_grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    for (a, b) in grad.iter_mut().zip(ood_grad) {
        *a += cfg.beta * b;
    }
    Ok((
        Risk {
            risk: l_id + cfg.beta * l_ood,
            l_id,
            l_ood,
        },
        grad,
    ))
}

/// First-order SAM ascent direction
/// `rho * sign(g) |g|^(q-1) / (||g||_q^q)^(1/p)` with `1/p + 1/q = 1`.
/// A zero gradient gives a zero perturbation.
pub fn sam_perturbation_f64(grad: &[f64], rho: f64, p: f64, q: f64) -> Vec<f64> {
    assert!(p > 1.0 && q > 1.0 && ((1.0 / p + 1.0 / q) - 1.0).abs() < 1e-9, "need 1/p + 1/q = 1");
    let sum_q: f64 = grad.iter().map(|g| g.abs().powf(q)).sum();
    if rho == 0.0 || sum_q == 0.0 || !sum_q.is_finite() {
        return vec![0.0; grad.len()];
    }
    let denom = sum_q.powf(1.0 / p);
    grad.iter()
        .map(|&g| rho * g.signum() * g.abs().powf(q - 1.0) / denom)
        .map(|k| if k == 0.0 { 0.0 } else { k })
        .collect()
}

pub fn sam_perturbation(grad: &Tensor, rho: f64, p: f64, q: f64) -> Tensor {
    let g: Vec<f64> = grad.data().iter().map(|&v| v as f64).collect();
    let k = sam_perturbation_f64(&g, rho, p, q);
    Tensor::from_parts_unchecked(grad.shape().to_vec(), k.into_iter().map(|v| v as f32).collect())
}

/// `w - alpha * sign(g)` in `f32`.
fn signed_update(w: &[f32], grad: &[f64], alpha: f64) -> Vec<f32> {
    w.iter()
        .zip(grad)
        .map(|(&wi, &g)| wi - alpha as f32 * sign_f32(g as f32))
        .collect()
}

/// SAM signed step for an arbitrary gradient oracle: evaluate the gradient at
/// `w`, form `kappa` (p = q = 2), re-evaluate at `w + kappa`, and move by
/// `alpha` against the sign of the second gradient. Returns the new point and
/// whatever the oracle reported at `w`.
pub fn sam_signed_step<T, F>(w: &[f32], alpha: f64, rho: f64, mut oracle: F) -> Result<(Vec<f32>, T)>
where
    F: FnMut(&[f32]) -> Result<(T, Vec<f64>)>,
{
    let (at_w, g) = oracle(w)?;
    let kappa = sam_perturbation_f64(&g, rho, 2.0, 2.0);
    if kappa.iter().all(|&k| k == 0.0) {
        return Ok((signed_update(w, &g, alpha), at_w));
    }
    let probe: Vec<f32> = w.iter().zip(&kappa).map(|(&a, &k)| a + k as f32).collect();
    let (_, g_probe) = oracle(&probe)?;
    Ok((signed_update(w, &g_probe, alpha), at_w))
}

/// Plain signed-gradient step `w - alpha * sign(grad L(w))`.
pub fn signed_gradient_step(model: &MlpModel, w: &Tensor, batch: &RiskBatch, cfg: &WatermarkConfig, alpha: f64) -> Result<Tensor> {
    let (_, g) = risk_gradient(model, batch, w.data(), cfg)?;
    Ok(Tensor::from_parts_unchecked(w.shape().to_vec(), signed_update(w.data(), &g, alpha)))
}

/// One SAM signed step on the watermark risk. Returns the updated watermark
/// and the risk at the starting point.
pub fn watermark_step(model: &MlpModel, w: &Tensor, batch: &RiskBatch, cfg: &WatermarkConfig, alpha: f64) -> Result<(Tensor, Risk)> {
    let (next, risk) = sam_signed_step(w.data(), alpha, cfg.rho, |p| risk_gradient(model, batch, p, cfg))?;
    Ok((Tensor::from_parts_unchecked(w.shape().to_vec(), next), risk))
}

/// Draws the OOD-term inputs for one step.
pub fn sample_negatives(rng: &mut SeededRng, cfg: &WatermarkConfig, batch: &Tensor, spatial: Option<(usize, usize)>) -> Result<Tensor> {
    let (m, d) = (batch.rows(), batch.row_len());
    match &cfg.negative_source {
        NegativeSource::GaussianNoise => sample_gaussian(rng, &[m, d], 0.0, cfg.sigma1 as f32),
        NegativeSource::OutlierSet(o) => {
            let pool = o
                .data
                .as_deref()
                .ok_or_else(|| Error::invalid(format!("outlier set '{}' has no data attached", o.name)))?;
            if pool.row_len() != d {
                return Err(Error::invalid("outlier dimension does not match the ID data"));
            }
            let idx: Vec<usize> = (0..m).map(|_| rng.below(pool.rows())).collect();
            Ok(pool.select_rows(&idx))
        }
        NegativeSource::AugmentedId { kinds } => {
            let spatial = spatial.ok_or_else(|| Error::invalid("augmented negatives need image-shaped ID data"))?;
            if kinds.is_empty() {
                return Err(Error::invalid("augmented negatives need at least one shift kind"));
            }
            let noise = sample_gaussian(rng, &[m, d], 0.0, cfg.sigma1 as f32)?;
            let mut data = noise.into_data();
            for x in batch.iter_rows() {
                let kind = kinds[rng.below(kinds.len())];
                data.extend(shift_image(x, spatial, kind, rng)?);
            }
            Tensor::new(vec![2 * m, d], data)
        }
    }
}

/// Learns a watermark for a frozen `model` on `id_data`.
///
/// The watermark starts at `N(0, sigma2^2 I)`; every epoch shuffles the ID
/// data, and every mini-batch draws fresh negatives and takes one SAM signed
/// step. The step size is divided by 10 at each epoch in `lr_decay_epochs`.
pub fn train_watermark(model: &MlpModel, id_data: &LabeledDataset, cfg: &WatermarkConfig) -> Result<Watermark> {
    cfg.validate()?;
    if id_data.is_empty() {
        return Err(Error::invalid("ID data is empty"));
    }
    check_dim(model, id_data.input_dim())?;
    let d = model.input_dim();
    let mut rng = SeededRng::new(cfg.seed);
    let mut w = sample_gaussian(&mut rng, &[d], 0.0, cfg.sigma2 as f32)?;
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let alpha = step_decayed(cfg.alpha, &cfg.lr_decay_epochs, epoch);
        let order = rng.permutation(id_data.len());
        let mut sum = Risk {
            risk: 0.0,
            l_id: 0.0,
            l_ood: 0.0,
        };
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let inputs = id_data.inputs().select_rows(chunk);
            let labels = chunk.iter().map(|&i| id_data.labels()[i]).collect();
            let negatives = sample_negatives(&mut rng, cfg, &inputs, id_data.spatial())?;
            let batch = RiskBatch {
                inputs,
                labels,
                negatives,
            };
            let (next, risk) = watermark_step(model, &w, &batch, cfg, alpha)?;
            w = next;
            sum.risk += risk.risk;
            sum.l_id += risk.l_id;
            sum.l_ood += risk.l_ood;
            steps += 1;
        }
        let k = steps as f64;
        trace.push(Risk {
            risk: sum.risk / k,
            l_id: sum.l_id / k,
            l_ood: sum.l_ood / k,
        });
    }
    if w.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::State("watermark diverged".into()));
    }
    Ok(Watermark {
        w,
        config: cfg.clone(),
        trace,
    })
}

/// `x + w`, for a single input or row-wise over an `n x d` batch. No clamping.
pub fn apply_watermark(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    if x.shape() == w.shape() {
        return x.add(w);
    }
    if x.shape().len() >= 2 && x.row_len() == w.len() {
        return x.add_row(w.data());
    }
    Err(Error::invalid(format!(
        "watermark of shape {:?} cannot be applied to inputs of shape {:?}",
        w.shape(),
        x.shape()
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "chi", rename_all = "snake_case")]
pub enum MaskMode {
    /// Zero every element with `|w_i| < chi`.
    KeepLarge(f64),
    /// Zero every element with `|w_i| > chi`.
    KeepSmall(f64),
}

pub fn mask_watermark(w: &Tensor, mode: MaskMode) -> Result<Tensor> {
    let (chi, keep_large) = match mode {
        MaskMode::KeepLarge(c) => (c, true),
        MaskMode::KeepSmall(c) => (c, false),
    };
    if !(chi >= 0.0) {
        return Err(Error::invalid(format!("mask threshold must be >= 0, got {chi}")));
    }
    Ok(w.map(|v| {
        let a = v.abs() as f64;
        let keep = if keep_large { a >= chi } else { a <= chi };
        if keep {
            v
        } else {
            0.0
        }
    }))
}
