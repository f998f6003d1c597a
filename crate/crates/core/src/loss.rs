//! Scalar losses of a logit vector and their gradients with respect to the
//! logits. Everything is evaluated in `f64`.

use serde::{Deserialize, Serialize};

/// Exponent arguments inside the free-energy losses are capped here so that
/// pathological logits cannot overflow.
pub const EXP_ARG_CAP: f64 = 80.0;

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|&v| v - lse).collect()
}

pub(crate) fn widen(logits: &[f32]) -> Vec<f64> {
    logits.iter().map(|&v| v as f64).collect()
}

#[inline]
fn capped_exp(arg: f64) -> f64 {
    arg.min(EXP_ARG_CAP).exp()
}

/// A differentiable scalar function of the logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogitLoss {
    /// `-log softmax_y(z)`
    CrossEntropy { label: usize },
    /// `-(1/c) sum_k log softmax_k(z)`, cross-entropy against the uniform label.
    UniformCrossEntropy,
    /// `sum_k exp(-z_k / T)`
    FreeEnergyId { temperature: f64 },
    /// `sum_k exp(z_k / T)`
    FreeEnergyOod { temperature: f64 },
    /// The single logit `z_index`.
    Logit { index: usize },
}

impl LogitLoss {
    pub fn value(&self, logits: &[f32]) -> f64 {
        let z = widen(logits);
        match *self {
            LogitLoss::CrossEntropy { label } => -log_softmax(&z)[label],
            LogitLoss::UniformCrossEntropy => {
                let c = z.len() as f64;
                -log_softmax(&z).iter().sum::<f64>() / c
            }
            LogitLoss::FreeEnergyId { temperature } => {
                z.iter().map(|&v| capped_exp(-v / temperature)).sum()
            }
            LogitLoss::FreeEnergyOod { temperature } => {
                z.iter().map(|&v| capped_exp(v / temperature)).sum()
            }
            LogitLoss::Logit { index } => z[index],
        }
    }

    /// Gradient with respect to the logits.
    ///
    /// Where the exponent cap binds, the free-energy terms keep the uncapped
    /// derivative direction scaled by the capped exponential.
    pub fn grad(&self, logits: &[f32]) -> Vec<f64> {
        let z = widen(logits);
        match *self {
            LogitLoss::CrossEntropy { label } => {
                let mut p = softmax(&z);
                p[label] -= 1.0;
                p
            }
            LogitLoss::UniformCrossEntropy => {
                let c = z.len() as f64;
                softmax(&z).into_iter().map(|p| p - 1.0 / c).collect()
            }
            LogitLoss::FreeEnergyId { temperature } => z
                .iter()
                .map(|&v| -capped_exp(-v / temperature) / temperature)
                .collect(),
            LogitLoss::FreeEnergyOod { temperature } => z
                .iter()
                .map(|&v| capped_exp(v / temperature) / temperature)
                .collect(),
            LogitLoss::Logit { index } => {
                let mut g = vec![0.0; z.len()];
                g[index] = 1.0;
                g
            }
        }
    }
}
