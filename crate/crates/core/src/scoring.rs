//! OOD scoring functions and the thresholded detector. High scores mean
//! "in-distribution". Scorers only look at a model and an input, so a
//! watermark learned for one scorer can be evaluated under another.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{log_sum_exp, softmax, widen, LogitLoss};
use crate::metrics::quantile;
use crate::model::{argmax, MlpModel};
use crate::tensor::{sign_f32, Tensor};

pub const DEFAULT_ODIN_TEMPERATURE: f64 = 1000.0;
pub const DEFAULT_ODIN_MAGNITUDE: f64 = 0.0014;
pub const DEFAULT_REACT_QUANTILE: f64 = 0.9;

/// Maximum of `softmax(z / T)`.
pub fn max_softmax(logits: &[f32], temperature: f64) -> f64 {
    let z: Vec<f64> = widen(logits).into_iter().map(|v| v / temperature).collect();
    softmax(&z).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// `log sum_k exp(z_k / T)`.
pub fn free_energy(logits: &[f32], temperature: f64) -> f64 {
    let z: Vec<f64> = widen(logits).into_iter().map(|v| v / temperature).collect();
    log_sum_exp(&z)
}

pub fn max_logit(logits: &[f32]) -> f64 {
    logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64))
}

fn check_input(model: &MlpModel, x: &[f32]) -> Result<()> {
    if x.len() != model.input_dim() {
        return Err(Error::invalid(format!(
            "input has length {}, model expects {}",
            x.len(),
            model.input_dim()
        )));
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

pub fn score_softmax(model: &MlpModel, x: &[f32]) -> Result<f64> {
    check_input(model, x)?;
    Ok(max_softmax(&model.logits(x), 1.0))
}

pub fn score_free_energy(model: &MlpModel, x: &[f32], temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    check_input(model, x)?;
    Ok(free_energy(&model.logits(x), temperature))
}

pub fn score_maxlogit(model: &MlpModel, x: &[f32]) -> Result<f64> {
    check_input(model, x)?;
    Ok(max_logit(&model.logits(x)))
}

/// ODIN input perturbation `x - xi * sign(-grad_x log softmax_yhat f(x))`,
/// with `yhat` the predicted class.
pub fn odin_perturb(model: &MlpModel, x: &[f32], magnitude: f64) -> Result<Vec<f32>> {
    check_input(model, x)?;
    let trace = model.trace(x);
    let predicted = argmax(trace.logits());
    // -grad log softmax_yhat is the cross-entropy gradient
    let ce = LogitLoss::CrossEntropy { label: predicted };
    let g = model.backward(&trace, &ce.grad(trace.logits()), None);
    Ok(x.iter()
        .zip(&g)
        .map(|(&xi, &gi)| xi - magnitude as f32 * sign_f32(gi as f32))
        .collect())
}

pub fn score_odin(model: &MlpModel, x: &[f32], magnitude: f64, temperature: f64) -> Result<f64> {
    if !(magnitude >= 0.0) {
        return Err(Error::invalid(format!("perturbation magnitude must be >= 0, got {magnitude}")));
    }
    check_temperature(temperature)?;
    let perturbed = odin_perturb(model, x, magnitude)?;
    Ok(max_softmax(&model.logits(&perturbed), temperature))
}

/// Scorer applied after ReAct's feature clamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseScorer {
    Softmax,
    FreeEnergy { temperature: f64 },
}

impl BaseScorer {
    fn apply(&self, logits: &[f32]) -> f64 {
        match *self {
            BaseScorer::Softmax => max_softmax(logits, 1.0),
            BaseScorer::FreeEnergy { temperature } => free_energy(logits, temperature),
        }
    }
}

/// ReAct rectification: penultimate features are clamped at a threshold
/// fitted on ID data before the logit layer runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReAct {
    pub clamp_quantile: f64,
    pub base: BaseScorer,
    #[serde(skip)]
    threshold: Option<f32>,
}

impl ReAct {
    pub fn new(clamp_quantile: f64, base: BaseScorer) -> Self {
        ReAct {
            clamp_quantile,
            base,
            threshold: None,
        }
    }

    pub fn with_threshold(base: BaseScorer, threshold: f32) -> Self {
        ReAct {
            clamp_quantile: f64::NAN,
            base,
            threshold: Some(threshold),
        }
    }

    pub fn threshold(&self) -> Option<f32> {
        self.threshold
    }

    /// Returns a fitted copy; the clamp threshold is the `clamp_quantile`
    /// quantile of all penultimate activations over `id_inputs`.
    pub fn fit(&self, model: &MlpModel, id_inputs: &Tensor) -> Result<ReAct> {
        let threshold = fit_react_threshold(model, id_inputs, self.clamp_quantile)?;
        Ok(ReAct {
            threshold: Some(threshold),
            ..self.clone()
        })
    }
}

pub fn fit_react_threshold(model: &MlpModel, id_inputs: &Tensor, clamp_quantile: f64) -> Result<f32> {
    if !(clamp_quantile > 0.0 && clamp_quantile <= 1.0) {
        return Err(Error::invalid(format!("clamp quantile must lie in (0, 1], got {clamp_quantile}")));
    }
    if id_inputs.row_len() != model.input_dim() {
        return Err(Error::invalid("ID inputs do not match the model input dimension"));
    }
    let mut pool: Vec<f64> = id_inputs
        .iter_rows()
        .flat_map(|x| model.features(x))
        .map(|v| v as f64)
        .collect();
    if pool.is_empty() {
        return Err(Error::invalid("empty activation pool"));
    }
    Ok(quantile(&mut pool, clamp_quantile) as f32)
}

pub fn score_react(model: &MlpModel, x: &[f32], react: &ReAct) -> Result<f64> {
    let tau = react
        .threshold
        .ok_or_else(|| Error::State("ReAct threshold has not been fitted".into()))?;
    check_input(model, x)?;
    let clamped: Vec<f32> = model.features(x).into_iter().map(|v| v.min(tau)).collect();
    Ok(react.base.apply(&model.head(&clamped)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scorer {
    Softmax,
    FreeEnergy { temperature: f64 },
    MaxLogit,
    Odin { magnitude: f64, temperature: f64 },
    #[serde(rename = "react")]
    ReAct(ReAct),
}

impl Scorer {
    pub fn free_energy() -> Self {
        Scorer::FreeEnergy { temperature: 1.0 }
    }

    pub fn odin() -> Self {
        Scorer::Odin {
            magnitude: DEFAULT_ODIN_MAGNITUDE,
            temperature: DEFAULT_ODIN_TEMPERATURE,
        }
    }

    pub fn react(base: BaseScorer) -> Self {
        Scorer::ReAct(ReAct::new(DEFAULT_REACT_QUANTILE, base))
    }

    /// Short identifier used in reports.
    pub fn name(&self) -> String {
        match self {
            Scorer::Softmax => "softmax".into(),
            Scorer::FreeEnergy { .. } => "free_energy".into(),
            Scorer::MaxLogit => "maxlogit".into(),
            Scorer::Odin { .. } => "odin".into(),
            Scorer::ReAct(r) => match r.base {
                BaseScorer::Softmax => "react_softmax".into(),
                BaseScorer::FreeEnergy { .. } => "react_free_energy".into(),
            },
        }
    }

    /// Fits data-dependent state (the ReAct clamp); other variants are
    /// returned unchanged.
    pub fn fit(&self, model: &MlpModel, id_inputs: &Tensor) -> Result<Scorer> {
        match self {
            Scorer::ReAct(r) => Ok(Scorer::ReAct(r.fit(model, id_inputs)?)),
            other => Ok(other.clone()),
        }
    }

    pub fn score(&self, model: &MlpModel, x: &[f32]) -> Result<f64> {
        match self {
            Scorer::Softmax => score_softmax(model, x),
            Scorer::FreeEnergy { temperature } => score_free_energy(model, x, *temperature),
            Scorer::MaxLogit => score_maxlogit(model, x),
            Scorer::Odin { magnitude, temperature } => score_odin(model, x, *magnitude, *temperature),
            Scorer::ReAct(r) => score_react(model, x, r),
        }
    }

    /// Scores every row of `inputs`, each shifted by `watermark` when given.
    pub fn score_rows(&self, model: &MlpModel, inputs: &Tensor, watermark: Option<&[f32]>) -> Result<Vec<f64>> {
        let mut buf = vec![0.0f32; inputs.row_len()];
        inputs
            .iter_rows()
            .map(|x| match watermark {
                Some(w) => {
                    if w.len() != x.len() {
                        return Err(Error::invalid("watermark length does not match inputs"));
                    }
                    for ((b, &xi), &wi) in buf.iter_mut().zip(x).zip(w) {
                        *b = xi + wi;
                    }
                    self.score(model, &buf)
                }
                None => self.score(model, x),
            })
            .collect()
    }
}

/// Thresholded detector: 1 (ID) iff `score >= threshold`, else 0 (OOD).
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub scorer: Scorer,
    pub threshold: f64,
}

impl Detector {
    pub fn decide_score(&self, score: f64) -> u8 {
        u8::from(score >= self.threshold)
    }

    pub fn decide(&self, model: &MlpModel, x: &[f32]) -> Result<u8> {
        Ok(self.decide_score(self.scorer.score(model, x)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Linear;
    use crate::tensor::SeededRng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Single linear layer whose logits equal its bias for any input.
    fn constant_logits(z: &[f32]) -> MlpModel {
        MlpModel::from_layers(vec![Linear::new(z.len(), 1, vec![0.0; z.len()], z.to_vec()).unwrap()]).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let x = [0.5f32];
        assert_abs_diff_eq!(score_softmax(&constant_logits(&[1.0; 4]), &x).unwrap(), 0.25, epsilon = 1e-12);
        let two_thirds = score_softmax(&constant_logits(&[2f32.ln(), 0.0]), &x).unwrap();
        assert_abs_diff_eq!(two_thirds, 2.0 / 3.0, epsilon = 1e-6);
    }

    #[test]
    fn free_energy_examples() {
        let x = [0.0f32];
        assert_abs_diff_eq!(score_free_energy(&constant_logits(&[0.0, 0.0]), &x, 1.0).unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(
            score_free_energy(&constant_logits(&[3.0, 3.0]), &x, 1.0).unwrap(),
            3.0 + 2f64.ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            score_free_energy(&constant_logits(&[2.0, 2.0]), &x, 2.0).unwrap(),
            1.0 + 2f64.ln(),
            epsilon = 1e-12
        );
        assert!(score_free_energy(&constant_logits(&[0.0]), &x, 0.0).is_err());
    }

    #[test]
    fn maxlogit_examples() {
        assert_eq!(score_maxlogit(&constant_logits(&[0.5, -1.0, 3.0]), &[0.0]).unwrap(), 3.0);
        assert_eq!(score_maxlogit(&constant_logits(&[1.25; 3]), &[0.0]).unwrap(), 1.25);
    }

    #[test]
    fn odin_without_perturbation_is_tempered_softmax() {
        let m = MlpModel::new(&[3, 6, 4], &mut SeededRng::new(1)).unwrap();
        let x = [0.2f32, -0.4, 1.0];
        assert_eq!(score_odin(&m, &x, 0.0, 1.0).unwrap(), score_softmax(&m, &x).unwrap());
        assert_eq!(score_odin(&m, &x, 0.0, 7.0).unwrap(), max_softmax(&m.logits(&x), 7.0));
    }

    #[test]
    fn odin_perturbation_on_linear_model() {
        // f(x) = W x with distinct rows; d/dx CE_yhat = W^T (p - e_yhat)
        let w = vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0];
        let m = MlpModel::from_layers(vec![Linear::new(2, 3, w.clone(), vec![0.0; 2]).unwrap()]).unwrap();
        let x = [0.5f32, 0.25, -1.0];
        let z = m.logits(&x);
        let yhat = argmax(&z);
        let p = softmax(&widen(&z));
        let grad: Vec<f64> = (0..3)
            .map(|i| (0..2).map(|k| (p[k] - f64::from(k == yhat)) * w[k * 3 + i] as f64).sum())
            .collect();
        let xi = 0.125f32;
        let xt = odin_perturb(&m, &x, xi as f64).unwrap();
        for i in 0..3 {
            let delta = xt[i] - x[i];
            if grad[i] == 0.0 {
                assert_eq!(delta, 0.0);
            } else {
                assert_eq!(delta, -xi * grad[i].signum() as f32);
            }
        }
    }

    #[test]
    fn react_threshold_quantiles() {
        // identity features: a 1-layer model's features are its inputs
        let m = constant_logits(&[0.0, 0.0]);
        let pool = Tensor::new(vec![100, 1], (1..=100).map(|v| v as f32).collect()).unwrap();
        let tau = fit_react_threshold(&m, &pool, 0.9).unwrap();
        assert!(tau > 90.0 && tau < 91.0, "{tau}");
        assert_eq!(fit_react_threshold(&m, &pool, 1.0).unwrap(), 100.0);
        let constant = Tensor::new(vec![5, 1], vec![2.5; 5]).unwrap();
        assert_eq!(fit_react_threshold(&m, &constant, 0.9).unwrap(), 2.5);
    }

    #[test]
    fn react_clamps_only_the_largest_of_ten() {
        let m = constant_logits(&[0.0, 0.0]);
        let pool = Tensor::new(vec![10, 1], (1..=10).map(|v| v as f32).collect()).unwrap();
        let tau = fit_react_threshold(&m, &pool, 0.9).unwrap();
        let clamped = pool.data().iter().filter(|&&v| v > tau).count();
        assert_eq!(clamped, 1);
    }

    #[test]
    fn react_without_clamp_equals_base() {
        let m = MlpModel::new(&[3, 8, 4], &mut SeededRng::new(2)).unwrap();
        let x = [0.3f32, 0.1, -0.8];
        let r = ReAct::with_threshold(BaseScorer::FreeEnergy { temperature: 1.0 }, f32::INFINITY);
        assert_eq!(score_react(&m, &x, &r).unwrap(), score_free_energy(&m, &x, 1.0).unwrap());
        let unfitted = ReAct::new(0.9, BaseScorer::Softmax);
        assert!(matches!(score_react(&m, &x, &unfitted), Err(Error::State(_))));
    }

    #[test]
    fn react_at_top_quantile_matches_base_on_id_data() {
        let mut rng = SeededRng::new(8);
        let m = MlpModel::new(&[3, 8, 4], &mut rng).unwrap();
        let id = Tensor::new(vec![50, 3], (0..150).map(|_| rng.standard_normal() as f32).collect()).unwrap();
        let r = ReAct::new(1.0, BaseScorer::Softmax).fit(&m, &id).unwrap();
        for x in id.iter_rows() {
            assert_eq!(score_react(&m, x, &r).unwrap(), score_softmax(&m, x).unwrap());
        }
    }

    #[test]
    fn detector_threshold_semantics() {
        let d = Detector {
            scorer: Scorer::MaxLogit,
            threshold: 3.0,
        };
        assert_eq!(d.decide(&constant_logits(&[3.0, 1.0]), &[0.0]).unwrap(), 1);
        assert_eq!(d.decide(&constant_logits(&[2.5, 1.0]), &[0.0]).unwrap(), 0);
        let always = Detector {
            threshold: f64::NEG_INFINITY,
            ..d.clone()
        };
        let never = Detector {
            threshold: f64::INFINITY,
            ..d
        };
        assert_eq!(always.decide_score(-1e300), 1);
        assert_eq!(never.decide_score(1e300), 0);
    }

    #[test]
    fn scorer_json_round_trip() {
        let scorers = vec![
            Scorer::Softmax,
            Scorer::free_energy(),
            Scorer::MaxLogit,
            Scorer::odin(),
            Scorer::react(BaseScorer::FreeEnergy { temperature: 1.0 }),
        ];
        let json = serde_json::to_string(&scorers).unwrap();
        let back: Vec<Scorer> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, scorers);
    }

    proptest! {
        #[test]
        fn score_bounds_and_shift(z in proptest::collection::vec(-20f32..20.0, 2..12), gamma in -5f32..5.0) {
            let c = z.len() as f64;
            let sm = max_softmax(&z, 1.0);
            prop_assert!(sm >= 1.0 / c - 1e-12 && sm <= 1.0 + 1e-12);
            let fe = free_energy(&z, 1.0);
            let ml = max_logit(&z);
            prop_assert!(ml <= fe + 1e-9 && fe <= ml + c.ln() + 1e-9);

            let shifted: Vec<f32> = z.iter().map(|v| v + gamma).collect();
            // the shift is applied in f32, so compare against the realised shift
            let realised: f64 = max_logit(&shifted) - ml;
            prop_assert!((free_energy(&shifted, 1.0) - fe - realised).abs() < 1e-5);
            prop_assert!((max_softmax(&shifted, 1.0) - sm).abs() < 1e-6);
            prop_assert_eq!(argmax(&shifted), argmax(&z));
        }
    }
}
