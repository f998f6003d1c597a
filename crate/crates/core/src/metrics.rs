//! Threshold-free detection metrics. ID is the positive class throughout
//! unless a metric is asked for the flipped view.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSample {
    pub score: f64,
    pub is_id: bool,
}

impl ScoreSample {
    pub fn id(score: f64) -> Self {
        ScoreSample { score, is_id: true }
    }

    pub fn ood(score: f64) -> Self {
        ScoreSample { score, is_id: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr: f64,
}

/// Which class counts as positive when computing AUPR.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positive {
    #[default]
    Id,
    Ood,
}

/// Joins ID and OOD score lists into labeled samples.
pub fn samples_from(id_scores: &[f64], ood_scores: &[f64]) -> Vec<ScoreSample> {
    id_scores
        .iter()
        .map(|&s| ScoreSample::id(s))
        .chain(ood_scores.iter().map(|&s| ScoreSample::ood(s)))
        .collect()
}

fn counts(samples: &[ScoreSample]) -> Result<(usize, usize)> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::invalid(format!("non-finite score {}", s.score)));
    }
    let n_id = samples.iter().filter(|s| s.is_id).count();
    let n_ood = samples.len() - n_id;
    if n_id == 0 || n_ood == 0 {
        return Err(Error::invalid("need at least one ID and one OOD sample"));
    }
    Ok((n_id, n_ood))
}

/// Total order by score, then OOD before ID.
fn sorted(samples: &[ScoreSample]) -> Vec<ScoreSample> {
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.is_id.cmp(&b.is_id)));
    v
}

/// Groups of equal score in ascending order, as `(id_count, ood_count)`.
fn tie_groups(sorted: &[ScoreSample]) -> Vec<(usize, usize)> {
    let mut groups = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut a, mut b) = (0, 0);
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            if sorted[j].is_id {
                a += 1;
            } else {
                b += 1;
            }
            j += 1;
        }
        groups.push((a, b));
        i = j;
    }
    groups
}

/// Probability that a random ID sample outscores a random OOD one, ties
/// counted as one half (Mann-Whitney U from mid-rank sums).
pub fn auroc(samples: &[ScoreSample]) -> Result<f64> {
    let (n_id, n_ood) = counts(samples)?;
    let s = sorted(samples);
    let mut rank_sum = 0.0f64;
    let mut start = 0usize;
    for (a, b) in tie_groups(&s) {
        let size = a + b;
        // ranks start..start+size-1 (1-based start+1..start+size), mid-rank:
        let mid = start as f64 + (size as f64 + 1.0) / 2.0;
        rank_sum += a as f64 * mid;
        start += size;
    }
    let n_id_f = n_id as f64;
    let u = rank_sum - n_id_f * (n_id_f + 1.0) / 2.0;
    Ok(u / (n_id_f * n_ood as f64))
}

/// OOD false-positive rate at the largest ID score threshold that keeps at
/// least `tpr_target` of ID samples at or above it.
pub fn fpr_at_tpr(samples: &[ScoreSample], tpr_target: f64) -> Result<f64> {
    let (n_id, n_ood) = counts(samples)?;
    if !(0.0..=1.0).contains(&tpr_target) {
        return Err(Error::invalid(format!("TPR target {tpr_target} outside [0, 1]")));
    }
    let mut id: Vec<f64> = samples.iter().filter(|s| s.is_id).map(|s| s.score).collect();
    id.sort_by(|a, b| b.total_cmp(a));
    // At threshold id[k] (descending), #ID >= threshold is at least k+1; ties
    // only add more. Need the smallest k with (k+1)/n >= target.
    let need = ((tpr_target * n_id as f64) - 1e-9).ceil().max(1.0) as usize;
    let tau = id[need.min(n_id) - 1];
    let fp = samples.iter().filter(|s| !s.is_id && s.score >= tau).count();
    Ok(fp as f64 / n_ood as f64)
}

/// Area under the precision-recall curve, sweeping thresholds over distinct
/// scores from high to low and summing precision times recall increments.
pub fn aupr(samples: &[ScoreSample]) -> Result<f64> {
    let (n_id, _) = counts(samples)?;
    let s = sorted(samples);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (a, b) in tie_groups(&s).into_iter().rev() {
        tp += a;
        fp += b;
        let recall = tp as f64 / n_id as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    Ok(area)
}

pub fn aupr_with_positive(samples: &[ScoreSample], positive: Positive) -> Result<f64> {
    match positive {
        Positive::Id => aupr(samples),
        Positive::Ood => aupr(&flip(samples)),
    }
}

/// Swaps the roles of the classes: labels flipped, scores negated.
pub fn flip(samples: &[ScoreSample]) -> Vec<ScoreSample> {
    samples
        .iter()
        .map(|s| ScoreSample {
            score: -s.score,
            is_id: !s.is_id,
        })
        .collect()
}

pub fn detection_metrics(samples: &[ScoreSample]) -> Result<DetectionMetrics> {
    detection_metrics_with(samples, Positive::Id)
}

pub fn detection_metrics_with(samples: &[ScoreSample], positive: Positive) -> Result<DetectionMetrics> {
    Ok(DetectionMetrics {
        fpr95: fpr_at_tpr(samples, 0.95)?,
        auroc: auroc(samples)?,
        aupr: aupr_with_positive(samples, positive)?,
    })
}

/// Linear-interpolated quantile (order statistic at position `q (n - 1)`).
/// Sorts `values` in place.
pub fn quantile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty set");
    values.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Per-class counts over shared equal-width bins spanning all scores. The
/// top bin is closed on the right; if every score is equal, everything lands
/// in the last bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub id_counts: Vec<usize>,
    pub ood_counts: Vec<usize>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.id_counts.len()
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.bins() as f64;
        (self.lo + w * i as f64, self.lo + w * (i + 1) as f64)
    }
}

pub fn score_histogram(samples: &[ScoreSample], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let lo = samples.iter().map(|s| s.score).fold(f64::INFINITY, f64::min);
    let hi = samples.iter().map(|s| s.score).fold(f64::NEG_INFINITY, f64::max);
    let mut id_counts = vec![0; bins];
    let mut ood_counts = vec![0; bins];
    for s in samples {
        let b = if hi > lo {
            (((s.score - lo) / (hi - lo)) * bins as f64).floor() as usize
        } else {
            bins - 1
        }
        .min(bins - 1);
        if s.is_id {
            id_counts[b] += 1;
        } else {
            ood_counts[b] += 1;
        }
    }
    Ok(Histogram {
        lo,
        hi,
        id_counts,
        ood_counts,
    })
}

/// Orders (fpr95 ascending, then auroc descending).
pub fn rank_order(a: &DetectionMetrics, b: &DetectionMetrics) -> Ordering {
    a.fpr95
        .total_cmp(&b.fpr95)
        .then_with(|| b.auroc.total_cmp(&a.auroc))
}
