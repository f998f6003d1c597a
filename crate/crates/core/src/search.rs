//! Coordinate-wise random search over discrete hyperparameter candidates.
//!
//! Each trial picks one coordinate uniformly at random, evaluates every
//! candidate value for it with all other coordinates held at the incumbent,
//! and moves the incumbent to the best of them. Points are ranked by
//! validation FPR95 ascending, then AUROC descending; ties keep the earlier
//! point.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{rank_order, DetectionMetrics};
use crate::tensor::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coordinate {
    pub name: String,
    pub candidates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluated {
    /// Zero for the starting point, otherwise the trial that first reached it.
    pub trial: usize,
    pub point: Vec<f64>,
    pub metrics: DetectionMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: Evaluated,
    /// Every distinct point in evaluation order.
    pub evaluated: Vec<Evaluated>,
    /// The coordinate explored by each trial.
    pub explored: Vec<String>,
}

impl SearchOutcome {
    /// Distinct points, best first.
    pub fn ranked(&self) -> Vec<Evaluated> {
        let mut v = self.evaluated.clone();
        v.sort_by(|a, b| rank_order(&a.metrics, &b.metrics));
        v
    }
}

/// Snaps each starting value onto its coordinate's candidates: kept if it is
/// one of them, else replaced by the first candidate.
pub fn project_start(coords: &[Coordinate], start: &[f64]) -> Vec<f64> {
    coords
        .iter()
        .zip(start)
        .map(|(c, &v)| if c.candidates.contains(&v) { v } else { c.candidates[0] })
        .collect()
}

fn key(point: &[f64]) -> Vec<u64> {
    point.iter().map(|v| v.to_bits()).collect()
}

pub fn coordinate_search<F>(
    coords: &[Coordinate],
    start: &[f64],
    trials: usize,
    rng: &mut SeededRng,
    mut evaluate: F,
) -> Result<SearchOutcome>
where
    F: FnMut(&[f64]) -> Result<DetectionMetrics>,
{
    if coords.is_empty() || coords.iter().any(|c| c.candidates.is_empty()) {
        return Err(Error::invalid("search space is empty"));
    }
    if trials == 0 {
        return Err(Error::invalid("need at least one trial"));
    }
    if start.len() != coords.len() {
        return Err(Error::invalid("starting point has the wrong number of coordinates"));
    }
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut evaluated: Vec<Evaluated> = Vec::new();
    let mut visit = |point: Vec<f64>, trial: usize, evaluated: &mut Vec<Evaluated>| -> Result<usize> {
        if let Some(&i) = seen.get(&key(&point)) {
            return Ok(i);
        }
        let metrics = evaluate(&point)?;
        evaluated.push(Evaluated { trial, point: point.clone(), metrics });
        seen.insert(key(&point), evaluated.len() - 1);
        Ok(evaluated.len() - 1)
    };

    let mut incumbent = visit(project_start(coords, start), 0, &mut evaluated)?;
    let mut explored = Vec::with_capacity(trials);
    for trial in 1..=trials {
        let axis = rng.below(coords.len());
        explored.push(coords[axis].name.clone());
        let mut best = incumbent;
        for &v in &coords[axis].candidates {
            let mut p = evaluated[incumbent].point.clone();
            p[axis] = v;
            let i = visit(p, trial, &mut evaluated)?;
            if rank_order(&evaluated[i].metrics, &evaluated[best].metrics).is_lt() {
                best = i;
            }
        }
        incumbent = best;
    }
    Ok(SearchOutcome {
        best: evaluated[incumbent].clone(),
        evaluated,
        explored,
    })
}
