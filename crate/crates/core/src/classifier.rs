//! Nearest class mean inference with the rejection rules: learned
//! class-specific maximal distances, NNO's global threshold and the DeepNNO
//! score threshold with its online heuristic.

use std::fmt;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{OwrError, Result};
use crate::losses::{deepnno_score, nno_score, NnoDistance};
use crate::metric_stats::{check_dim, check_finite, sq_dist, ClassId, ClassStats, RunningVariance};

/// Smallest value the heuristic threshold may reach.
pub const MIN_TAU: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Known(ClassId),
    Unknown,
}

impl Label {
    pub fn class(self) -> Option<ClassId> {
        match self {
            Label::Known(c) => Some(c),
            Label::Unknown => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Known(c) => write!(f, "{c}"),
            Label::Unknown => f.write_str("unknown"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: Label,
    /// Distance to every usable class, in class-id order. Squared Euclidean
    /// for plain NCM, normalized for learned-threshold rejection.
    pub distances: Vec<(ClassId, f64)>,
    pub rejected: bool,
}

impl Prediction {
    fn accept(class: ClassId, distances: Vec<(ClassId, f64)>) -> Self {
        Prediction {
            label: Label::Known(class),
            distances,
            rejected: false,
        }
    }

    fn reject(distances: Vec<(ClassId, f64)>) -> Self {
        Prediction {
            label: Label::Unknown,
            distances,
            rejected: true,
        }
    }
}

/// Squared distances to usable centroids, sorted by class id.
fn distances_to(
    features: ArrayView1<'_, f64>,
    centroids: &[ClassStats],
) -> Result<Vec<(ClassId, f64)>> {
    check_finite(features.iter(), "features")?;
    let mut out = Vec::with_capacity(centroids.len());
    for c in centroids.iter().filter(|c| c.is_usable()) {
        check_dim(c.centroid.len(), features.len())?;
        out.push((c.class_id, sq_dist(features, c.centroid.view())));
    }
    if out.is_empty() {
        return Err(OwrError::NoUsableCentroids);
    }
    out.sort_by_key(|d| d.0);
    Ok(out)
}

/// First minimum wins, so ties go to the smallest class id.
fn argmin<'a>(items: impl Iterator<Item = &'a (ClassId, f64)>) -> Option<ClassId> {
    let mut best: Option<(ClassId, f64)> = None;
    for &(id, d) in items {
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((id, d));
        }
    }
    best.map(|b| b.0)
}

pub fn ncm_predict(features: ArrayView1<'_, f64>, centroids: &[ClassStats]) -> Result<Prediction> {
    let distances = distances_to(features, centroids)?;
    let class = argmin(distances.iter()).expect("non-empty");
    Ok(Prediction::accept(class, distances))
}

/// Rejection with each class's learned maximal distance (`ClassStats::threshold`).
pub fn predict_with_rejection(
    features: ArrayView1<'_, f64>,
    centroids: &[ClassStats],
    var: &RunningVariance,
    strict: bool,
) -> Result<Prediction> {
    predict_with_thresholds(
        features,
        centroids,
        var,
        |id| {
            centroids
                .iter()
                .find(|c| c.class_id == id)
                .map(|c| c.threshold)
        },
        strict,
    )
}

/// Rejects when the normalized distance exceeds the class's threshold for
/// every class. Otherwise returns the nearest class overall, or with
/// `strict` the nearest among the classes that accept the sample.
pub fn predict_with_thresholds(
    features: ArrayView1<'_, f64>,
    centroids: &[ClassStats],
    var: &RunningVariance,
    threshold_of: impl Fn(ClassId) -> Option<f64>,
    strict: bool,
) -> Result<Prediction> {
    let temperature = var.current();
    let distances: Vec<(ClassId, f64)> = distances_to(features, centroids)?
        .into_iter()
        .map(|(id, d)| (id, d / temperature))
        .collect();
    let mut accepting = Vec::new();
    for &(id, d) in &distances {
        let delta = threshold_of(id).ok_or(OwrError::MissingThreshold(id))?;
        if delta < 0.0 || delta.is_nan() {
            return Err(OwrError::MissingThreshold(id));
        }
        if d <= delta {
            accepting.push((id, d));
        }
    }
    if accepting.is_empty() {
        return Ok(Prediction::reject(distances));
    }
    let class = if strict {
        argmin(accepting.iter())
    } else {
        argmin(distances.iter())
    }
    .expect("non-empty");
    Ok(Prediction::accept(class, distances))
}

/// NNO: unknown when the linear score is non-positive for every known class.
pub fn nno_predict(
    features: ArrayView1<'_, f64>,
    centroids: &[ClassStats],
    tau: f64,
    z: f64,
    kind: NnoDistance,
) -> Result<Prediction> {
    let ncm = ncm_predict(features, centroids)?;
    let mut any_positive = false;
    for c in centroids.iter().filter(|c| c.is_usable()) {
        if nno_score(features, c.centroid.view(), tau, z, kind)? > 0.0 {
            any_positive = true;
        }
    }
    Ok(if any_positive {
        ncm
    } else {
        Prediction::reject(ncm.distances)
    })
}

/// DeepNNO: unknown when no class score `exp(-d/2)` exceeds `tau`.
pub fn deepnno_predict(
    features: ArrayView1<'_, f64>,
    centroids: &[ClassStats],
    tau: f64,
) -> Result<Prediction> {
    let ncm = ncm_predict(features, centroids)?;
    let accepted = centroids
        .iter()
        .filter(|c| c.is_usable())
        .any(|c| deepnno_score(features, c.centroid.view()) > tau);
    Ok(if accepted {
        ncm
    } else {
        Prediction::reject(ncm.distances)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    TruePositive,
    TrueNegative,
    FalsePositive,
    FalseNegative,
}

impl Outcome {
    /// Outcome of a prediction against the ground truth (`None` = unknown class).
    pub fn of(predicted: Label, truth: Option<ClassId>) -> Outcome {
        match (predicted, truth) {
            (Label::Known(p), Some(t)) if p == t => Outcome::TruePositive,
            (Label::Known(_), _) => Outcome::FalsePositive,
            (Label::Unknown, None) => Outcome::TrueNegative,
            (Label::Unknown, Some(_)) => Outcome::FalseNegative,
        }
    }
}

/// DeepNNO's online threshold: up on correct decisions, down on mistakes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicThresholdState {
    pub tau: f64,
    pub step: f64,
}

impl HeuristicThresholdState {
    /// Step size defaults to 1% of the initial threshold.
    pub fn new(initial_tau: f64) -> Self {
        HeuristicThresholdState {
            tau: initial_tau.max(MIN_TAU),
            step: 0.01 * initial_tau,
        }
    }

    pub fn update(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::TruePositive | Outcome::TrueNegative => self.tau += self.step,
            Outcome::FalsePositive | Outcome::FalseNegative => {
                self.tau = (self.tau - self.step).max(MIN_TAU)
            }
        }
    }
}

pub fn deepnno_threshold_update(
    state: HeuristicThresholdState,
    outcome: Outcome,
) -> HeuristicThresholdState {
    let mut next = state;
    next.update(outcome);
    next
}
