//! Open world metrics: closed world accuracy with and without rejection,
//! open set rejection accuracy, their arithmetic (OWR) and harmonic (OWR-H)
//! means, and the known / unknown rejection-rate gap.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::classifier::{ncm_predict, Label};
use crate::error::{OwrError, Result};
use crate::metric_stats::ClassId;
use crate::protocol::{OwrModel, RejectionRule};

/// Something that labels inputs with and without the unknown option.
pub trait Recognizer {
    /// Nearest class mean only; never returns [`Label::Unknown`].
    fn classify(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<Label>>;
    /// Classification with the rejection option.
    fn recognize(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<Label>>;
}

/// A trained model paired with the rejection rule to evaluate.
#[derive(Debug, Clone, Copy)]
pub struct ModelRecognizer<'a> {
    pub model: &'a OwrModel,
    pub rule: RejectionRule,
    /// Replaces every learned distance, e.g. `f64::INFINITY` to disable rejection.
    pub threshold_override: Option<f64>,
}

impl<'a> ModelRecognizer<'a> {
    pub fn new(model: &'a OwrModel, rule: RejectionRule) -> Self {
        ModelRecognizer {
            model,
            rule,
            threshold_override: None,
        }
    }
}

impl Recognizer for ModelRecognizer<'_> {
    fn classify(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<Label>> {
        let features = self.model.features(inputs)?;
        let centroids = self.model.centroids();
        features
            .rows()
            .into_iter()
            .map(|f| ncm_predict(f, &centroids).map(|p| p.label))
            .collect()
    }

    fn recognize(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<Label>> {
        let features = self.model.features(inputs)?;
        features
            .rows()
            .into_iter()
            .map(|f| {
                self.model
                    .predict(f, self.rule, self.threshold_override)
                    .map(|p| p.label)
            })
            .collect()
    }
}

fn accuracy(predicted: &[Label], truth: &[ClassId]) -> f64 {
    let hits = predicted
        .iter()
        .zip(truth)
        .filter(|(p, t)| **p == Label::Known(**t))
        .count();
    hits as f64 / truth.len() as f64
}

fn check_known(inputs: ArrayView2<'_, f64>, labels: &[ClassId]) -> Result<()> {
    if labels.is_empty() {
        return Err(OwrError::Empty("known test set"));
    }
    if inputs.nrows() != labels.len() {
        return Err(OwrError::DimensionMismatch {
            expected: labels.len(),
            found: inputs.nrows(),
        });
    }
    Ok(())
}

pub fn eval_closed_no_rejection(
    model: &impl Recognizer,
    inputs: ArrayView2<'_, f64>,
    labels: &[ClassId],
) -> Result<f64> {
    check_known(inputs, labels)?;
    Ok(accuracy(&model.classify(inputs)?, labels))
}

/// Rejected known samples count as errors.
pub fn eval_closed_with_rejection(
    model: &impl Recognizer,
    inputs: ArrayView2<'_, f64>,
    labels: &[ClassId],
) -> Result<f64> {
    check_known(inputs, labels)?;
    Ok(accuracy(&model.recognize(inputs)?, labels))
}

/// Fraction of unknown-class samples that are rejected.
pub fn eval_open_set(model: &impl Recognizer, unknown_inputs: ArrayView2<'_, f64>) -> Result<f64> {
    if unknown_inputs.nrows() == 0 {
        return Err(OwrError::Empty("unknown test set"));
    }
    let labels = model.recognize(unknown_inputs)?;
    let rejected = labels.iter().filter(|l| **l == Label::Unknown).count();
    Ok(rejected as f64 / labels.len() as f64)
}

/// Arithmetic and harmonic means of closed-world-with-rejection and open-set
/// accuracy. The harmonic mean is 0 when both are 0.
pub fn compose_owr(cw_rej: f64, open_set_acc: f64) -> (f64, f64) {
    let owr = (cw_rej + open_set_acc) / 2.0;
    let sum = cw_rej + open_set_acc;
    let owr_h = if sum == 0.0 {
        0.0
    } else {
        2.0 * cw_rej * open_set_acc / sum
    };
    (owr, owr_h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionRates {
    /// Share of correctly NCM-classified known samples that the rejection
    /// option turns into unknown; `None` when no known sample is correct.
    pub known_rejection_rate: Option<f64>,
    pub open_set_acc: f64,
    pub diff: Option<f64>,
}

pub fn rejection_rate_diff(
    model: &impl Recognizer,
    known_inputs: ArrayView2<'_, f64>,
    known_labels: &[ClassId],
    unknown_inputs: ArrayView2<'_, f64>,
) -> Result<RejectionRates> {
    check_known(known_inputs, known_labels)?;
    let closed = model.classify(known_inputs)?;
    let open = model.recognize(known_inputs)?;
    let mut correct = 0usize;
    let mut rejected = 0usize;
    for ((c, o), t) in closed.iter().zip(&open).zip(known_labels) {
        if *c == Label::Known(*t) {
            correct += 1;
            if *o == Label::Unknown {
                rejected += 1;
            }
        }
    }
    let open_set_acc = eval_open_set(model, unknown_inputs)?;
    let known_rejection_rate = (correct > 0).then(|| rejected as f64 / correct as f64);
    Ok(RejectionRates {
        known_rejection_rate,
        open_set_acc,
        diff: known_rejection_rate.map(|k| open_set_acc - k),
    })
}

/// Metrics after one step. Open set quantities are `None` when there are no
/// unknown test samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: usize,
    pub cw_no_rej: f64,
    pub cw_rej: f64,
    pub open_set_acc: Option<f64>,
    pub owr: Option<f64>,
    pub owr_h: Option<f64>,
    pub known_rejection_rate: Option<f64>,
}

pub fn evaluate_step(
    model: &impl Recognizer,
    step: usize,
    known_inputs: ArrayView2<'_, f64>,
    known_labels: &[ClassId],
    unknown_inputs: ArrayView2<'_, f64>,
) -> Result<MetricsReport> {
    let cw_no_rej = eval_closed_no_rejection(model, known_inputs, known_labels)?;
    let cw_rej = eval_closed_with_rejection(model, known_inputs, known_labels)?;
    let (open_set_acc, known_rejection_rate) = if unknown_inputs.nrows() == 0 {
        let closed = model.classify(known_inputs)?;
        let open = model.recognize(known_inputs)?;
        let correct: Vec<bool> = closed
            .iter()
            .zip(known_labels)
            .map(|(c, t)| *c == Label::Known(*t))
            .collect();
        let n = correct.iter().filter(|c| **c).count();
        let rej = correct
            .iter()
            .zip(&open)
            .filter(|(c, o)| **c && **o == Label::Unknown)
            .count();
        (None, (n > 0).then(|| rej as f64 / n as f64))
    } else {
        let rates = rejection_rate_diff(model, known_inputs, known_labels, unknown_inputs)?;
        (Some(rates.open_set_acc), rates.known_rejection_rate)
    };
    let composed = open_set_acc.map(|o| compose_owr(cw_rej, o));
    Ok(MetricsReport {
        step,
        cw_no_rej,
        cw_rej,
        open_set_acc,
        owr: composed.map(|c| c.0),
        owr_h: composed.map(|c| c.1),
        known_rejection_rate,
    })
}

/// Unweighted mean over reports of each metric; a metric missing in any
/// report is missing in the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub steps: usize,
    pub cw_no_rej: f64,
    pub cw_rej: f64,
    pub open_set_acc: Option<f64>,
    pub owr: Option<f64>,
    pub owr_h: Option<f64>,
    pub known_rejection_rate: Option<f64>,
}

pub fn average_reports(reports: &[MetricsReport]) -> Option<MetricsSummary> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: fn(&MetricsReport) -> Option<f64>| {
        reports
            .iter()
            .map(f)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n)
    };
    Some(MetricsSummary {
        steps: reports.len(),
        cw_no_rej: mean(|r| r.cw_no_rej),
        cw_rej: mean(|r| r.cw_rej),
        open_set_acc: mean_opt(|r| r.open_set_acc),
        owr: mean_opt(|r| r.owr),
        owr_h: mean_opt(|r| r.owr_h),
        known_rejection_rate: mean_opt(|r| r.known_rejection_rate),
    })
}
