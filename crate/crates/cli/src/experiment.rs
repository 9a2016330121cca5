//! One episode: train every step of a schedule and evaluate after each.

use std::collections::BTreeSet;

use ndarray::Array2;
use owr_core::backbone::ExtractorConfig;
use owr_core::datasets::{Dataset, Split};
use owr_core::evaluation::{evaluate_step, MetricsReport, ModelRecognizer};
use owr_core::memory::Partition;
use owr_core::protocol::{
    median_drift, run_incremental_step, EpisodeSchedule, MethodConfig, OwrModel, RejectionRule,
    TrainConfig, TrainLogRecord,
};
use owr_core::{ClassId, Result};
use serde::{Deserialize, Serialize};

/// One metrics row: a step evaluated under one rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub order_seed: u64,
    pub run: usize,
    pub train_seed: u64,
    pub init_seed: u64,
    pub rule: String,
    #[serde(flatten)]
    pub report: MetricsReport,
    /// Median feature displacement of memory samples across this step.
    pub drift: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EpisodeSpec<'a> {
    pub dataset: &'a Dataset,
    pub schedule: &'a EpisodeSchedule,
    pub extractor: ExtractorConfig,
    pub train: TrainConfig,
    pub method: MethodConfig,
    pub rules: Vec<RejectionRule>,
    pub order_seed: u64,
    pub run: usize,
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub records: Vec<MetricsRecord>,
    pub log: Vec<TrainLogRecord>,
    pub model: OwrModel,
}

/// Known-class and unknown-class test data after step `t`.
pub fn test_sets(
    dataset: &Dataset,
    schedule: &EpisodeSchedule,
    t: usize,
) -> (Array2<f64>, Vec<ClassId>, Array2<f64>) {
    let (known_x, known_y) = dataset.subset(Split::Test, &schedule.known_through(t));
    let (unknown_x, _) = dataset.subset(Split::Test, &schedule.unknown());
    (known_x, known_y, unknown_x)
}

pub fn evaluate_model(
    model: &OwrModel,
    dataset: &Dataset,
    schedule: &EpisodeSchedule,
    t: usize,
    rule: RejectionRule,
    threshold_override: Option<f64>,
) -> Result<MetricsReport> {
    let (known_x, known_y, unknown_x) = test_sets(dataset, schedule, t);
    let recognizer = ModelRecognizer {
        model,
        rule,
        threshold_override,
    };
    evaluate_step(&recognizer, t, known_x.view(), &known_y, unknown_x.view())
}

fn memory_inputs(model: &OwrModel) -> Array2<f64> {
    let mut which = model.memory.indices(Partition::Rehearsal);
    which.extend(model.memory.indices(Partition::Heldout));
    which.sort();
    model
        .memory
        .gather(&which, model.extractor.config().input_dim)
        .0
}

/// Trains all steps in order. `on_step` sees the model after each step.
pub fn run_episode(
    spec: &EpisodeSpec<'_>,
    mut on_step: impl FnMut(usize, &OwrModel) -> Result<()>,
) -> Result<EpisodeOutcome> {
    let mut model = OwrModel::new(spec.extractor.clone(), &spec.train, spec.method.clone())?;
    let mut records = Vec::new();
    let mut log = Vec::new();
    for t in 0..spec.schedule.n_steps() {
        let classes: BTreeSet<ClassId> = spec.schedule.class_sets[t].iter().copied().collect();
        let (x, y) = spec.dataset.subset(Split::Train, &classes);
        let before = (t >= 1).then(|| (model.extractor.snapshot(), memory_inputs(&model)));
        let report = run_incremental_step(&mut model, spec.schedule, t, x.view(), &y, &spec.train)?;
        log.extend(report.log);
        let drift = match &before {
            Some((old, inputs)) if inputs.nrows() > 0 => {
                Some(median_drift(old, &model.extractor, inputs.view())?)
            }
            _ => None,
        };
        for &rule in &spec.rules {
            let report = evaluate_model(&model, spec.dataset, spec.schedule, t, rule, None)?;
            records.push(MetricsRecord {
                order_seed: spec.order_seed,
                run: spec.run,
                train_seed: spec.train.seed,
                init_seed: spec.extractor.init_seed,
                rule: rule.name().to_string(),
                report,
                drift,
            });
        }
        on_step(t, &model)?;
    }
    Ok(EpisodeOutcome {
        records,
        log,
        model,
    })
}
