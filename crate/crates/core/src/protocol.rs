//! The open world lifecycle: an initial step and incremental steps, each
//! training the extractor (stage one) and then fitting the rejection
//! distances on held-out exemplars with everything else frozen (stage two).

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Extractor, ExtractorConfig, FrozenExtractor, Sgd};
use crate::classifier::{
    deepnno_predict, nno_predict, predict_with_thresholds, HeuristicThresholdState, Outcome,
    Prediction,
};
use crate::error::{OwrError, Result};
use crate::losses::{deepnno_bce, md_loss, total_loss, LossBreakdown, LossWeights, NnoDistance};
use crate::memory::{
    compose_batch, herd_select, memory_draw_count, random_select, rebalance, ExemplarMemory,
    Partition, SelectionRule,
};
use crate::metric_stats::{batch_variance, sq_dist, ClassId, ClassStats, RunningVariance};

/// Ordered disjoint class sets `C_0..C_S` plus the pool of classes never
/// learned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSchedule {
    pub class_sets: Vec<Vec<ClassId>>,
    pub unknown_pool: Vec<ClassId>,
    pub seed: u64,
}

impl EpisodeSchedule {
    pub fn new(
        class_sets: Vec<Vec<ClassId>>,
        unknown_pool: Vec<ClassId>,
        seed: u64,
    ) -> Result<Self> {
        let s = EpisodeSchedule {
            class_sets,
            unknown_pool,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_sets.is_empty() || self.class_sets.iter().any(Vec::is_empty) {
            return Err(OwrError::InvalidSchedule(
                "every step needs at least one class".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for c in self.class_sets.iter().flatten().chain(&self.unknown_pool) {
            if !seen.insert(*c) {
                return Err(OwrError::InvalidSchedule(format!(
                    "class {c} appears twice"
                )));
            }
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        self.class_sets.len()
    }

    /// Classes known after step `t`.
    pub fn known_through(&self, t: usize) -> BTreeSet<ClassId> {
        self.class_sets[..=t.min(self.class_sets.len() - 1)]
            .iter()
            .flatten()
            .copied()
            .collect()
    }

    pub fn unknown(&self) -> BTreeSet<ClassId> {
        self.unknown_pool.iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Clustering losses, distillation and learned class-specific distances.
    Ours,
    /// Fixed representation after the first step with a global threshold.
    Nno,
    /// End-to-end BCE training with the heuristic online threshold.
    Deepnno,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub kind: Method,
    /// NNO score normalization `Z`.
    pub nno_z: f64,
    pub nno_distance: NnoDistance,
    /// NNO's `tau` is this quantile of held-out in-class distances.
    pub nno_quantile: f64,
    pub deepnno_initial_tau: f64,
    /// Defaults to 1% of the initial threshold.
    pub deepnno_step: Option<f64>,
    /// Accept only among classes whose own distance admits the sample.
    pub strict_accept: bool,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            kind: Method::Ours,
            nno_z: 1.0,
            nno_distance: NnoDistance::Euclidean,
            nno_quantile: 0.95,
            deepnno_initial_tau: 0.5,
            deepnno_step: None,
            strict_accept: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_initial: usize,
    pub epochs_incremental: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub threshold_lr: f64,
    pub threshold_epochs: usize,
    pub memory_budget: usize,
    pub heldout_fraction: f64,
    pub memory_fraction: f64,
    pub selection: SelectionRule,
    /// Standard deviation of Gaussian jitter on held-out features; 0 disables.
    pub heldout_jitter: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_initial: 12,
            epochs_incremental: 4,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 128,
            weights: LossWeights::default(),
            threshold_lr: 0.01,
            threshold_epochs: 50,
            memory_budget: crate::memory::DEFAULT_BUDGET,
            heldout_fraction: crate::memory::DEFAULT_HELDOUT_FRACTION,
            memory_fraction: crate::memory::DEFAULT_MEMORY_FRACTION,
            selection: SelectionRule::Herding,
            heldout_jitter: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OwrError::InvalidConfig(m));
        if self.epochs_initial == 0 || self.epochs_incremental == 0 || self.threshold_epochs == 0 {
            return bad("epoch counts must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if !(self.threshold_lr > 0.0 && self.threshold_lr.is_finite()) {
            return bad(format!(
                "threshold_lr {} must be positive",
                self.threshold_lr
            ));
        }
        let w = &self.weights;
        if [w.global, w.lambda, w.gamma]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return bad("loss weights must be non-negative".into());
        }
        if self.heldout_jitter.is_nan() || self.heldout_jitter < 0.0 {
            return bad("heldout_jitter must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.memory_fraction) {
            return bad(format!(
                "memory_fraction {} not in [0, 1)",
                self.memory_fraction
            ));
        }
        ExemplarMemory::new(self.memory_budget, self.heldout_fraction)?;
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight_decay non-negative".into());
        }
        Ok(())
    }
}

/// How a trained model turns distances into accept / reject decisions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionRule {
    /// Per-class distances fit on held-out exemplars after feature training.
    ClassSpecific,
    /// Per-class distances fit on training batches while the extractor trains.
    SingleStage,
    /// One distance shared by every class, fit on held-out exemplars.
    GlobalThreshold,
    /// DeepNNO score threshold adapted online during training.
    DeepnnoHeuristic,
    /// NNO linear score with a global `tau`.
    Nno,
}

impl RejectionRule {
    pub const ALL: [RejectionRule; 5] = [
        RejectionRule::ClassSpecific,
        RejectionRule::SingleStage,
        RejectionRule::GlobalThreshold,
        RejectionRule::DeepnnoHeuristic,
        RejectionRule::Nno,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RejectionRule::ClassSpecific => "class_specific_two_stage",
            RejectionRule::SingleStage => "class_specific_single_stage",
            RejectionRule::GlobalThreshold => "global_two_stage",
            RejectionRule::DeepnnoHeuristic => "deepnno_heuristic",
            RejectionRule::Nno => "nno",
        }
    }
}

/// Thresholds of the alternative rejection rules, maintained alongside the
/// main model so every rule can be evaluated on the same extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionState {
    pub single_stage: BTreeMap<ClassId, f64>,
    pub global_threshold: f64,
    pub heuristic: HeuristicThresholdState,
    pub nno_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OwrModel {
    pub method: MethodConfig,
    pub extractor: Extractor,
    pub optimizer: Sgd,
    pub classes: BTreeMap<ClassId, ClassStats>,
    pub variance: RunningVariance,
    pub memory: ExemplarMemory,
    pub rejection: RejectionState,
    pub completed_steps: usize,
}

/// One stage-one batch, as written to the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub epoch: usize,
    pub batch: usize,
    pub gc: f64,
    pub lc: f64,
    pub ds: f64,
    pub total: f64,
    pub sigma2: f64,
    pub skipped_anchors: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub log: Vec<TrainLogRecord>,
    /// Classes whose thresholds fell back to rehearsal exemplars.
    pub heldout_fallbacks: Vec<ClassId>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Distinct random streams per purpose and step.
const STREAM_STAGE1: u64 = 1 << 32;
const STREAM_SELECT: u64 = 2 << 32;
const STREAM_STAGE2: u64 = 3 << 32;
const SPLIT_SEED_SALT: u64 = 0x6d65_6d6f_7279;

impl OwrModel {
    pub fn new(
        extractor: ExtractorConfig,
        train: &TrainConfig,
        method: MethodConfig,
    ) -> Result<Self> {
        train.validate()?;
        let extractor = Extractor::new(extractor)?;
        let optimizer = Sgd::new(
            &extractor,
            train.learning_rate,
            train.momentum,
            train.weight_decay,
        )?;
        let mut heuristic = HeuristicThresholdState::new(method.deepnno_initial_tau);
        if let Some(step) = method.deepnno_step {
            heuristic.step = step;
        }
        Ok(OwrModel {
            method,
            extractor,
            optimizer,
            classes: BTreeMap::new(),
            variance: RunningVariance::new(),
            memory: ExemplarMemory::new(train.memory_budget, train.heldout_fraction)?,
            rejection: RejectionState {
                single_stage: BTreeMap::new(),
                global_threshold: 0.0,
                heuristic,
                nno_tau: 1.0,
            },
            completed_steps: 0,
        })
    }

    pub fn known_classes(&self) -> Vec<ClassId> {
        self.classes.keys().copied().collect()
    }

    pub fn centroids(&self) -> Vec<ClassStats> {
        self.classes.values().cloned().collect()
    }

    /// The rule each method uses when not running an ablation.
    pub fn default_rule(&self) -> RejectionRule {
        match self.method.kind {
            Method::Ours => RejectionRule::ClassSpecific,
            Method::Nno => RejectionRule::Nno,
            Method::Deepnno => RejectionRule::DeepnnoHeuristic,
        }
    }

    pub fn features(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.extractor.features(inputs)
    }

    /// Predicts one feature vector under `rule`. `threshold_override`
    /// replaces every learned distance (class-specific, single-stage and
    /// global rules only).
    pub fn predict(
        &self,
        features: ArrayView1<'_, f64>,
        rule: RejectionRule,
        threshold_override: Option<f64>,
    ) -> Result<Prediction> {
        let centroids = self.centroids();
        let strict = self.method.strict_accept;
        let lookup = |map: &dyn Fn(ClassId) -> Option<f64>| {
            predict_with_thresholds(
                features,
                &centroids,
                &self.variance,
                |id| threshold_override.or_else(|| map(id)),
                strict,
            )
        };
        match rule {
            RejectionRule::ClassSpecific => {
                lookup(&|id| self.classes.get(&id).map(|c| c.threshold))
            }
            RejectionRule::SingleStage => {
                lookup(&|id| self.rejection.single_stage.get(&id).copied())
            }
            RejectionRule::GlobalThreshold => lookup(&|_| Some(self.rejection.global_threshold)),
            RejectionRule::DeepnnoHeuristic => {
                deepnno_predict(features, &centroids, self.rejection.heuristic.tau)
            }
            RejectionRule::Nno => nno_predict(
                features,
                &centroids,
                self.rejection.nno_tau,
                self.method.nno_z,
                self.method.nno_distance,
            ),
        }
    }
}

/// Runs incremental step `t` on the training data of `C_t`.
pub fn run_incremental_step(
    model: &mut OwrModel,
    schedule: &EpisodeSchedule,
    t: usize,
    inputs: ArrayView2<'_, f64>,
    labels: &[ClassId],
    config: &TrainConfig,
) -> Result<StepReport> {
    config.validate()?;
    if t != model.completed_steps || t >= schedule.n_steps() {
        return Err(OwrError::InvalidSchedule(format!(
            "step {t} requested after {} completed steps of {}",
            model.completed_steps,
            schedule.n_steps()
        )));
    }
    let step_classes: BTreeSet<ClassId> = schedule.class_sets[t].iter().copied().collect();
    if let Some(&label) = labels.iter().find(|l| !step_classes.contains(l)) {
        return Err(OwrError::LabelOutsideStep { label, step: t });
    }
    if inputs.nrows() != labels.len() || inputs.nrows() == 0 {
        return Err(OwrError::Empty("step training data"));
    }

    let previous = (t >= 1).then(|| model.extractor.snapshot());
    let dim = model.extractor.feature_dim();
    for &c in &step_classes {
        model
            .classes
            .entry(c)
            .or_insert_with(|| ClassStats::new(c, dim));
    }
    // NNO keeps the representation learned at the first step.
    model.optimizer.learning_rate = if model.method.kind == Method::Nno && t >= 1 {
        0.0
    } else {
        config.learning_rate
    };

    let mut report = StepReport::default();
    let epochs = if t == 0 {
        config.epochs_initial
    } else {
        config.epochs_incremental
    };
    let mut rng = stream_rng(config.seed, STREAM_STAGE1 + t as u64);
    for epoch in 0..epochs {
        let records = stage1_train_epoch(
            model,
            inputs,
            labels,
            previous.as_ref(),
            config,
            t,
            epoch,
            &mut rng,
        )?;
        report.log.extend(records);
    }

    update_memory(model, &step_classes, inputs, labels, config, t)?;
    model
        .memory
        .split_train_heldout(config.seed ^ SPLIT_SEED_SALT);
    report.heldout_fallbacks = stage2_learn_thresholds(model, config, t)?;
    model.completed_steps = t + 1;
    Ok(report)
}

/// One pass over the step's data in mixed batches.
#[allow(clippy::too_many_arguments)]
pub fn stage1_train_epoch(
    model: &mut OwrModel,
    inputs: ArrayView2<'_, f64>,
    labels: &[ClassId],
    previous: Option<&FrozenExtractor>,
    config: &TrainConfig,
    step: usize,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainLogRecord>> {
    let has_rehearsal = !model.memory.indices(Partition::Rehearsal).is_empty();
    let n_memory = memory_draw_count(config.batch_size, config.memory_fraction, has_rehearsal)?;
    let n_current = config.batch_size - n_memory;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    let mut records = Vec::new();
    for (b, chunk) in order.chunks(n_current).enumerate() {
        let batch = compose_batch(inputs, labels, chunk, &model.memory, n_memory, rng);
        let mut record =
            stage1_train_batch(model, batch.inputs.view(), &batch.labels, previous, config)
                .map_err(|e| match e {
                    OwrError::NonFinite(what) => OwrError::Diverged {
                        step,
                        epoch,
                        batch: b,
                        reason: format!("non-finite {what}"),
                    },
                    other => other,
                })?;
        record.step = step;
        record.epoch = epoch;
        record.batch = b;
        records.push(record);
    }
    Ok(records)
}

/// Forward, online statistics, loss, backward and one SGD step on a batch.
/// The side-channel thresholds of the single-stage and DeepNNO rules are
/// updated from the same batch.
pub fn stage1_train_batch(
    model: &mut OwrModel,
    inputs: ArrayView2<'_, f64>,
    labels: &[ClassId],
    previous: Option<&FrozenExtractor>,
    config: &TrainConfig,
) -> Result<TrainLogRecord> {
    let (features, cache) = model.extractor.forward(inputs)?;
    let temperature = batch_variance(features.view())?;
    absorb_batch(model, features.view(), labels)?;
    model.variance.update(features.view())?;
    let centroids = model.centroids();

    let old_features = previous.map(|p| p.features(inputs)).transpose()?;
    let (loss, parts, skipped) = match model.method.kind {
        Method::Ours => {
            let (out, parts) = total_loss(
                features.view(),
                labels,
                &centroids,
                temperature,
                old_features.as_ref().map(|o| o.view()),
                &config.weights,
            )?;
            let skipped = out.skipped_anchors;
            (out.feature_grads, parts, skipped)
        }
        Method::Nno => {
            let weights = LossWeights {
                global: 1.0,
                lambda: 0.0,
                gamma: 0.0,
            };
            let (out, parts) = total_loss(
                features.view(),
                labels,
                &centroids,
                temperature,
                None,
                &weights,
            )?;
            (out.feature_grads, parts, 0)
        }
        Method::Deepnno => {
            let n = labels.len() as f64;
            let mut grads = Array2::zeros(features.raw_dim());
            let mut value = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                let out = deepnno_bce(features.row(i), label, &centroids)?;
                value += out.value / n;
                grads
                    .row_mut(i)
                    .scaled_add(1.0 / n, &out.feature_grads.row(0));
            }
            if !value.is_finite() {
                return Err(OwrError::NonFinite("DeepNNO loss"));
            }
            let parts = LossBreakdown {
                total: value,
                ..LossBreakdown::default()
            };
            (grads, parts, 0)
        }
    };

    update_side_thresholds(
        model,
        features.view(),
        labels,
        &centroids,
        temperature,
        config,
    )?;

    let grads = model.extractor.backward(&cache, loss.view())?;
    model.optimizer.step(&mut model.extractor, &grads)?;

    Ok(TrainLogRecord {
        step: model.completed_steps,
        epoch: 0,
        batch: 0,
        gc: parts.gc,
        lc: parts.lc,
        ds: parts.ds,
        total: parts.total,
        sigma2: temperature,
        skipped_anchors: skipped,
    })
}

fn absorb_batch(
    model: &mut OwrModel,
    features: ArrayView2<'_, f64>,
    labels: &[ClassId],
) -> Result<()> {
    let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    for (class, rows) in by_class {
        let stats = model
            .classes
            .get_mut(&class)
            .ok_or(OwrError::UnknownClass(class))?;
        stats.absorb(features.select(Axis(0), &rows).view())?;
    }
    Ok(())
}

/// Single-stage distances (hinge steps on training features with the batch
/// temperature) and the DeepNNO heuristic threshold.
fn update_side_thresholds(
    model: &mut OwrModel,
    features: ArrayView2<'_, f64>,
    labels: &[ClassId],
    centroids: &[ClassStats],
    temperature: f64,
    config: &TrainConfig,
) -> Result<()> {
    let usable: Vec<&ClassStats> = centroids.iter().filter(|c| c.is_usable()).collect();
    let distances: Vec<Vec<f64>> = (0..labels.len())
        .map(|i| {
            usable
                .iter()
                .map(|c| sq_dist(features.row(i), c.centroid.view()) / temperature)
                .collect()
        })
        .collect();
    let position = |id: ClassId| usable.iter().position(|c| c.class_id == id);

    // Classes seen for the first time start at their mean in-batch distance.
    let single = &mut model.rejection.single_stage;
    let mut fresh: BTreeMap<ClassId, (f64, usize)> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if !single.contains_key(&l) {
            let p = position(l).ok_or(OwrError::UnknownClass(l))?;
            let e = fresh.entry(l).or_insert((0.0, 0));
            e.0 += distances[i][p];
            e.1 += 1;
        }
    }
    for (c, (sum, n)) in fresh {
        single.insert(c, sum / n as f64);
    }
    let mut thresholds: Vec<f64> = usable
        .iter()
        .map(|c| single.get(&c.class_id).copied().unwrap_or(0.0))
        .collect();
    for (i, &l) in labels.iter().enumerate() {
        let p = position(l).ok_or(OwrError::UnknownClass(l))?;
        let out = md_loss(&distances[i], p, &thresholds)?;
        for (t, g) in thresholds
            .iter_mut()
            .zip(out.threshold_grads.expect("md_loss"))
        {
            *t = (*t - config.threshold_lr * g).max(0.0);
        }
    }
    for (c, t) in usable.iter().zip(thresholds) {
        single.insert(c.class_id, t);
    }

    for (i, &l) in labels.iter().enumerate() {
        let pred = deepnno_predict(features.row(i), centroids, model.rejection.heuristic.tau)?;
        model
            .rejection
            .heuristic
            .update(Outcome::of(pred.label, Some(l)));
    }
    Ok(())
}

/// Rebalances quotas over the known classes and selects exemplars of the
/// step's classes with the current extractor.
fn update_memory(
    model: &mut OwrModel,
    step_classes: &BTreeSet<ClassId>,
    inputs: ArrayView2<'_, f64>,
    labels: &[ClassId],
    config: &TrainConfig,
    t: usize,
) -> Result<()> {
    let quotas = rebalance(model.memory.budget, &model.known_classes());
    model.memory.truncate_to(&quotas);
    let mut rng = stream_rng(config.seed, STREAM_SELECT + t as u64);
    for &c in step_classes {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if rows.is_empty() {
            continue;
        }
        let class_inputs = inputs.select(Axis(0), &rows);
        let quota = quotas[&c];
        let picks = match config.selection {
            SelectionRule::Herding => {
                let f = model.extractor.features(class_inputs.view())?;
                let mean = f.mean_axis(Axis(0)).expect("non-empty");
                herd_select(f.view(), mean.view(), quota)
            }
            SelectionRule::Random => random_select(rows.len(), quota, &mut rng),
        };
        model.memory.set_class(
            c,
            picks
                .iter()
                .map(|&i| class_inputs.row(i).to_vec())
                .collect(),
        );
    }
    Ok(())
}

/// Held-out samples for threshold fitting as (class position, distances to
/// every known class). Classes without held-out exemplars fall back to their
/// rehearsal exemplars.
type ThresholdSamples = (Vec<(usize, Vec<f64>)>, Vec<ClassId>);

fn threshold_samples(model: &OwrModel, config: &TrainConfig, t: usize) -> Result<ThresholdSamples> {
    let known = model.known_classes();
    let mut which = model.memory.indices(Partition::Heldout);
    let mut fallbacks = Vec::new();
    for &c in &known {
        if !which.iter().any(|w| w.0 == c) {
            let rehearsal: Vec<(ClassId, usize)> =
                (0..model.memory.class(c).len()).map(|i| (c, i)).collect();
            if !rehearsal.is_empty() {
                warn!("class {c}: no held-out exemplars, fitting its threshold on rehearsal exemplars");
                fallbacks.push(c);
                which.extend(rehearsal);
            }
        }
    }
    let (inputs, labels) = model
        .memory
        .gather(&which, model.extractor.config().input_dim);
    let mut features = model.features(inputs.view())?;
    if config.heldout_jitter > 0.0 {
        let noise = Normal::new(0.0, config.heldout_jitter).expect("positive sd");
        let mut rng = stream_rng(config.seed ^ 0x6a69_7474_6572, t as u64);
        features.mapv_inplace(|v| v + noise.sample(&mut rng));
    }
    let temperature = model.variance.current();
    let samples = labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let pos = known
                .iter()
                .position(|k| k == l)
                .expect("memory holds known classes");
            let d = known
                .iter()
                .map(|k| sq_dist(features.row(i), model.classes[k].centroid.view()) / temperature)
                .collect();
            (pos, d)
        })
        .collect();
    Ok((samples, fallbacks))
}

/// Subgradient descent on the hinge objective with respect to the thresholds
/// only: `delta_k <- max(0, delta_k - lr * g_k)` per sample. With `shared`
/// a single threshold receives the summed subgradient of every class.
pub fn fit_thresholds(
    samples: &[(usize, Vec<f64>)],
    initial: Vec<f64>,
    learning_rate: f64,
    epochs: usize,
    shared: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut thresholds = initial;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for &i in &order {
            let (label, distances) = &samples[i];
            if shared {
                let expanded = vec![thresholds[0]; distances.len()];
                let out = md_loss(distances, *label, &expanded)?;
                let g: f64 = out.threshold_grads.expect("md_loss").iter().sum();
                thresholds[0] = (thresholds[0] - learning_rate * g).max(0.0);
            } else {
                let out = md_loss(distances, *label, &thresholds)?;
                for (t, g) in thresholds
                    .iter_mut()
                    .zip(out.threshold_grads.expect("md_loss"))
                {
                    *t = (*t - learning_rate * g).max(0.0);
                }
            }
        }
    }
    Ok(thresholds)
}

/// Stage two: fits the class-specific and global distances and NNO's `tau`
/// on held-out exemplars. Extractor, centroids and variance are not touched.
pub fn stage2_learn_thresholds(
    model: &mut OwrModel,
    config: &TrainConfig,
    t: usize,
) -> Result<Vec<ClassId>> {
    let (samples, fallbacks) = threshold_samples(model, config, t)?;
    let known = model.known_classes();
    if samples.is_empty() {
        warn!("no exemplars available for threshold learning at step {t}");
        return Ok(fallbacks);
    }

    // Start every class at the mean distance of its own samples.
    let mut sums = vec![(0.0, 0usize); known.len()];
    for (pos, d) in &samples {
        sums[*pos].0 += d[*pos];
        sums[*pos].1 += 1;
    }
    let initial: Vec<f64> = sums
        .iter()
        .map(|&(s, n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    let global_initial = {
        let (s, n) = sums.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        s / n as f64
    };

    let mut rng = stream_rng(config.seed, STREAM_STAGE2 + t as u64);
    let specific = fit_thresholds(
        &samples,
        initial,
        config.threshold_lr,
        config.threshold_epochs,
        false,
        &mut rng,
    )?;
    let global = fit_thresholds(
        &samples,
        vec![global_initial],
        config.threshold_lr,
        config.threshold_epochs,
        true,
        &mut rng,
    )?;
    for (c, delta) in known.iter().zip(specific) {
        model.classes.get_mut(c).expect("known").threshold = delta;
    }
    model.rejection.global_threshold = global[0];

    // NNO: quantile of in-class distances in the score's own units.
    let temperature = model.variance.current();
    let mut own: Vec<f64> = samples
        .iter()
        .map(|(pos, d)| {
            let sq = d[*pos] * temperature;
            match model.method.nno_distance {
                NnoDistance::Euclidean => sq.sqrt(),
                NnoDistance::Squared => sq,
            }
        })
        .collect();
    own.sort_by(f64::total_cmp);
    let q = model.method.nno_quantile.clamp(0.0, 1.0);
    let idx = ((own.len() - 1) as f64 * q).round() as usize;
    model.rejection.nno_tau = own[idx].max(1e-12);
    Ok(fallbacks)
}

/// Median of `||f_new(x) - f_old(x)||` over the given inputs.
pub fn median_drift(
    old: &FrozenExtractor,
    new: &Extractor,
    inputs: ArrayView2<'_, f64>,
) -> Result<f64> {
    if inputs.nrows() == 0 {
        return Err(OwrError::Empty("drift inputs"));
    }
    let a = old.features(inputs)?;
    let b = new.features(inputs)?;
    let mut d: Vec<f64> = (0..inputs.nrows())
        .map(|i| sq_dist(a.row(i), b.row(i)).sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    let n = d.len();
    Ok(if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    })
}
