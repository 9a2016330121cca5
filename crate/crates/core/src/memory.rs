//! Fixed-budget exemplar memory: per-class quotas, herding selection, the
//! rehearsal / held-out split and mixed batch composition.

use std::collections::BTreeMap;

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OwrError, Result};
use crate::metric_stats::{sq_dist, ClassId};

pub const DEFAULT_BUDGET: usize = 2000;
pub const DEFAULT_HELDOUT_FRACTION: f64 = 0.2;
pub const DEFAULT_MEMORY_FRACTION: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Rehearsal,
    Heldout,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    #[default]
    Herding,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub input: Vec<f64>,
    pub partition: Partition,
}

/// Exemplars per class, each list kept in selection order so truncation keeps
/// the most representative prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarMemory {
    pub budget: usize,
    pub heldout_fraction: f64,
    classes: BTreeMap<ClassId, Vec<Exemplar>>,
}

impl ExemplarMemory {
    pub fn new(budget: usize, heldout_fraction: f64) -> Result<Self> {
        if budget == 0 {
            return Err(OwrError::InvalidConfig(
                "memory budget must be positive".into(),
            ));
        }
        if !(heldout_fraction > 0.0 && heldout_fraction < 1.0) {
            return Err(OwrError::InvalidConfig(format!(
                "held-out fraction {heldout_fraction} not in (0, 1)"
            )));
        }
        Ok(ExemplarMemory {
            budget,
            heldout_fraction,
            classes: BTreeMap::new(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.classes.values().all(Vec::is_empty)
    }

    pub fn total_stored(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn classes(&self) -> impl Iterator<Item = (ClassId, &[Exemplar])> {
        self.classes.iter().map(|(c, v)| (*c, v.as_slice()))
    }

    pub fn class(&self, class: ClassId) -> &[Exemplar] {
        self.classes.get(&class).map_or(&[], Vec::as_slice)
    }

    /// Replaces a class's exemplars; `inputs` must be in selection order.
    /// New exemplars start in the rehearsal partition.
    pub fn set_class(&mut self, class: ClassId, inputs: Vec<Vec<f64>>) {
        self.classes.insert(
            class,
            inputs
                .into_iter()
                .map(|input| Exemplar {
                    input,
                    partition: Partition::Rehearsal,
                })
                .collect(),
        );
    }

    /// Truncates every stored class to its quota, keeping the selection-order prefix.
    pub fn truncate_to(&mut self, quotas: &BTreeMap<ClassId, usize>) {
        for (class, list) in self.classes.iter_mut() {
            list.truncate(quotas.get(class).copied().unwrap_or(0));
        }
        self.classes.retain(|_, v| !v.is_empty());
    }

    /// Assigns `round(heldout_fraction * n)` exemplars of each class to the
    /// held-out partition. Each exemplar position gets a seeded random key and
    /// the smallest keys are held out, so the assignment of a selection-order
    /// prefix does not change when a class is later truncated. Returns the
    /// classes that ended up with no held-out exemplar.
    pub fn split_train_heldout(&mut self, seed: u64) -> Vec<ClassId> {
        let mut without = Vec::new();
        for (class, list) in self.classes.iter_mut() {
            let n = list.len();
            let n_heldout = heldout_count(self.heldout_fraction, n);
            let mut rng = class_rng(seed, *class);
            let mut order: Vec<(u64, usize)> = (0..n).map(|i| (rng.random::<u64>(), i)).collect();
            order.sort_unstable();
            for (rank, &(_, i)) in order.iter().enumerate() {
                list[i].partition = if rank < n_heldout {
                    Partition::Heldout
                } else {
                    Partition::Rehearsal
                };
            }
            if n_heldout == 0 {
                warn!("class {class} has {n} exemplars and no held-out sample");
                without.push(*class);
            }
        }
        without
    }

    /// Every exemplar of the given partition as (class, index within class).
    pub fn indices(&self, partition: Partition) -> Vec<(ClassId, usize)> {
        self.classes
            .iter()
            .flat_map(|(c, list)| {
                list.iter()
                    .enumerate()
                    .filter(move |(_, e)| e.partition == partition)
                    .map(move |(i, _)| (*c, i))
            })
            .collect()
    }

    pub fn input(&self, class: ClassId, index: usize) -> &[f64] {
        &self.classes[&class][index].input
    }

    /// Stacks the inputs of the given exemplars into a matrix with labels.
    pub fn gather(
        &self,
        which: &[(ClassId, usize)],
        input_dim: usize,
    ) -> (Array2<f64>, Vec<ClassId>) {
        let mut inputs = Array2::zeros((which.len(), input_dim));
        for (row, &(c, i)) in which.iter().enumerate() {
            inputs
                .row_mut(row)
                .assign(&ArrayView1::from(self.input(c, i)));
        }
        (inputs, which.iter().map(|w| w.0).collect())
    }
}

fn class_rng(seed: u64, class: ClassId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(class.0) + 1);
    rng
}

/// Round-half-up share of held-out exemplars.
pub fn heldout_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 0.5).floor() as usize
}

/// `floor(budget / |K|)` per class, the remainder going one each to the
/// lowest class ids.
pub fn rebalance(budget: usize, known_classes: &[ClassId]) -> BTreeMap<ClassId, usize> {
    let mut sorted = known_classes.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.is_empty() {
        return BTreeMap::new();
    }
    let base = budget / sorted.len();
    let surplus = budget % sorted.len();
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, base + usize::from(i < surplus)))
        .collect()
}

/// Greedy herding: repeatedly adds the sample that keeps the mean of the
/// selected features closest to `class_mean`. Returns row indices in
/// selection order; ties go to the lowest index.
pub fn herd_select(
    features: ArrayView2<'_, f64>,
    class_mean: ArrayView1<'_, f64>,
    quota: usize,
) -> Vec<usize> {
    let n = features.nrows();
    let take = quota.min(n);
    let mut chosen = Vec::with_capacity(take);
    let mut taken = vec![false; n];
    let mut running_sum = Array1::<f64>::zeros(features.ncols());
    for k in 0..take {
        let scale = 1.0 / (k + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            let candidate = (&running_sum + &features.row(i)) * scale;
            let d = sq_dist(candidate.view(), class_mean);
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("k < n");
        taken[i] = true;
        running_sum += &features.row(i);
        chosen.push(i);
    }
    chosen
}

/// Uniformly random selection order, the ablation alternative to herding.
pub fn random_select(n: usize, quota: usize, rng: &mut impl Rng) -> Vec<usize> {
    index::sample(rng, n, quota.min(n)).into_vec()
}

/// Number of memory samples in a batch: `round(fraction * batch_size)`, or 0
/// while the rehearsal partition is empty.
pub fn memory_draw_count(
    batch_size: usize,
    memory_fraction: f64,
    memory_available: bool,
) -> Result<usize> {
    if batch_size < 1 {
        return Err(OwrError::InvalidConfig(
            "batch size must be at least 1".into(),
        ));
    }
    if !(0.0..1.0).contains(&memory_fraction) {
        return Err(OwrError::InvalidConfig(format!(
            "memory fraction {memory_fraction} not in [0, 1)"
        )));
    }
    if !memory_available {
        return Ok(0);
    }
    Ok(((memory_fraction * batch_size as f64).round() as usize).min(batch_size - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleSource {
    Current(usize),
    Memory { class: ClassId, index: usize },
}

#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub inputs: Array2<f64>,
    pub labels: Vec<ClassId>,
    pub sources: Vec<SampleSource>,
}

/// Mixes the given rows of the current step's data with `n_memory` uniform
/// draws from the rehearsal partition, then shuffles. Held-out exemplars are
/// never drawn.
pub fn compose_batch(
    current_inputs: ArrayView2<'_, f64>,
    current_labels: &[ClassId],
    current_rows: &[usize],
    memory: &ExemplarMemory,
    n_memory: usize,
    rng: &mut impl Rng,
) -> TrainingBatch {
    let mut sources: Vec<SampleSource> = current_rows
        .iter()
        .map(|&r| SampleSource::Current(r))
        .collect();
    let pool = memory.indices(Partition::Rehearsal);
    if !pool.is_empty() && n_memory > 0 {
        let picks: Vec<usize> = if pool.len() >= n_memory {
            index::sample(rng, pool.len(), n_memory).into_vec()
        } else {
            (0..n_memory)
                .map(|_| rng.random_range(0..pool.len()))
                .collect()
        };
        sources.extend(picks.into_iter().map(|p| SampleSource::Memory {
            class: pool[p].0,
            index: pool[p].1,
        }));
    }
    sources.shuffle(rng);

    let dim = current_inputs.ncols();
    let mut inputs = Array2::zeros((sources.len(), dim));
    let mut labels = Vec::with_capacity(sources.len());
    for (row, src) in sources.iter().enumerate() {
        match *src {
            SampleSource::Current(r) => {
                inputs.row_mut(row).assign(&current_inputs.row(r));
                labels.push(current_labels[r]);
            }
            SampleSource::Memory { class, index } => {
                inputs
                    .row_mut(row)
                    .assign(&ArrayView1::from(memory.input(class, index)));
                labels.push(class);
            }
        }
    }
    TrainingBatch {
        inputs,
        labels,
        sources,
    }
}
