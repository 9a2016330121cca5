//! Synthetic benchmarks, CSV feature ingestion and episode schedules.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{OwrError, Result};
use crate::metric_stats::{sq_dist, ClassId};
use crate::protocol::EpisodeSchedule;

/// Share of each class's samples reserved for testing.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    GaussianBlobs,
    /// Each class is a thin annulus around its center; radii differ per class.
    Rings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Per-class isotropic variance is drawn uniformly from this range.
    pub variance_range: (f64, f64),
    /// Minimum distance between class centers.
    pub spacing: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (low, high) = self.variance_range;
        let bad = |m: &str| Err(OwrError::InvalidConfig(m.to_string()));
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.dim == 0 || self.samples_per_class == 0 {
            return bad("dim and samples_per_class must be positive");
        }
        if !(low > 0.0 && low <= high && high.is_finite()) {
            return bad("variance_range must satisfy 0 < low <= high");
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return bad("spacing must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Generation parameters that produced a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMeta {
    pub centers: Array2<f64>,
    pub variances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<ClassId>,
    pub splits: Vec<Split>,
    /// Sorted list of every class id present.
    pub catalog: Vec<ClassId>,
    pub meta: Option<SyntheticMeta>,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows of the given split whose label is in `classes`.
    pub fn rows(&self, split: Split, classes: &BTreeSet<ClassId>) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.splits[i] == split && classes.contains(&self.labels[i]))
            .collect()
    }

    pub fn select(&self, rows: &[usize]) -> (Array2<f64>, Vec<ClassId>) {
        let inputs = self.inputs.select(ndarray::Axis(0), rows);
        (inputs, rows.iter().map(|&r| self.labels[r]).collect())
    }

    pub fn subset(&self, split: Split, classes: &BTreeSet<ClassId>) -> (Array2<f64>, Vec<ClassId>) {
        self.select(&self.rows(split, classes))
    }
}

fn class_centers(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (k, d) = (spec.n_classes, spec.dim);
    if k <= d {
        // Scaled standard simplex: every pair exactly `spacing` apart.
        let mut c = Array2::zeros((k, d));
        for i in 0..k {
            c[[i, i]] = spec.spacing / std::f64::consts::SQRT_2;
        }
        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(rng);
        return c.select(ndarray::Axis(1), &order);
    }
    // More classes than dimensions: rejection-sample a packing with minimum
    // pairwise distance `spacing`, growing the box when it gets crowded.
    let mut side = spec.spacing * (k as f64).powf(1.0 / d as f64) * 2.0;
    let mut centers: Vec<Array1<f64>> = Vec::with_capacity(k);
    let mut failures = 0;
    while centers.len() < k {
        let p = Array1::from_shape_fn(d, |_| rng.random_range(0.0..side));
        if centers
            .iter()
            .all(|c| sq_dist(c.view(), p.view()) >= spec.spacing * spec.spacing)
        {
            centers.push(p);
            failures = 0;
        } else {
            failures += 1;
            if failures > 1000 {
                side *= 1.1;
                failures = 0;
            }
        }
    }
    let mut c = Array2::zeros((k, d));
    for (i, p) in centers.iter().enumerate() {
        c.row_mut(i).assign(p);
    }
    c
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = class_centers(spec, &mut rng);
    let (low, high) = spec.variance_range;
    let variances: Vec<f64> = (0..spec.n_classes)
        .map(|_| {
            if low == high {
                low
            } else {
                rng.random_range(low..=high)
            }
        })
        .collect();

    let n = spec.n_classes * spec.samples_per_class;
    let mut inputs = Array2::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    let n_test = ((spec.samples_per_class as f64 * TEST_FRACTION) + 0.5).floor() as usize;
    for (c, &var) in variances.iter().enumerate() {
        let sd = var.sqrt();
        let radius = (var * spec.dim as f64).sqrt();
        let radial = Normal::new(radius, 0.1 * radius).expect("positive sd");
        let mut is_test: Vec<bool> = (0..spec.samples_per_class).map(|i| i < n_test).collect();
        is_test.shuffle(&mut rng);
        for (s, test) in is_test.into_iter().enumerate() {
            let row = c * spec.samples_per_class + s;
            let offset: Array1<f64> = match spec.generator {
                Generator::GaussianBlobs => {
                    Array1::from_shape_fn(spec.dim, |_| sd * rng.sample::<f64, _>(StandardNormal))
                }
                Generator::Rings => {
                    let dir =
                        Array1::from_shape_fn(spec.dim, |_| rng.sample::<f64, _>(StandardNormal));
                    let norm = dir.dot(&dir).sqrt().max(1e-12);
                    dir * (radial.sample(&mut rng) / norm)
                }
            };
            inputs.row_mut(row).assign(&(&centers.row(c) + &offset));
            labels.push(ClassId(c as u32));
            splits.push(if test { Split::Test } else { Split::Train });
        }
    }
    Ok(Dataset {
        inputs,
        labels,
        splits,
        catalog: (0..spec.n_classes as u32).map(ClassId).collect(),
        meta: Some(SyntheticMeta { centers, variances }),
    })
}

/// Column layout of a feature CSV: `label,<f0>,<f1>,...` by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    #[serde(default = "default_true")]
    pub has_header: bool,
    #[serde(default)]
    pub label_column: usize,
    /// Column holding `train`/`test`; when absent each class is split 80/20
    /// with `split_seed`.
    #[serde(default)]
    pub split_column: Option<usize>,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_true() -> bool {
    true
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            has_header: true,
            label_column: 0,
            split_column: None,
            split_seed: 0,
        }
    }
}

pub fn load_feature_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| OwrError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let parse_err = |line: u64, message: String| OwrError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut width: Option<usize> = None;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    let mut header_seen = !schema.has_header;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if !header_seen {
            header_seen = true;
            if record.len() < 2 || record.iter().any(|h| h.trim().is_empty()) {
                return Err(parse_err(line, "malformed header".into()));
            }
            width = Some(record.len());
            continue;
        }
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(parse_err(
                line,
                format!("expected {expected} columns, found {}", record.len()),
            ));
        }
        for required in [Some(schema.label_column), schema.split_column]
            .into_iter()
            .flatten()
        {
            if required >= expected {
                return Err(parse_err(line, format!("column {required} out of range")));
            }
        }
        for (col, field) in record.iter().enumerate() {
            let field = field.trim();
            if col == schema.label_column {
                let label: u32 = field
                    .parse()
                    .map_err(|_| parse_err(line, format!("invalid label {field:?}")))?;
                labels.push(ClassId(label));
            } else if Some(col) == schema.split_column {
                splits.push(match field.to_ascii_lowercase().as_str() {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    other => return Err(parse_err(line, format!("invalid split {other:?}"))),
                });
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    parse_err(line, format!("non-numeric value {field:?} in column {col}"))
                })?;
                if !v.is_finite() {
                    return Err(parse_err(
                        line,
                        format!("non-finite value {field:?} in column {col}"),
                    ));
                }
                values.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(parse_err(0, "no data rows".into()));
    }
    let dim = values.len() / labels.len();
    if dim == 0 {
        return Err(parse_err(0, "no feature columns".into()));
    }
    let inputs = Array2::from_shape_vec((labels.len(), dim), values).expect("rectangular");
    let catalog: Vec<ClassId> = labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if schema.split_column.is_none() {
        splits = seeded_split(&labels, &catalog, schema.split_seed);
    }
    Ok(Dataset {
        inputs,
        labels,
        splits,
        catalog,
        meta: None,
    })
}

fn seeded_split(labels: &[ClassId], catalog: &[ClassId], seed: u64) -> Vec<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = vec![Split::Train; labels.len()];
    for &c in catalog {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rows.shuffle(&mut rng);
        let n_test = ((rows.len() as f64 * TEST_FRACTION) + 0.5).floor() as usize;
        for &r in &rows[..n_test] {
            splits[r] = Split::Test;
        }
    }
    splits
}

/// Writes `label,f0,...,split` with a header row.
pub fn write_feature_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| OwrError::io(path, e.into()))?;
    let to_io = |e: csv::Error| OwrError::io(path, e.into());
    let mut header = vec!["label".to_string()];
    header.extend((0..data.input_dim()).map(|j| format!("f{j}")));
    header.push("split".into());
    w.write_record(&header).map_err(to_io)?;
    for i in 0..data.labels.len() {
        let mut row = vec![data.labels[i].to_string()];
        row.extend(data.inputs.row(i).iter().map(|v| format!("{v:?}")));
        row.push(match data.splits[i] {
            Split::Train => "train".into(),
            Split::Test => "test".into(),
        });
        w.write_record(&row).map_err(to_io)?;
    }
    w.flush().map_err(|e| OwrError::io(path, e))
}

/// Seeded class permutation: the first `n_known` classes form the known pool
/// (`initial_classes` first, then groups of `step_size`); the rest are unknown.
pub fn make_schedule(
    catalog: &[ClassId],
    n_known: usize,
    initial_classes: usize,
    step_size: usize,
    order_seed: u64,
) -> Result<EpisodeSchedule> {
    let total = catalog.len();
    let bad = |m: String| Err(OwrError::InvalidSchedule(m));
    if n_known + 1 > total {
        return bad(format!(
            "{n_known} known classes leave no unknown class among {total}"
        ));
    }
    if initial_classes == 0 || initial_classes > n_known {
        return bad(format!(
            "initial classes {initial_classes} must be in 1..={n_known}"
        ));
    }
    if n_known > initial_classes
        && (step_size == 0 || !(n_known - initial_classes).is_multiple_of(step_size))
    {
        return bad(format!(
            "{} incremental classes are not divisible into steps of {step_size}",
            n_known - initial_classes
        ));
    }
    let mut order = catalog.to_vec();
    order.sort();
    order.dedup();
    if order.len() != total {
        return bad("class catalog contains duplicates".into());
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));
    let mut class_sets = vec![sorted(&order[..initial_classes])];
    let mut start = initial_classes;
    while start < n_known {
        class_sets.push(sorted(&order[start..start + step_size]));
        start += step_size;
    }
    EpisodeSchedule::new(class_sets, sorted(&order[n_known..]), order_seed)
}

fn sorted(ids: &[ClassId]) -> Vec<ClassId> {
    let mut v = ids.to_vec();
    v.sort();
    v
}
