//! Distances in the feature space, online class centroids and the pooled
//! feature variance that serves as temperature for every distance-based score.

use std::fmt;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{OwrError, Result};

/// Floor applied to any variance before it is used as a divisor.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-class centroid, number of absorbed samples and learned maximal distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class_id: ClassId,
    pub centroid: Array1<f64>,
    pub count: u64,
    /// Maximal normalized squared distance for acceptance.
    pub threshold: f64,
}

impl ClassStats {
    pub fn new(class_id: ClassId, dim: usize) -> Self {
        ClassStats {
            class_id,
            centroid: Array1::zeros(dim),
            count: 0,
            threshold: 0.0,
        }
    }

    /// A class with no absorbed samples has no meaningful centroid.
    pub fn is_usable(&self) -> bool {
        self.count > 0
    }

    /// Folds a batch of features of this class into the running mean.
    ///
    /// The result is the exact mean of every feature absorbed so far, so
    /// streaming one sample at a time and absorbing the batch at once agree.
    pub fn absorb(&mut self, features: ArrayView2<'_, f64>) -> Result<()> {
        let n = features.nrows();
        if n == 0 {
            return Ok(());
        }
        check_dim(self.centroid.len(), features.ncols())?;
        check_finite(features.iter(), "centroid update batch")?;
        let total = self.count + n as u64;
        let sum = features.sum_axis(ndarray::Axis(0));
        let old_weight = self.count as f64 / total as f64;
        let inv_total = 1.0 / total as f64;
        self.centroid
            .zip_mut_with(&sum, |mu, &s| *mu = *mu * old_weight + s * inv_total);
        self.count = total;
        Ok(())
    }
}

/// Functional form of [`ClassStats::absorb`].
pub fn update_centroid(stats: &ClassStats, features: ArrayView2<'_, f64>) -> Result<ClassStats> {
    let mut next = stats.clone();
    next.absorb(features)?;
    Ok(next)
}

/// Online estimate of the variance of all feature components seen so far,
/// pooled into a single scalar (population convention).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningVariance {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Default for RunningVariance {
    fn default() -> Self {
        Self::new()
    }
}

impl RunningVariance {
    pub fn new() -> Self {
        RunningVariance {
            count: 0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    /// State equivalent to having observed the two components `±sqrt(value)`,
    /// whose population variance is exactly `value`.
    pub fn with_value(value: f64) -> Result<Self> {
        if !value.is_finite() || value <= 0.0 {
            return Err(OwrError::InvalidConfig(format!(
                "variance must be positive and finite, got {value}"
            )));
        }
        Ok(RunningVariance {
            count: 2,
            mean: 0.0,
            m2: 2.0 * value,
        })
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Current variance, floored at [`VARIANCE_FLOOR`]. Before any data has
    /// been seen the temperature is 1.
    pub fn current(&self) -> f64 {
        if self.count == 0 {
            1.0
        } else {
            (self.m2 / self.count as f64).max(VARIANCE_FLOOR)
        }
    }

    /// Merges a batch into the pooled estimate (Chan et al. pairwise combination).
    pub fn update(&mut self, batch: ArrayView2<'_, f64>) -> Result<()> {
        let (n_b, mean_b, m2_b) = pooled_moments(batch)?;
        let n_a = self.count as f64;
        let n = n_a + n_b;
        let delta = mean_b - self.mean;
        self.mean += delta * n_b / n;
        self.m2 += m2_b + delta * delta * n_a * n_b / n;
        self.count += n_b as u64;
        Ok(())
    }
}

/// Functional form of [`RunningVariance::update`].
pub fn update_global_variance(
    var: &RunningVariance,
    batch: ArrayView2<'_, f64>,
) -> Result<RunningVariance> {
    let mut next = var.clone();
    next.update(batch)?;
    Ok(next)
}

/// Pooled population variance of every component in the batch, floored.
pub fn batch_variance(batch: ArrayView2<'_, f64>) -> Result<f64> {
    let (n, _, m2) = pooled_moments(batch)?;
    Ok((m2 / n).max(VARIANCE_FLOOR))
}

fn pooled_moments(batch: ArrayView2<'_, f64>) -> Result<(f64, f64, f64)> {
    if batch.nrows() == 0 || batch.ncols() == 0 {
        return Err(OwrError::Empty("variance batch"));
    }
    check_finite(batch.iter(), "variance batch")?;
    let n = batch.len() as f64;
    let mean = batch.sum() / n;
    let m2 = batch.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>();
    Ok((n, mean, m2))
}

pub fn squared_euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(sq_dist(a, b))
}

/// Squared distance divided by the current pooled variance.
pub fn normalized_distance(
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    var: &RunningVariance,
) -> Result<f64> {
    check_finite(a.iter().chain(b.iter()), "normalized distance input")?;
    Ok(squared_euclidean(a, b)? / var.current())
}

/// Unchecked squared distance for hot loops where dimensions are already known to agree.
pub(crate) fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(OwrError::DimensionMismatch { expected, found });
    }
    Ok(())
}

pub(crate) fn check_finite<'a>(
    values: impl IntoIterator<Item = &'a f64>,
    what: &'static str,
) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(OwrError::NonFinite(what))
    }
}
