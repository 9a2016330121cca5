//! Training objectives and baseline scores. Every loss returns its value with
//! the analytic gradient; centroids and temperatures are constants
//! (no gradient flows into them).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{OwrError, Result};
use crate::metric_stats::{check_dim, sq_dist, ClassId, ClassStats};

/// Norms below this are treated as zero when differentiating `||x||`.
const NORM_EPS: f64 = 1e-12;
/// DeepNNO scores are clamped into `[CLAMP, 1 - CLAMP]` before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Gradient of `value` with respect to the features it was computed from.
    pub feature_grads: Array2<f64>,
    /// Subgradient with respect to the thresholds; only set by [`md_loss`].
    pub threshold_grads: Option<Vec<f64>>,
    /// Anchors whose term was dropped because no same-class peer was in the batch.
    pub skipped_anchors: usize,
}

impl LossOutput {
    fn new(value: f64, feature_grads: Array2<f64>) -> Self {
        LossOutput {
            value,
            feature_grads,
            threshold_grads: None,
            skipped_anchors: 0,
        }
    }
}

/// Weights of the combined objective. `global` scales the centroid term and
/// is 1 except in ablations that drop it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub global: f64,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "one")]
    pub gamma: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            global: 1.0,
            lambda: 1.0,
            gamma: 1.0,
        }
    }
}

/// Per-batch means of each component, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gc: f64,
    pub lc: f64,
    pub ds: f64,
    pub total: f64,
}

fn log_sum_exp(logits: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + logits.map(|l| (l - max).exp()).sum::<f64>().ln()
}

fn usable(centroids: &[ClassStats]) -> impl Iterator<Item = &ClassStats> + Clone {
    centroids.iter().filter(|c| c.is_usable())
}

/// Softmax over `-||f - mu_k||^2 / T` for every usable centroid.
pub fn class_scores(
    features: ArrayView1<'_, f64>,
    centroids: &[ClassStats],
    temperature: f64,
) -> Result<Vec<(ClassId, f64)>> {
    check_temperature(temperature)?;
    let mut logits = Vec::new();
    for c in usable(centroids) {
        check_dim(c.centroid.len(), features.len())?;
        logits.push((
            c.class_id,
            -sq_dist(features, c.centroid.view()) / temperature,
        ));
    }
    if logits.is_empty() {
        return Err(OwrError::NoUsableCentroids);
    }
    let lse = log_sum_exp(logits.iter().map(|l| l.1));
    Ok(logits
        .into_iter()
        .map(|(id, l)| (id, (l - lse).exp()))
        .collect())
}

/// Cross-entropy of the distance softmax over all known classes.
pub fn gc_loss(
    features: ArrayView1<'_, f64>,
    label: ClassId,
    centroids: &[ClassStats],
    temperature: f64,
) -> Result<LossOutput> {
    check_temperature(temperature)?;
    let mut logits = Vec::new();
    let mut label_logit = None;
    for c in usable(centroids) {
        check_dim(c.centroid.len(), features.len())?;
        let l = -sq_dist(features, c.centroid.view()) / temperature;
        if c.class_id == label {
            label_logit = Some(l);
        }
        logits.push(l);
    }
    if logits.is_empty() {
        return Err(OwrError::NoUsableCentroids);
    }
    let label_logit = label_logit.ok_or(OwrError::UnknownClass(label))?;
    let lse = log_sum_exp(logits.iter().copied());
    let value = (lse - label_logit).max(0.0);

    // dL/dlogit_k = p_k - y_k and dlogit_k/df = -2 (f - mu_k) / T
    let mut grad = Array1::zeros(features.len());
    for (c, l) in usable(centroids).zip(&logits) {
        let p = (l - lse).exp();
        let coeff = (p - if c.class_id == label { 1.0 } else { 0.0 }) * (-2.0 / temperature);
        grad.zip_mut_with(&(&features - &c.centroid), |g, d| *g += coeff * d);
    }
    Ok(LossOutput::new(value, grad.insert_axis(ndarray::Axis(0))))
}

/// Soft nearest neighbour loss of one anchor against the rest of the batch.
/// Gradients are returned for every row of the batch.
pub fn lc_loss(
    batch: ArrayView2<'_, f64>,
    labels: &[ClassId],
    anchor: usize,
    temperature: f64,
) -> Result<LossOutput> {
    check_temperature(temperature)?;
    let n = batch.nrows();
    if n < 2 {
        return Err(OwrError::Empty(
            "local clustering needs at least two samples",
        ));
    }
    if labels.len() != n {
        return Err(OwrError::DimensionMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    let mut out = LossOutput::new(0.0, Array2::zeros(batch.raw_dim()));
    let a = batch.row(anchor);
    let label = labels[anchor];
    let others: Vec<usize> = (0..n).filter(|&k| k != anchor).collect();
    if !others.iter().any(|&k| labels[k] == label) {
        out.skipped_anchors = 1;
        return Ok(out);
    }
    let logits: Vec<f64> = others
        .iter()
        .map(|&k| -sq_dist(a, batch.row(k)) / temperature)
        .collect();
    let same = |i: usize| labels[others[i]] == label;
    let lse_all = log_sum_exp(logits.iter().copied());
    let lse_same = log_sum_exp(
        logits
            .iter()
            .enumerate()
            .filter(|(i, _)| same(*i))
            .map(|(_, l)| *l),
    );
    out.value = (lse_all - lse_same).max(0.0);

    // dL/dd_k = (w_same_k [k same] - w_all_k) / T, with d_k = ||f_a - f_k||^2
    for (i, &k) in others.iter().enumerate() {
        let w_all = (logits[i] - lse_all).exp();
        let w_same = if same(i) {
            (logits[i] - lse_same).exp()
        } else {
            0.0
        };
        let coeff = 2.0 * (w_same - w_all) / temperature;
        if coeff == 0.0 {
            continue;
        }
        for j in 0..batch.ncols() {
            let diff = a[j] - batch[[k, j]];
            out.feature_grads[[anchor, j]] += coeff * diff;
            out.feature_grads[[k, j]] -= coeff * diff;
        }
    }
    Ok(out)
}

/// Euclidean (not squared) distance between current and previous-step features.
pub fn ds_loss(
    features: ArrayView1<'_, f64>,
    old_features: ArrayView1<'_, f64>,
) -> Result<LossOutput> {
    check_dim(features.len(), old_features.len())?;
    let diff = &features - &old_features;
    let norm = diff.dot(&diff).sqrt();
    let grad = if norm < NORM_EPS {
        Array1::zeros(diff.len())
    } else {
        diff / norm
    };
    Ok(LossOutput::new(norm, grad.insert_axis(ndarray::Axis(0))))
}

/// Batch objective: mean over samples of `global*gc + lambda*lc + gamma*ds`.
/// The distillation term is present only when `old_features` is given.
pub fn total_loss(
    features: ArrayView2<'_, f64>,
    labels: &[ClassId],
    centroids: &[ClassStats],
    temperature: f64,
    old_features: Option<ArrayView2<'_, f64>>,
    weights: &LossWeights,
) -> Result<(LossOutput, LossBreakdown)> {
    let n = features.nrows();
    if n == 0 {
        return Err(OwrError::Empty("training batch"));
    }
    if labels.len() != n {
        return Err(OwrError::DimensionMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    if let Some(old) = &old_features {
        if old.dim() != features.dim() {
            return Err(OwrError::DimensionMismatch {
                expected: features.ncols(),
                found: old.ncols(),
            });
        }
    }
    let mut grads = Array2::zeros(features.raw_dim());
    let mut parts = LossBreakdown::default();
    let mut skipped = 0;
    for i in 0..n {
        if weights.global != 0.0 {
            let gc = gc_loss(features.row(i), labels[i], centroids, temperature)?;
            parts.gc += gc.value;
            grads
                .row_mut(i)
                .scaled_add(weights.global, &gc.feature_grads.row(0));
        }
        if weights.lambda != 0.0 && n >= 2 {
            let lc = lc_loss(features, labels, i, temperature)?;
            parts.lc += lc.value;
            skipped += lc.skipped_anchors;
            grads.scaled_add(weights.lambda, &lc.feature_grads);
        }
        if let (Some(old), true) = (&old_features, weights.gamma != 0.0) {
            let ds = ds_loss(features.row(i), old.row(i))?;
            parts.ds += ds.value;
            grads
                .row_mut(i)
                .scaled_add(weights.gamma, &ds.feature_grads.row(0));
        }
    }
    let inv = 1.0 / n as f64;
    parts.gc *= inv;
    parts.lc *= inv;
    parts.ds *= inv;
    parts.total = weights.global * parts.gc + weights.lambda * parts.lc + weights.gamma * parts.ds;
    grads.mapv_inplace(|g| g * inv);
    if !parts.total.is_finite() {
        return Err(OwrError::NonFinite("total loss"));
    }
    let mut out = LossOutput::new(parts.total, grads);
    out.skipped_anchors = skipped;
    Ok((out, parts))
}

/// Hinge objective on the maximal distances of one sample.
///
/// `distances[k]` is the normalized distance to class position `k`,
/// `label` the position of the sample's own class. The own-class term grows
/// its threshold when the sample lies outside it; every other class's term
/// shrinks its threshold when the sample intrudes.
pub fn md_loss(distances: &[f64], label: usize, thresholds: &[f64]) -> Result<LossOutput> {
    check_dim(distances.len(), thresholds.len())?;
    if label >= distances.len() {
        return Err(OwrError::Empty("label position outside the known classes"));
    }
    if let Some((index, &value)) = thresholds.iter().enumerate().find(|(_, t)| **t < 0.0) {
        return Err(OwrError::NegativeThreshold { index, value });
    }
    let mut value = 0.0;
    let mut grads = vec![0.0; thresholds.len()];
    for (k, (&d, &delta)) in distances.iter().zip(thresholds).enumerate() {
        if k == label {
            if d > delta {
                value += d - delta;
                grads[k] = -1.0;
            }
        } else if delta > d {
            value += delta - d;
            grads[k] = 1.0;
        }
    }
    Ok(LossOutput {
        value,
        feature_grads: Array2::zeros((0, 0)),
        threshold_grads: Some(grads),
        skipped_anchors: 0,
    })
}

/// Which distance the NNO score compares against `tau`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NnoDistance {
    #[default]
    Euclidean,
    Squared,
}

/// Linear NNO score `z * (1 - d / tau)`; non-positive means outlier.
pub fn nno_score(
    features: ArrayView1<'_, f64>,
    centroid: ArrayView1<'_, f64>,
    tau: f64,
    z: f64,
    kind: NnoDistance,
) -> Result<f64> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(OwrError::InvalidConfig(format!(
            "NNO tau must be positive, got {tau}"
        )));
    }
    check_dim(features.len(), centroid.len())?;
    let sq = sq_dist(features, centroid);
    let d = match kind {
        NnoDistance::Euclidean => sq.sqrt(),
        NnoDistance::Squared => sq,
    };
    Ok(z * (1.0 - d / tau))
}

/// DeepNNO class score `exp(-||f - mu||^2 / 2)`.
pub fn deepnno_score(features: ArrayView1<'_, f64>, centroid: ArrayView1<'_, f64>) -> f64 {
    (-0.5 * sq_dist(features, centroid)).exp()
}

/// One-vs-rest binary cross-entropy on DeepNNO scores, as a non-negative loss.
pub fn deepnno_bce(
    features: ArrayView1<'_, f64>,
    label: ClassId,
    centroids: &[ClassStats],
) -> Result<LossOutput> {
    if !usable(centroids).any(|c| c.class_id == label) {
        return Err(OwrError::UnknownClass(label));
    }
    let mut value = 0.0;
    let mut grad = Array1::zeros(features.len());
    for c in usable(centroids) {
        check_dim(c.centroid.len(), features.len())?;
        let s = deepnno_score(features, c.centroid.view());
        let clamped = s.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let positive = c.class_id == label;
        value -= if positive {
            clamped.ln()
        } else {
            (1.0 - clamped).ln()
        };
        if clamped != s {
            continue;
        }
        // dL/ds times ds/df = -s (f - mu)
        let dl_ds = if positive { -1.0 / s } else { 1.0 / (1.0 - s) };
        let coeff = -dl_ds * s;
        grad.zip_mut_with(&(&features - &c.centroid), |g, d| *g += coeff * d);
    }
    Ok(LossOutput::new(value, grad.insert_axis(ndarray::Axis(0))))
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(OwrError::InvalidConfig(format!(
            "temperature must be positive, got {t}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn stats(id: u32, mu: &[f64]) -> ClassStats {
        ClassStats {
            class_id: ClassId(id),
            centroid: Array1::from(mu.to_vec()),
            count: 1,
            threshold: 0.0,
        }
    }

    #[test]
    fn class_scores_symmetric_and_single() {
        let cs = [
            stats(0, &[1.0, 0.0]),
            stats(1, &[0.0, 1.0]),
            stats(2, &[-1.0, 0.0]),
        ];
        let s = class_scores(array![0.0, 0.0].view(), &cs, 0.7).unwrap();
        for (_, p) in &s {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = class_scores(array![5.0, 5.0].view(), &cs[..1], 1.0).unwrap();
        assert_eq!(s[0].1, 1.0);
    }

    #[test]
    fn class_scores_two_class_fixture() {
        // d = [1, 4], T = 1
        let cs = [stats(0, &[1.0]), stats(1, &[2.0])];
        let s = class_scores(array![0.0].view(), &cs, 1.0).unwrap();
        let e = (-3.0f64).exp();
        assert!((s[0].1 - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((s[1].1 - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn class_scores_need_a_usable_centroid() {
        let mut c = stats(0, &[1.0]);
        c.count = 0;
        assert!(matches!(
            class_scores(array![0.0].view(), &[c], 1.0),
            Err(OwrError::NoUsableCentroids)
        ));
    }

    #[test]
    fn gc_single_class_is_zero_and_unknown_label_errors() {
        let cs = [stats(4, &[1.0, 2.0])];
        assert_eq!(
            gc_loss(array![0.0, 0.0].view(), ClassId(4), &cs, 1.0)
                .unwrap()
                .value,
            0.0
        );
        assert!(gc_loss(array![0.0, 0.0].view(), ClassId(9), &cs, 1.0).is_err());
    }

    #[test]
    fn gc_moving_toward_own_centroid_lowers_loss() {
        let cs = [stats(0, &[1.0, 0.0]), stats(1, &[0.0, 2.0])];
        let f = array![0.3, 0.9];
        let out = gc_loss(f.view(), ClassId(0), &cs, 1.3).unwrap();
        let toward = &cs[0].centroid - &f;
        let dir = out.feature_grads.row(0).dot(&toward);
        assert!(dir < 0.0);
    }

    #[test]
    fn lc_homogeneous_batch_is_zero() {
        let b = array![[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]];
        let labels = [ClassId(1); 3];
        assert_eq!(lc_loss(b.view(), &labels, 0, 1.0).unwrap().value, 0.0);
    }

    #[test]
    fn lc_without_peer_is_skipped() {
        let b = array![[0.0], [1.0], [2.0]];
        let labels = [ClassId(0), ClassId(1), ClassId(1)];
        let out = lc_loss(b.view(), &labels, 0, 1.0).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.skipped_anchors, 1);
        assert!(out.feature_grads.iter().all(|&g| g == 0.0));
        assert!(lc_loss(b.slice(ndarray::s![..1, ..]), &labels[..1], 0, 1.0).is_err());
    }

    #[test]
    fn ds_cases() {
        let z = ds_loss(array![1.0, 2.0].view(), array![1.0, 2.0].view()).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.feature_grads.iter().all(|&g| g == 0.0));
        let five = ds_loss(array![3.0, 4.0].view(), array![0.0, 0.0].view()).unwrap();
        assert_eq!(five.value, 5.0);
        assert!((five.feature_grads[[0, 0]] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn md_loss_fixtures() {
        let out = md_loss(&[1.0, 2.0], 0, &[1.0, 2.0]).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.threshold_grads.unwrap(), vec![0.0, 0.0]);

        let out = md_loss(&[2.5], 0, &[2.0]).unwrap();
        assert!((out.value - 0.5).abs() < 1e-15);
        assert_eq!(out.threshold_grads.unwrap(), vec![-1.0]);

        let out = md_loss(&[0.0, 1.0], 0, &[0.0, 2.0]).unwrap();
        assert!((out.value - 1.0).abs() < 1e-15);
        assert_eq!(out.threshold_grads.unwrap(), vec![0.0, 1.0]);

        assert!(matches!(
            md_loss(&[1.0], 0, &[-0.1]),
            Err(OwrError::NegativeThreshold { .. })
        ));
    }

    #[test]
    fn nno_score_cases() {
        let mu = array![0.0, 0.0];
        let at = |x: f64| {
            nno_score(
                array![x, 0.0].view(),
                mu.view(),
                2.0,
                1.0,
                NnoDistance::Euclidean,
            )
            .unwrap()
        };
        assert_eq!(at(2.0), 0.0);
        assert_eq!(at(0.0), 1.0);
        assert_eq!(at(4.0), -1.0);
        let sq = nno_score(
            array![2.0, 0.0].view(),
            mu.view(),
            4.0,
            3.0,
            NnoDistance::Squared,
        )
        .unwrap();
        assert_eq!(sq, 0.0);
        assert!(nno_score(mu.view(), mu.view(), 0.0, 1.0, NnoDistance::Euclidean).is_err());
    }

    #[test]
    fn deepnno_score_cases() {
        let mu = array![1.0, 1.0];
        assert_eq!(deepnno_score(mu.view(), mu.view()), 1.0);
        let s = deepnno_score(array![2.0, 2.0].view(), mu.view());
        assert!((s - (-1.0f64).exp()).abs() < 1e-15);
        let mut prev = 1.0;
        for d in [0.1, 0.5, 1.0, 2.0, 7.0] {
            let s = deepnno_score(array![d, 0.0].view(), array![0.0, 0.0].view());
            assert!(s < prev);
            prev = s;
        }
    }

    #[test]
    fn deepnno_bce_cases() {
        let one = [stats(0, &[1.0, 1.0])];
        let out = deepnno_bce(array![2.0, 2.0].view(), ClassId(0), &one).unwrap();
        assert!((out.value - 1.0).abs() < 1e-12);

        let cs = [
            stats(0, &[0.0, 0.0]),
            stats(1, &[50.0, 0.0]),
            stats(2, &[0.0, -50.0]),
        ];
        let out = deepnno_bce(array![0.0, 0.0].view(), ClassId(0), &cs).unwrap();
        assert!(out.value < 1e-6);
    }
}
