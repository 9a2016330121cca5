//! Random gradient-check instances shared by the gradient tests and the
//! acceptance suite. Each check returns the relative error between the
//! analytic and the central-difference gradient, or `None` when the drawn
//! instance sits within the exclusion margin of a non-differentiable point.

#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView2};
use owr_core::backbone::{Activation, Dense, Extractor, ExtractorConfig};
use owr_core::gradcheck::{central_difference, relative_error};
use owr_core::losses::{
    deepnno_bce, deepnno_score, ds_loss, gc_loss, lc_loss, total_loss, LossWeights, BCE_CLAMP,
};
use owr_core::{ClassId, ClassStats};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const MARGIN: f64 = 1e-3;
pub const FLOOR: f64 = 1e-8;
pub const MAX_DIM: usize = 8;
pub const MAX_BATCH: usize = 16;

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn centroids(rng: &mut ChaCha8Rng, k: usize, d: usize, scale: f64) -> Vec<ClassStats> {
    (0..k)
        .map(|c| ClassStats {
            class_id: ClassId(c as u32),
            centroid: Array1::from(normal_vec(rng, d, scale)),
            count: 1,
            threshold: 0.0,
        })
        .collect()
}

/// Labels over `k` classes with at least two distinct values when `k >= 2`.
fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<ClassId> {
    let mut l: Vec<ClassId> = (0..n)
        .map(|_| ClassId(rng.random_range(0..k as u32)))
        .collect();
    if k >= 2 && n >= 2 && l.iter().all(|x| *x == l[0]) {
        l[1] = ClassId((l[0].0 + 1) % k as u32);
    }
    l
}

pub fn check_gc(rng: &mut ChaCha8Rng) -> Option<f64> {
    let d = rng.random_range(1..=MAX_DIM);
    let k = rng.random_range(2..=5);
    let cs = centroids(rng, k, d, 1.0);
    let f = normal_vec(rng, d, 1.0);
    let label = ClassId(rng.random_range(0..k as u32));
    let t = rng.random_range(0.5..3.0);
    let analytic = gc_loss(Array1::from(f.clone()).view(), label, &cs, t).ok()?;
    let numeric = central_difference(
        |x| {
            gc_loss(Array1::from(x.to_vec()).view(), label, &cs, t)
                .unwrap()
                .value
        },
        &f,
        H,
    );
    Some(relative_error(
        analytic.feature_grads.as_slice()?,
        &numeric,
        FLOOR,
    ))
}

pub fn check_lc(rng: &mut ChaCha8Rng) -> Option<f64> {
    let d = rng.random_range(1..=MAX_DIM);
    let n = rng.random_range(3..=MAX_BATCH);
    let k = rng.random_range(2..=3);
    let mut ls = labels(rng, n, k);
    let anchor = rng.random_range(0..n);
    // Guarantee a peer for the anchor.
    let peer = (anchor + 1) % n;
    ls[peer] = ls[anchor];
    let x = normal_vec(rng, n * d, 1.0);
    let t = rng.random_range(0.5..3.0);
    let eval = |v: &[f64]| {
        let b = Array2::from_shape_vec((n, d), v.to_vec()).unwrap();
        lc_loss(b.view(), &ls, anchor, t).unwrap()
    };
    let analytic = eval(&x);
    if analytic.value < MARGIN {
        return None;
    }
    let numeric = central_difference(|v| eval(v).value, &x, H);
    Some(relative_error(
        analytic.feature_grads.as_slice()?,
        &numeric,
        FLOOR,
    ))
}

pub fn check_ds(rng: &mut ChaCha8Rng) -> Option<f64> {
    let d = rng.random_range(1..=MAX_DIM);
    let f = normal_vec(rng, d, 1.0);
    let old = Array1::from(normal_vec(rng, d, 1.0));
    let analytic = ds_loss(Array1::from(f.clone()).view(), old.view()).unwrap();
    if analytic.value < MARGIN {
        return None;
    }
    let numeric = central_difference(
        |x| {
            ds_loss(Array1::from(x.to_vec()).view(), old.view())
                .unwrap()
                .value
        },
        &f,
        H,
    );
    Some(relative_error(
        analytic.feature_grads.as_slice()?,
        &numeric,
        FLOOR,
    ))
}

pub fn check_bce(rng: &mut ChaCha8Rng) -> Option<f64> {
    let d = rng.random_range(1..=MAX_DIM);
    let k = rng.random_range(2..=5);
    let cs = centroids(rng, k, d, 0.7);
    let f = normal_vec(rng, d, 0.7);
    let label = ClassId(rng.random_range(0..k as u32));
    let fv = Array1::from(f.clone());
    // Keep every score clear of the clamp on both sides.
    let clamp_margin = BCE_CLAMP * (1.0 + MARGIN) + MARGIN;
    if cs.iter().any(|c| {
        let s = deepnno_score(fv.view(), c.centroid.view());
        s < clamp_margin || s > 1.0 - clamp_margin
    }) {
        return None;
    }
    let analytic = deepnno_bce(fv.view(), label, &cs).unwrap();
    let numeric = central_difference(
        |x| {
            deepnno_bce(Array1::from(x.to_vec()).view(), label, &cs)
                .unwrap()
                .value
        },
        &f,
        H,
    );
    Some(relative_error(
        analytic.feature_grads.as_slice()?,
        &numeric,
        FLOOR,
    ))
}

fn unflatten(config: &ExtractorConfig, flat: &[f64]) -> Extractor {
    let mut layers = Vec::new();
    let mut fan_in = config.input_dim;
    let mut at = 0;
    for &fan_out in &config.layer_dims {
        let w = Array2::from_shape_vec((fan_out, fan_in), flat[at..at + fan_out * fan_in].to_vec())
            .unwrap();
        at += fan_out * fan_in;
        let b = Array1::from(flat[at..at + fan_out].to_vec());
        at += fan_out;
        layers.push(Dense { weight: w, bias: b });
        fan_in = fan_out;
    }
    Extractor::from_layers(config.clone(), layers).unwrap()
}

/// Total batch objective with respect to the parameters of a two-layer ReLU
/// MLP. Centroids, temperature and previous-step features are constants.
pub fn check_end_to_end(rng: &mut ChaCha8Rng) -> Option<f64> {
    let input_dim = rng.random_range(1..=MAX_DIM);
    let hidden = rng.random_range(2..=MAX_DIM);
    let d = rng.random_range(1..=MAX_DIM);
    let n = rng.random_range(2..=MAX_BATCH);
    let k = rng.random_range(2..=4);
    let config = ExtractorConfig {
        input_dim,
        layer_dims: vec![hidden, d],
        activation: Activation::Relu,
        init_seed: rng.random(),
    };
    let init = Extractor::new(config.clone()).unwrap();
    // Glorot weights from the extractor, random biases so the ReLUs are not
    // all at the origin.
    let mut flat = Vec::new();
    for l in init.layers() {
        flat.extend(l.weight.iter().copied());
        flat.extend(normal_vec(rng, l.bias.len(), 0.3));
    }
    let x = Array2::from_shape_vec((n, input_dim), normal_vec(rng, n * input_dim, 1.0)).unwrap();
    let ls = labels(rng, n, k);
    let cs = centroids(rng, k, d, 1.0);
    let old = Array2::from_shape_vec((n, d), normal_vec(rng, n * d, 1.0)).unwrap();
    let t = rng.random_range(0.5..3.0);
    let weights = LossWeights {
        global: rng.random_range(0.1..2.0),
        lambda: rng.random_range(0.1..2.0),
        gamma: rng.random_range(0.1..2.0),
    };
    let objective = |ex: &Extractor, x: ArrayView2<'_, f64>| {
        let f = ex.features(x).unwrap();
        total_loss(f.view(), &ls, &cs, t, Some(old.view()), &weights)
            .unwrap()
            .0
    };

    let model = unflatten(&config, &flat);
    let (features, cache) = model.forward(x.view()).unwrap();
    if cache.pre_activations()[0].iter().any(|z| z.abs() < MARGIN) {
        return None;
    }
    for i in 0..n {
        let diff = &features.row(i) - &old.row(i);
        if diff.dot(&diff).sqrt() < MARGIN {
            return None;
        }
        let lc = lc_loss(features.view(), &ls, i, t).unwrap();
        if lc.skipped_anchors == 0 && lc.value < MARGIN {
            return None;
        }
    }
    let loss = objective(&model, x.view());
    let grads = model.backward(&cache, loss.feature_grads.view()).unwrap();
    let analytic: Vec<f64> = grads.iter_values().copied().collect();
    let numeric = central_difference(
        |p| objective(&unflatten(&config, p), x.view()).value,
        &flat,
        H,
    );
    Some(relative_error(&analytic, &numeric, FLOOR))
}

/// Draws instances until `count` are usable; returns the worst error and the
/// number of excluded draws.
pub fn run_checks(
    check: fn(&mut ChaCha8Rng) -> Option<f64>,
    seed: u64,
    count: usize,
) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut excluded = 0;
    while done < count {
        match check(&mut rng) {
            Some(e) => {
                worst = worst.max(e);
                done += 1;
            }
            None => {
                excluded += 1;
                assert!(excluded < 100 * count, "too many excluded instances");
            }
        }
    }
    (worst, excluded)
}
