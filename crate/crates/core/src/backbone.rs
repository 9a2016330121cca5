//! Feature extractor: a stack of affine layers with ReLU between them, a
//! hand-written backward pass and SGD with momentum and weight decay.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OwrError, Result};
use crate::metric_stats::check_finite;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub input_dim: usize,
    /// Output width of every layer; the last entry is the feature dimension.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl ExtractorConfig {
    pub fn linear(input_dim: usize, feature_dim: usize, init_seed: u64) -> Self {
        ExtractorConfig {
            input_dim,
            layer_dims: vec![feature_dim],
            activation: Activation::Identity,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(OwrError::InvalidConfig("input_dim must be positive".into()));
        }
        if self.layer_dims.is_empty() || self.layer_dims.contains(&0) {
            return Err(OwrError::InvalidConfig(
                "layer_dims must be a non-empty list of positive widths".into(),
            ));
        }
        if self.activation == Activation::Identity && self.layer_dims.len() > 1 {
            return Err(OwrError::InvalidConfig(
                "identity activation is only valid for a single linear layer".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }
}

/// One affine layer; also used to hold gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// Shape (out, in).
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros_like(other: &Dense) -> Dense {
        Dense {
            weight: Array2::zeros(other.weight.raw_dim()),
            bias: Array1::zeros(other.bias.raw_dim()),
        }
    }
}

/// Per-layer parameter gradients, shaped like the extractor's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn iter_values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }
}

/// Intermediate values of one forward pass, consumed by [`Extractor::backward`].
#[derive(Debug, Clone)]
pub struct ActivationCache {
    generation: u64,
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each layer.
    pre_activations: Vec<Array2<f64>>,
}

impl ActivationCache {
    /// Pre-activation output of each layer, in order.
    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre_activations
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extractor {
    config: ExtractorConfig,
    layers: Vec<Dense>,
    /// Bumped on every parameter change so stale caches are detected.
    #[serde(default)]
    generation: u64,
}

impl Extractor {
    /// Glorot-uniform weights drawn from `config.init_seed`, zero biases.
    pub fn new(config: ExtractorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut fan_in = config.input_dim;
        let mut layers = Vec::with_capacity(config.layer_dims.len());
        for &fan_out in &config.layer_dims {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weight =
                Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..=limit));
            layers.push(Dense {
                weight,
                bias: Array1::zeros(fan_out),
            });
            fan_in = fan_out;
        }
        Ok(Extractor {
            config,
            layers,
            generation: 0,
        })
    }

    /// Builds an extractor from explicit parameters, checking that shapes chain.
    pub fn from_layers(config: ExtractorConfig, layers: Vec<Dense>) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.layer_dims.len() {
            return Err(OwrError::InvalidConfig(format!(
                "expected {} layers, got {}",
                config.layer_dims.len(),
                layers.len()
            )));
        }
        let mut fan_in = config.input_dim;
        for (layer, &fan_out) in layers.iter().zip(&config.layer_dims) {
            if layer.weight.dim() != (fan_out, fan_in) || layer.bias.len() != fan_out {
                return Err(OwrError::InvalidConfig(format!(
                    "layer shape {:?}/{} does not match {}x{}",
                    layer.weight.dim(),
                    layer.bias.len(),
                    fan_out,
                    fan_in
                )));
            }
            check_finite(
                layer.weight.iter().chain(layer.bias.iter()),
                "extractor parameters",
            )?;
            fan_in = fan_out;
        }
        Ok(Extractor {
            config,
            layers,
            generation: 0,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access to parameters; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn forward(&self, batch: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ActivationCache)> {
        if batch.ncols() != self.config.input_dim {
            return Err(OwrError::DimensionMismatch {
                expected: self.config.input_dim,
                found: batch.ncols(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = batch.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = current.dot(&layer.weight.t()) + &layer.bias;
            let out = if k < last {
                activate(self.config.activation, &z)
            } else {
                z.clone()
            };
            inputs.push(current);
            pre_activations.push(z);
            current = out;
        }
        Ok((
            current,
            ActivationCache {
                generation: self.generation,
                inputs,
                pre_activations,
            },
        ))
    }

    /// Forward pass without keeping the cache.
    pub fn features(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.forward(batch).map(|(f, _)| f)
    }

    /// Backpropagates `feature_grads` (dL/dfeatures) to parameter gradients.
    pub fn backward(
        &self,
        cache: &ActivationCache,
        feature_grads: ArrayView2<'_, f64>,
    ) -> Result<Gradients> {
        if cache.generation != self.generation || cache.inputs.len() != self.layers.len() {
            return Err(OwrError::StaleCache);
        }
        let out_shape = cache.pre_activations.last().expect("non-empty").dim();
        if feature_grads.dim() != out_shape {
            return Err(OwrError::DimensionMismatch {
                expected: out_shape.1,
                found: feature_grads.ncols(),
            });
        }
        let last = self.layers.len() - 1;
        let mut grads = vec![None; self.layers.len()];
        let mut upstream = feature_grads.to_owned();
        for k in (0..self.layers.len()).rev() {
            let dz = if k < last {
                activation_grad(self.config.activation, &cache.pre_activations[k], &upstream)
            } else {
                upstream
            };
            let weight = dz.t().dot(&cache.inputs[k]);
            let bias = dz.sum_axis(Axis(0));
            upstream = dz.dot(&self.layers[k].weight);
            grads[k] = Some(Dense { weight, bias });
        }
        Ok(Gradients {
            layers: grads.into_iter().map(|g| g.expect("filled")).collect(),
        })
    }

    /// Deep, read-only copy for use as the previous step's extractor.
    pub fn snapshot(&self) -> FrozenExtractor {
        FrozenExtractor {
            inner: self.clone(),
        }
    }
}

fn activate(act: Activation, z: &Array2<f64>) -> Array2<f64> {
    match act {
        Activation::Relu => z.mapv(|v| v.max(0.0)),
        Activation::Identity => z.clone(),
    }
}

fn activation_grad(act: Activation, z: &Array2<f64>, upstream: &Array2<f64>) -> Array2<f64> {
    match act {
        Activation::Relu => {
            let mut g = upstream.clone();
            g.zip_mut_with(z, |g, &z| {
                if z <= 0.0 {
                    *g = 0.0
                }
            });
            g
        }
        Activation::Identity => upstream.clone(),
    }
}

/// Immutable copy of an extractor; only supports the forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrozenExtractor {
    inner: Extractor,
}

impl FrozenExtractor {
    pub fn features(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.inner.features(batch)
    }

    pub fn snapshot(&self) -> FrozenExtractor {
        self.clone()
    }

    pub fn extractor(&self) -> &Extractor {
        &self.inner
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Dense>,
}

impl Sgd {
    pub fn new(
        extractor: &Extractor,
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(OwrError::InvalidConfig(format!(
                "learning rate {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(OwrError::InvalidConfig(format!(
                "momentum {momentum} not in [0, 1)"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(OwrError::InvalidConfig(format!(
                "weight decay {weight_decay}"
            )));
        }
        Ok(Sgd {
            learning_rate,
            momentum,
            weight_decay,
            velocity: extractor.layers.iter().map(Dense::zeros_like).collect(),
        })
    }

    pub fn velocity(&self) -> &[Dense] {
        &self.velocity
    }

    /// `v <- momentum*v + g + wd*p`, then `p <- p - lr*v`.
    pub fn step(&mut self, extractor: &mut Extractor, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != extractor.layers.len()
            || grads
                .layers
                .iter()
                .zip(&extractor.layers)
                .any(|(g, p)| g.weight.dim() != p.weight.dim() || g.bias.len() != p.bias.len())
        {
            return Err(OwrError::InvalidConfig(
                "gradient shapes do not match the extractor".into(),
            ));
        }
        check_finite(grads.iter_values(), "parameter gradients")?;
        let (lr, mom, wd) = (self.learning_rate, self.momentum, self.weight_decay);
        for ((p, g), v) in extractor
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.velocity)
        {
            ndarray::Zip::from(&mut v.weight)
                .and(&mut p.weight)
                .and(&g.weight)
                .for_each(|v, p, &g| {
                    *v = mom * *v + g + wd * *p;
                    *p -= lr * *v;
                });
            ndarray::Zip::from(&mut v.bias)
                .and(&mut p.bias)
                .and(&g.bias)
                .for_each(|v, p, &g| {
                    *v = mom * *v + g + wd * *p;
                    *p -= lr * *v;
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn mlp(seed: u64) -> Extractor {
        Extractor::new(ExtractorConfig {
            input_dim: 3,
            layer_dims: vec![5, 4],
            activation: Activation::Relu,
            init_seed: seed,
        })
        .unwrap()
    }

    fn random_input(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        let mut cfg = ExtractorConfig::linear(2, 2, 0);
        assert!(cfg.validate().is_ok());
        cfg.layer_dims = vec![3, 2];
        assert!(cfg.validate().is_err());
        cfg.activation = Activation::Relu;
        assert!(cfg.validate().is_ok());
        cfg.layer_dims.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn identity_layer_is_identity_map() {
        let ex = Extractor::from_layers(
            ExtractorConfig::linear(2, 2, 0),
            vec![Dense {
                weight: Array2::eye(2),
                bias: Array1::zeros(2),
            }],
        )
        .unwrap();
        let x = array![[1.5, -2.0], [0.0, 3.0]];
        assert_eq!(ex.features(x.view()).unwrap(), x);
    }

    #[test]
    fn zero_mlp_gives_zero_features() {
        let mut ex = mlp(1);
        for l in ex.layers_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let f = ex.features(random_input(2, 4, 3).view()).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn forward_matches_scalar_loop() {
        let ex = mlp(7);
        let x = random_input(9, 6, 3);
        let got = ex.features(x.view()).unwrap();
        for r in 0..6 {
            let mut act: Vec<f64> = x.row(r).to_vec();
            for (k, layer) in ex.layers().iter().enumerate() {
                let (rows, cols) = layer.weight.dim();
                let mut next = vec![0.0; rows];
                for i in 0..rows {
                    let mut s = layer.bias[i];
                    for j in 0..cols {
                        s += layer.weight[[i, j]] * act[j];
                    }
                    next[i] = if k + 1 < ex.layers().len() {
                        s.max(0.0)
                    } else {
                        s
                    };
                }
                act = next;
            }
            for (j, v) in act.iter().enumerate() {
                assert!((got[[r, j]] - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        assert!(mlp(0).forward(random_input(0, 2, 4).view()).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let ex = mlp(3);
        let (f, cache) = ex.forward(random_input(4, 5, 3).view()).unwrap();
        let g = ex
            .backward(&cache, Array2::zeros(f.raw_dim()).view())
            .unwrap();
        assert!(g.iter_values().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_sum_loss_gradient_by_hand() {
        // L = sum of features of y = W x + b over a 2x2 layer and two samples.
        let ex = Extractor::from_layers(
            ExtractorConfig::linear(2, 2, 0),
            vec![Dense {
                weight: array![[0.5, -1.0], [2.0, 0.25]],
                bias: array![0.1, -0.2],
            }],
        )
        .unwrap();
        let x = array![[1.0, 2.0], [3.0, -1.0]];
        let (f, cache) = ex.forward(x.view()).unwrap();
        let g = ex
            .backward(&cache, Array2::ones(f.raw_dim()).view())
            .unwrap();
        // dL/dW_ij = sum_samples x_j, dL/db_i = number of samples
        assert_eq!(g.layers[0].weight, array![[4.0, 1.0], [4.0, 1.0]]);
        assert_eq!(g.layers[0].bias, array![2.0, 2.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let ex = mlp(21);
        let x = random_input(22, 4, 3);
        let upstream = random_input(23, 4, 4);
        // L = <upstream, f(x)>
        let loss = |e: &Extractor| (e.features(x.view()).unwrap() * &upstream).sum();
        let (_, cache) = ex.forward(x.view()).unwrap();
        let g = ex.backward(&cache, upstream.view()).unwrap();
        let h = 1e-5;
        for k in 0..ex.layers().len() {
            let shape = ex.layers()[k].weight.dim();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let mut plus = ex.clone();
                    plus.layers_mut()[k].weight[[i, j]] += h;
                    let mut minus = ex.clone();
                    minus.layers_mut()[k].weight[[i, j]] -= h;
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let an = g.layers[k].weight[[i, j]];
                    assert!(
                        (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3),
                        "{fd} vs {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut ex = mlp(5);
        let (f, cache) = ex.forward(random_input(1, 2, 3).view()).unwrap();
        ex.layers_mut()[0].bias[0] += 1.0;
        assert!(matches!(
            ex.backward(&cache, Array2::zeros(f.raw_dim()).view()),
            Err(OwrError::StaleCache)
        ));
    }

    fn constant_grads(ex: &Extractor, value: f64) -> Gradients {
        Gradients {
            layers: ex
                .layers()
                .iter()
                .map(|l| Dense {
                    weight: Array2::from_elem(l.weight.raw_dim(), value),
                    bias: Array1::from_elem(l.bias.raw_dim(), value),
                })
                .collect(),
        }
    }

    #[test]
    fn sgd_fixed_point_and_plain_descent() {
        let mut ex = mlp(2);
        let before = ex.clone();
        let mut opt = Sgd::new(&ex, 0.1, 0.9, 0.0).unwrap();
        {
            let g = constant_grads(&ex, 0.0);
            opt.step(&mut ex, &g)
        }
        .unwrap();
        assert_eq!(ex.layers(), before.layers());

        let mut opt = Sgd::new(&ex, 0.1, 0.0, 0.0).unwrap();
        {
            let g = constant_grads(&ex, 2.0);
            opt.step(&mut ex, &g)
        }
        .unwrap();
        for (a, b) in ex.layers().iter().zip(before.layers()) {
            for (x, y) in a.weight.iter().zip(b.weight.iter()) {
                assert!((x - (y - 0.2)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sgd_momentum_second_step_is_1_9_lr_g() {
        let mut ex = mlp(4);
        let mut opt = Sgd::new(&ex, 0.05, 0.9, 0.0).unwrap();
        let g = constant_grads(&ex, 0.3);
        opt.step(&mut ex, &g).unwrap();
        let mid = ex.clone();
        opt.step(&mut ex, &g).unwrap();
        for (a, b) in ex.layers().iter().zip(mid.layers()) {
            for (x, y) in a.weight.iter().zip(b.weight.iter()) {
                assert!(((y - x) - 0.05 * 1.9 * 0.3).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sgd_zero_lr_is_identity_and_nan_aborts() {
        let mut ex = mlp(6);
        let before = ex.clone();
        let mut opt = Sgd::new(&ex, 0.0, 0.9, 1e-3).unwrap();
        {
            let g = constant_grads(&ex, 1.0);
            opt.step(&mut ex, &g)
        }
        .unwrap();
        assert_eq!(ex.layers(), before.layers());
        assert!({
            let g = constant_grads(&ex, f64::NAN);
            opt.step(&mut ex, &g)
        }
        .is_err());
    }

    #[test]
    fn snapshot_is_isolated_and_faithful() {
        let mut ex = mlp(8);
        let x = random_input(3, 3, 3);
        let snap = ex.snapshot();
        assert_eq!(
            snap.features(x.view()).unwrap(),
            ex.features(x.view()).unwrap()
        );
        let again = snap.snapshot();
        ex.layers_mut()[1].weight.fill(0.0);
        assert_ne!(
            snap.features(x.view()).unwrap(),
            ex.features(x.view()).unwrap()
        );
        assert_eq!(
            snap.features(x.view()).unwrap(),
            again.features(x.view()).unwrap()
        );
    }
}
