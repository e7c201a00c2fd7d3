use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{RegressionSample, TrainConfig, TrainableValue, ValueError, ValueFunction};
use crate::mdp::State;
use crate::policy::seeded_rng;

/// Fixed state featurization: token counts over the prompt, token counts over
/// the generated part, and generated length divided by `max_length`.
/// Optionally a one-hot of the last generated token is appended.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMap {
    pub vocab_size: usize,
    pub max_length: usize,
    #[serde(default)]
    pub last_token: bool,
}

impl FeatureMap {
    pub fn new(vocab_size: usize, max_length: usize) -> Self {
        Self {
            vocab_size,
            max_length,
            last_token: false,
        }
    }

    pub fn with_last_token(mut self) -> Self {
        self.last_token = true;
        self
    }

    pub fn dim(&self) -> usize {
        2 * self.vocab_size + 1 + if self.last_token { self.vocab_size } else { 0 }
    }

    pub fn features(&self, state: &State) -> Vec<f64> {
        let v = self.vocab_size;
        let mut x = vec![0.0; self.dim()];
        for t in state.prompt() {
            if t.index() < v {
                x[t.index()] += 1.0;
            }
        }
        for t in state.generated() {
            if t.index() < v {
                x[v + t.index()] += 1.0;
            }
        }
        x[2 * v] = state.generated_len() as f64 / self.max_length.max(1) as f64;
        if self.last_token {
            if let Some(t) = state.generated().last().filter(|t| t.index() < v) {
                x[2 * v + 1 + t.index()] = 1.0;
            }
        }
        x
    }
}

/// Dense layer, weights row-major `rows x cols`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                let row = &self.weights[r * self.cols..(r + 1) * self.cols];
                self.bias[r] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
            })
            .collect()
    }

    fn zeros_like(&self) -> Layer {
        Layer {
            rows: self.rows,
            cols: self.cols,
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// Feature map followed by tanh hidden layers and a linear scalar head.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpValue {
    features: FeatureMap,
    layers: Vec<Layer>,
    reward_range: (f64, f64),
}

impl MlpValue {
    /// Weights and biases drawn uniformly from `[-0.1, 0.1]`.
    pub fn new(features: FeatureMap, hidden: &[usize], reward_range: (f64, f64), seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut dims = vec![features.dim()];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (cols, rows) = (w[0], w[1]);
                Layer {
                    rows,
                    cols,
                    weights: (0..rows * cols).map(|_| rng.random_range(-0.1..=0.1)).collect(),
                    bias: (0..rows).map(|_| rng.random_range(-0.1..=0.1)).collect(),
                }
            })
            .collect();
        Self {
            features,
            layers,
            reward_range,
        }
    }

    pub fn from_layers(
        features: FeatureMap,
        layers: Vec<Layer>,
        reward_range: (f64, f64),
    ) -> Result<Self, ValueError> {
        let bad = |m: String| Err(ValueError::Malformed(m));
        if layers.is_empty() {
            return bad("network has no layers".into());
        }
        let mut cols = features.dim();
        for (i, l) in layers.iter().enumerate() {
            if l.cols != cols {
                return bad(format!("layer {i} expects {} inputs, got {cols}", l.cols));
            }
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return bad(format!("layer {i} parameter arrays do not match {}x{}", l.rows, l.cols));
            }
            if l.weights.iter().chain(&l.bias).any(|x| !x.is_finite()) {
                return bad(format!("layer {i} has non-finite parameters"));
            }
            cols = l.rows;
        }
        if cols != 1 {
            return bad(format!("output layer has {cols} units, expected 1"));
        }
        Ok(Self {
            features,
            layers,
            reward_range,
        })
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.features
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn reward_range(&self) -> (f64, f64) {
        self.reward_range
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Sets every parameter to zero.
    pub fn zeroed(mut self) -> Self {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        self
    }

    /// Activations of every layer; the last entry holds the scalar output.
    fn forward(&self, x: Vec<f64>) -> Vec<Vec<f64>> {
        let mut acts = vec![x];
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.affine(acts.last().expect("input present"));
            if i < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    /// Adds `scale · ∂(½(V − y)²)/∂θ` into `grads`; returns the sample loss.
    fn accumulate_gradient(&self, sample: &RegressionSample, scale: f64, grads: &mut [Layer]) -> f64 {
        let acts = self.forward(self.features.features(&sample.state));
        let out = acts.last().expect("output")[0];
        let err = out - sample.target;
        let mut delta = vec![err];
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let input = &acts[i];
            let g = &mut grads[i];
            for r in 0..l.rows {
                g.bias[r] += scale * delta[r];
                let row = &mut g.weights[r * l.cols..(r + 1) * l.cols];
                for (gw, xi) in row.iter_mut().zip(input) {
                    *gw += scale * delta[r] * xi;
                }
            }
            if i > 0 {
                // Input to layer i is a tanh activation.
                delta = (0..l.cols)
                    .map(|c| {
                        let back: f64 = (0..l.rows).map(|r| l.weights[r * l.cols + c] * delta[r]).sum();
                        back * (1.0 - input[c] * input[c])
                    })
                    .collect();
            }
        }
        0.5 * err * err
    }

    fn sample_loss(&self, sample: &RegressionSample) -> f64 {
        let out = self.evaluate(&sample.state);
        0.5 * (out - sample.target).powi(2)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    /// Analytic gradient of the per-sample loss, flattened like [`Self::parameters`].
    pub fn gradient(&self, sample: &RegressionSample) -> Vec<f64> {
        let mut grads: Vec<Layer> = self.layers.iter().map(Layer::zeros_like).collect();
        self.accumulate_gradient(sample, 1.0, &mut grads);
        grads
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

impl ValueFunction for MlpValue {
    fn evaluate(&self, state: &State) -> f64 {
        self.forward(self.features.features(state))
            .last()
            .expect("output")[0]
    }

    fn kind(&self) -> &'static str {
        "mlp"
    }
}

impl TrainableValue for MlpValue {
    /// Minibatch SGD with a constant learning rate. Sample order is
    /// shuffled every epoch from `cfg.seed`.
    fn train(
        &mut self,
        data: &[RegressionSample],
        cfg: &TrainConfig,
    ) -> Result<Vec<f64>, ValueError> {
        cfg.check()?;
        if data.is_empty() {
            return Err(ValueError::EmptyData);
        }
        let mut rng = seeded_rng(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut grads: Vec<Layer> = self.layers.iter().map(Layer::zeros_like).collect();
        let mut trace = Vec::with_capacity(cfg.epochs);
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                for g in &mut grads {
                    g.weights.iter_mut().for_each(|w| *w = 0.0);
                    g.bias.iter_mut().for_each(|b| *b = 0.0);
                }
                let scale = 1.0 / batch.len() as f64;
                for &i in batch {
                    self.accumulate_gradient(&data[i], scale, &mut grads);
                }
                let flat: Vec<f64> = grads
                    .iter()
                    .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
                    .collect();
                for (p, g) in self.params_mut().zip(flat) {
                    *p -= cfg.learning_rate * g;
                }
            }
            let loss = data.iter().map(|s| self.sample_loss(s)).sum::<f64>() / data.len() as f64;
            if !loss.is_finite() {
                return Err(ValueError::NonfiniteLoss {
                    epoch,
                    learning_rate: cfg.learning_rate,
                });
            }
            trace.push(loss);
        }
        Ok(trace)
    }
}

/// Largest relative error between analytic gradients and central finite
/// differences of the per-sample loss, over every parameter.
pub fn gradient_check(v: &MlpValue, sample: &RegressionSample, eps: f64) -> f64 {
    let analytic = v.gradient(sample);
    let mut probe = v.clone();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let orig = *probe.params_mut().nth(i).expect("parameter index");
        *probe.params_mut().nth(i).expect("parameter index") = orig + eps;
        let up = probe.sample_loss(sample);
        *probe.params_mut().nth(i).expect("parameter index") = orig - eps;
        let down = probe.sample_loss(sample);
        *probe.params_mut().nth(i).expect("parameter index") = orig;
        let numeric = (up - down) / (2.0 * eps);
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}
