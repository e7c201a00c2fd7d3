//! Value functions `V_θ(x, y_{≤t})` and their Monte-Carlo regression.
//!
//! Every prefix of a labeled trajectory is a regression sample whose target
//! is the trajectory's terminal reward. Training minimizes
//! `½ Σ (V_θ(s) − target)²` over those samples.

mod checkpoint;
mod mlp;
mod tabular;

pub use checkpoint::{load_value, save_value, CHECKPOINT_VERSION};
pub use mlp::{gradient_check, FeatureMap, MlpValue};
pub use tabular::TabularValue;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{State, Trajectory};

#[derive(Debug, Error)]
pub enum ValueError {
    #[error("trajectory {index} has no reward")]
    UnlabeledTrajectory { index: usize },
    #[error("training data is empty")]
    EmptyData,
    #[error("non-finite loss at epoch {epoch} (learning rate {learning_rate})")]
    NonfiniteLoss { epoch: usize, learning_rate: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint version mismatch: expected {expected:?}, found {found:?}")]
    FormatMismatch { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A state → scalar estimate of expected terminal reward.
pub trait ValueFunction: Send + Sync {
    fn evaluate(&self, state: &State) -> f64;

    fn kind(&self) -> &'static str;
}

impl<T: ValueFunction + ?Sized> ValueFunction for &T {
    fn evaluate(&self, state: &State) -> f64 {
        (**self).evaluate(state)
    }

    fn kind(&self) -> &'static str {
        (**self).kind()
    }
}

/// `(x ⊕ y_{≤t}, R(x, y))`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionSample {
    pub state: State,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 2,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), ValueError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ValueError::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(ValueError::InvalidConfig("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ValueError::InvalidConfig("batch_size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One sample per generated prefix `t = 1..=|y|`, all sharing the
/// trajectory's terminal reward as target.
pub fn build_regression_set(
    trajectories: &[Trajectory],
) -> Result<Vec<RegressionSample>, ValueError> {
    let mut out = Vec::with_capacity(trajectories.iter().map(|t| t.completion.len()).sum());
    for (index, t) in trajectories.iter().enumerate() {
        let target = t
            .reward()
            .ok_or(ValueError::UnlabeledTrajectory { index })?;
        out.extend(t.prefix_states().map(|state| RegressionSample { state, target }));
    }
    Ok(out)
}

/// Mean of `½ (V(s) − target)²` over `data`.
pub fn mean_loss(v: &dyn ValueFunction, data: &[RegressionSample]) -> f64 {
    data.iter()
        .map(|s| 0.5 * (v.evaluate(&s.state) - s.target).powi(2))
        .sum::<f64>()
        / data.len() as f64
}

/// A value function that can be fit to regression samples.
pub trait TrainableValue: ValueFunction {
    /// Fits to `data` and returns the mean loss after each epoch.
    fn train(&mut self, data: &[RegressionSample], cfg: &TrainConfig)
        -> Result<Vec<f64>, ValueError>;
}

/// Any concrete value parameterization.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyValue {
    Tabular(TabularValue),
    Mlp(MlpValue),
}

impl AnyValue {
    pub fn reward_range(&self) -> (f64, f64) {
        match self {
            AnyValue::Tabular(v) => v.reward_range(),
            AnyValue::Mlp(v) => v.reward_range(),
        }
    }
}

impl ValueFunction for AnyValue {
    fn evaluate(&self, state: &State) -> f64 {
        match self {
            AnyValue::Tabular(v) => v.evaluate(state),
            AnyValue::Mlp(v) => v.evaluate(state),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            AnyValue::Tabular(v) => v.kind(),
            AnyValue::Mlp(v) => v.kind(),
        }
    }
}

impl TrainableValue for AnyValue {
    fn train(
        &mut self,
        data: &[RegressionSample],
        cfg: &TrainConfig,
    ) -> Result<Vec<f64>, ValueError> {
        match self {
            AnyValue::Tabular(v) => v.train(data, cfg),
            AnyValue::Mlp(v) => v.train(data, cfg),
        }
    }
}

impl From<TabularValue> for AnyValue {
    fn from(v: TabularValue) -> Self {
        AnyValue::Tabular(v)
    }
}

impl From<MlpValue> for AnyValue {
    fn from(v: MlpValue) -> Self {
        AnyValue::Mlp(v)
    }
}

/// Sum of several value functions. Guiding with it multiplies their
/// exponential tilts, i.e. stacks successive guided policies.
#[derive(Clone, Debug, Default)]
pub struct ComposedValue(pub Vec<AnyValue>);

impl ValueFunction for ComposedValue {
    fn evaluate(&self, state: &State) -> f64 {
        self.0.iter().map(|v| v.evaluate(state)).sum()
    }

    fn kind(&self) -> &'static str {
        "composed"
    }
}

/// Counts evaluations of the wrapped value function.
pub struct CountingValue<'a> {
    inner: &'a dyn ValueFunction,
    count: AtomicU64,
}

impl<'a> CountingValue<'a> {
    pub fn new(inner: &'a dyn ValueFunction) -> Self {
        Self {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.count.store(0, Ordering::Relaxed);
    }
}

impl ValueFunction for CountingValue<'_> {
    fn evaluate(&self, state: &State) -> f64 {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate(state)
    }

    fn kind(&self) -> &'static str {
        self.inner.kind()
    }
}

/// A fixed function of the state, mostly for tests.
pub struct FnValue<F>(pub F);

impl<F: Fn(&State) -> f64 + Send + Sync> ValueFunction for FnValue<F> {
    fn evaluate(&self, state: &State) -> f64 {
        (self.0)(state)
    }

    fn kind(&self) -> &'static str {
        "fn"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::tokens;

    fn labeled(prompt: &[u32], completion: &[u32], r: f64) -> Trajectory {
        Trajectory::new(tokens(prompt), tokens(completion), "base", 1, 0)
            .with_reward(r)
            .unwrap()
    }

    #[test]
    fn one_sample_per_prefix_with_shared_target() {
        let set = build_regression_set(&[labeled(&[7], &[1, 2, 0], 2.0)]).unwrap();
        assert_eq!(set.len(), 3);
        assert!(set.iter().all(|s| s.target == 2.0));
        assert_eq!(set[0].state.generated(), tokens(&[1]).as_slice());
        assert_eq!(set[2].state.generated(), tokens(&[1, 2, 0]).as_slice());
    }

    #[test]
    fn counts_add_up() {
        let ts = vec![
            labeled(&[1], &[1, 0], 0.0),
            labeled(&[1], &[1, 2, 0], 0.0),
            labeled(&[1], &[2, 2, 0], 1.0),
            labeled(&[1], &[3, 3, 3, 0], 1.0),
        ];
        assert_eq!(build_regression_set(&ts).unwrap().len(), 12);
    }

    #[test]
    fn unlabeled_is_rejected() {
        let ts = vec![
            labeled(&[1], &[1, 0], 0.0),
            Trajectory::new(tokens(&[1]), tokens(&[2]), "base", 1, 0),
        ];
        assert!(matches!(
            build_regression_set(&ts),
            Err(ValueError::UnlabeledTrajectory { index: 1 })
        ));
    }

    #[test]
    fn counting_wrapper_counts() {
        let v = FnValue(|s: &State| s.generated_len() as f64);
        let c = CountingValue::new(&v);
        for _ in 0..5 {
            c.evaluate(&State::new(vec![]));
        }
        assert_eq!(c.count(), 5);
        c.reset();
        assert_eq!(c.count(), 0);
    }

    #[test]
    fn train_config_checks() {
        assert!(TrainConfig::default().check().is_ok());
        assert_eq!(TrainConfig::default().epochs, 2);
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.check().is_err());
    }
}
