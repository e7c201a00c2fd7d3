//! Terminal reward models `R(x, y)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{TokenId, Trajectory};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("cannot score an empty completion")]
    EmptyCompletion,
    #[error("trajectory {index} is already labeled")]
    AlreadyLabeled { index: usize },
    #[error("invalid reward model: {0}")]
    InvalidModel(String),
}

/// A pure, bounded terminal reward.
pub trait RewardModel: Send + Sync {
    /// Declared `[min, max]` bounds of [`RewardModel::score`].
    fn range(&self) -> (f64, f64);

    fn score(&self, prompt: &[TokenId], completion: &[TokenId]) -> Result<f64, RewardError>;
}

/// `hit_value` if `target` occurs in order (not necessarily contiguously)
/// inside the completion, else `miss_value`; minus `length_penalty` per
/// completion token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsequenceReward {
    pub target: Vec<TokenId>,
    pub hit_value: f64,
    pub miss_value: f64,
    #[serde(default)]
    pub length_penalty: f64,
    /// Longest completion scored; used only for the declared range.
    pub max_length: usize,
}

impl SubsequenceReward {
    pub fn new(
        target: Vec<TokenId>,
        hit_value: f64,
        miss_value: f64,
        length_penalty: f64,
        max_length: usize,
    ) -> Result<Self, RewardError> {
        let r = Self {
            target,
            hit_value,
            miss_value,
            length_penalty,
            max_length,
        };
        r.check()?;
        Ok(r)
    }

    pub fn check(&self) -> Result<(), RewardError> {
        if !(self.hit_value > self.miss_value) {
            return Err(RewardError::InvalidModel(format!(
                "hit_value {} must exceed miss_value {}",
                self.hit_value, self.miss_value
            )));
        }
        if !self.length_penalty.is_finite() || self.length_penalty < 0.0 {
            return Err(RewardError::InvalidModel(
                "length_penalty must be finite and nonnegative".into(),
            ));
        }
        if self.max_length == 0 {
            return Err(RewardError::InvalidModel("max_length must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn contains_target(&self, completion: &[TokenId]) -> bool {
        let mut want = self.target.iter().peekable();
        for t in completion {
            if want.peek() == Some(&t) {
                want.next();
            }
        }
        want.peek().is_none()
    }
}

impl RewardModel for SubsequenceReward {
    fn range(&self) -> (f64, f64) {
        let lo = self.miss_value - self.length_penalty * self.max_length as f64;
        let hi = self.hit_value - self.length_penalty;
        (lo, hi)
    }

    fn score(&self, _prompt: &[TokenId], completion: &[TokenId]) -> Result<f64, RewardError> {
        if completion.is_empty() {
            return Err(RewardError::EmptyCompletion);
        }
        let base = if self.contains_target(completion) {
            self.hit_value
        } else {
            self.miss_value
        };
        Ok(base - self.length_penalty * completion.len() as f64)
    }
}

/// `bias + Σ_t weights[y_t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureLinearReward {
    pub weights: Vec<f64>,
    #[serde(default)]
    pub bias: f64,
    pub max_length: usize,
}

impl FeatureLinearReward {
    pub fn new(weights: Vec<f64>, bias: f64, max_length: usize) -> Result<Self, RewardError> {
        let r = Self {
            weights,
            bias,
            max_length,
        };
        r.check()?;
        Ok(r)
    }

    pub fn check(&self) -> Result<(), RewardError> {
        if self.weights.is_empty() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(RewardError::InvalidModel(
                "weights must be nonempty and finite".into(),
            ));
        }
        if self.max_length == 0 {
            return Err(RewardError::InvalidModel("max_length must be ≥ 1".into()));
        }
        Ok(())
    }
}

impl RewardModel for FeatureLinearReward {
    fn range(&self) -> (f64, f64) {
        let lo = self.weights.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let n = self.max_length as f64;
        // Completions have between 1 and max_length tokens.
        (self.bias + lo.min(lo * n), self.bias + hi.max(hi * n))
    }

    fn score(&self, _prompt: &[TokenId], completion: &[TokenId]) -> Result<f64, RewardError> {
        if completion.is_empty() {
            return Err(RewardError::EmptyCompletion);
        }
        Ok(self.bias
            + completion
                .iter()
                .map(|t| self.weights.get(t.index()).copied().unwrap_or(0.0))
                .sum::<f64>())
    }
}

/// Serializable reward configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    Subsequence(SubsequenceReward),
    FeatureLinear(FeatureLinearReward),
}

impl RewardSpec {
    pub fn check(&self) -> Result<(), RewardError> {
        match self {
            RewardSpec::Subsequence(r) => r.check(),
            RewardSpec::FeatureLinear(r) => r.check(),
        }
    }
}

impl RewardModel for RewardSpec {
    fn range(&self) -> (f64, f64) {
        match self {
            RewardSpec::Subsequence(r) => r.range(),
            RewardSpec::FeatureLinear(r) => r.range(),
        }
    }

    fn score(&self, prompt: &[TokenId], completion: &[TokenId]) -> Result<f64, RewardError> {
        match self {
            RewardSpec::Subsequence(r) => r.score(prompt, completion),
            RewardSpec::FeatureLinear(r) => r.score(prompt, completion),
        }
    }
}

/// Scores every trajectory. Refuses to relabel.
pub fn label_trajectories(
    reward: &dyn RewardModel,
    mut trajectories: Vec<Trajectory>,
) -> Result<Vec<Trajectory>, RewardError> {
    if let Some(index) = trajectories.iter().position(Trajectory::is_labeled) {
        return Err(RewardError::AlreadyLabeled { index });
    }
    for (index, t) in trajectories.iter_mut().enumerate() {
        let r = reward.score(&t.prompt, &t.completion)?;
        t.set_reward(r)
            .map_err(|_| RewardError::AlreadyLabeled { index })?;
    }
    Ok(trajectories)
}
