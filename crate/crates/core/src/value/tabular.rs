use std::collections::HashMap;

use super::{mean_loss, RegressionSample, TrainConfig, TrainableValue, ValueError, ValueFunction};
use crate::mdp::State;

/// Per-state sums and counts of observed targets. Training is the exact L2
/// minimizer: the mean target at each observed state.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularValue {
    table: HashMap<State, (f64, u64)>,
    default_value: f64,
    reward_range: (f64, f64),
}

impl TabularValue {
    /// Unseen states evaluate to the midpoint of `reward_range`.
    pub fn new(reward_range: (f64, f64)) -> Self {
        Self::with_default(reward_range, 0.5 * (reward_range.0 + reward_range.1))
    }

    pub fn with_default(reward_range: (f64, f64), default_value: f64) -> Self {
        Self {
            table: HashMap::new(),
            default_value,
            reward_range,
        }
    }

    pub fn default_value(&self) -> f64 {
        self.default_value
    }

    pub fn reward_range(&self) -> (f64, f64) {
        self.reward_range
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn entry(&self, state: &State) -> Option<(f64, u64)> {
        self.table.get(state).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&State, f64, u64)> {
        self.table.iter().map(|(s, (sum, n))| (s, *sum, *n))
    }

    /// Sets a state's accumulated sum and count directly.
    pub fn set_entry(&mut self, state: State, sum: f64, count: u64) {
        if count == 0 {
            self.table.remove(&state);
        } else {
            self.table.insert(state, (sum, count));
        }
    }

    /// Sets a state's value as a single observation.
    pub fn set_value(&mut self, state: State, value: f64) {
        self.set_entry(state, value, 1);
    }
}

impl ValueFunction for TabularValue {
    fn evaluate(&self, state: &State) -> f64 {
        match self.table.get(state) {
            Some(&(sum, n)) if n > 0 => sum / n as f64,
            _ => self.default_value,
        }
    }

    fn kind(&self) -> &'static str {
        "tabular"
    }
}

impl TrainableValue for TabularValue {
    /// States present in `data` are replaced by the mean of their targets in
    /// `data`; other states keep their previous estimate.
    fn train(
        &mut self,
        data: &[RegressionSample],
        cfg: &TrainConfig,
    ) -> Result<Vec<f64>, ValueError> {
        cfg.check()?;
        if data.is_empty() {
            return Err(ValueError::EmptyData);
        }
        let mut fresh: HashMap<State, (f64, u64)> = HashMap::new();
        for s in data {
            let e = fresh.entry(s.state.clone()).or_insert((0.0, 0));
            e.0 += s.target;
            e.1 += 1;
        }
        self.table.extend(fresh);
        // The closed form is reached in the first epoch; later epochs are no-ops.
        let loss = mean_loss(self, data);
        if !loss.is_finite() {
            return Err(ValueError::NonfiniteLoss {
                epoch: 1,
                learning_rate: cfg.learning_rate,
            });
        }
        Ok(vec![loss; cfg.epochs])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::tokens;
    use proptest::prelude::*;

    fn sample(gen: &[u32], target: f64) -> RegressionSample {
        RegressionSample {
            state: State::with_generated(tokens(&[9]), tokens(gen)),
            target,
        }
    }

    #[test]
    fn shared_prefix_mean() {
        let mut v = TabularValue::new((0.0, 4.0));
        let data = vec![sample(&[1], 1.0), sample(&[1], 3.0)];
        let trace = v.train(&data, &TrainConfig::default()).unwrap();
        assert_eq!(v.evaluate(&data[0].state), 2.0);
        assert_eq!(trace.len(), 2);
        assert!(trace[1] <= trace[0]);
    }

    #[test]
    fn unseen_state_uses_midpoint() {
        let v = TabularValue::new((-1.0, 3.0));
        assert_eq!(v.evaluate(&State::new(vec![])), 1.0);
    }

    #[test]
    fn single_point_interpolated() {
        let mut v = TabularValue::new((0.0, 10.0));
        v.train(&[sample(&[2, 2], 5.0)], &TrainConfig::default())
            .unwrap();
        assert_eq!(v.evaluate(&sample(&[2, 2], 0.0).state), 5.0);
    }

    #[test]
    fn retraining_replaces_only_observed_states() {
        let mut v = TabularValue::new((0.0, 1.0));
        let cfg = TrainConfig::default();
        v.train(&[sample(&[1], 1.0), sample(&[2], 0.0)], &cfg).unwrap();
        v.train(&[sample(&[1], 0.0)], &cfg).unwrap();
        assert_eq!(v.evaluate(&sample(&[1], 0.0).state), 0.0);
        assert_eq!(v.evaluate(&sample(&[2], 0.0).state), 0.0);
        assert_eq!(v.entry(&sample(&[1], 0.0).state), Some((0.0, 1)));
    }

    #[test]
    fn empty_data_errors() {
        let mut v = TabularValue::new((0.0, 1.0));
        assert!(matches!(
            v.train(&[], &TrainConfig::default()),
            Err(ValueError::EmptyData)
        ));
    }

    proptest! {
        #[test]
        fn evaluates_to_target_mean_within_range(
            raw in prop::collection::vec((0u32..3, 0u32..3, -5.0f64..5.0), 1..60),
        ) {
            let data: Vec<_> = raw.iter().map(|&(a, b, t)| sample(&[a, b], t)).collect();
            let mut v = TabularValue::new((-5.0, 5.0));
            v.train(&data, &TrainConfig::default()).unwrap();
            for s in &data {
                let targets: Vec<f64> = data.iter().filter(|d| d.state == s.state).map(|d| d.target).collect();
                let mean = targets.iter().sum::<f64>() / targets.len() as f64;
                let got = v.evaluate(&s.state);
                prop_assert!((got - mean).abs() <= 1e-12);
                let lo = targets.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo - 1e-12 <= got && got <= hi + 1e-12);
            }
        }
    }
}
