//! Value-guided decoding on top of a frozen base policy.
//!
//! At a guided step the tempered base distribution `π_base(·|s)` is
//! reweighted as
//!
//! ```text
//! w(a) = π_base(a|s) · exp(β · V(s ⊕ a))   for a in the top-k of π_base(·|s)
//! w(a) = π_base(a|s) · exp(β · V(s))       otherwise
//! ```
//!
//! and normalized, over the full vocabulary (dense mode) or over the top-k
//! plus one aggregated tail cell (sparse mode). Blockwise decoding guides
//! only when the generated length is a multiple of the block size.

mod beam;

pub use beam::{blockwise_beam_search, blockwise_beam_search_detailed, BeamConfig, BeamOutcome};

use serde::{Deserialize, Serialize};

use crate::mdp::{State, TokenId, Trajectory};
use crate::policy::{
    check_state, check_temperature, rollout, seeded_rng, NextTokenDistribution, PolicyBackend,
    PolicyError, StepPolicy,
};
use crate::value::ValueFunction;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Normalize over the whole vocabulary. Needs a backend with full rows.
    #[default]
    Dense,
    /// Normalize over top-k plus a tail cell; sample within the top-k.
    Sparse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub beta: f64,
    pub top_k: usize,
    pub block_size: usize,
    pub temperature: f64,
    pub mode: GuidanceMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            top_k: 20,
            block_size: 4,
            temperature: 0.7,
            mode: GuidanceMode::Dense,
        }
    }
}

impl GuidanceConfig {
    pub fn check(&self) -> Result<(), PolicyError> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(PolicyError::InvalidParameter(format!(
                "beta must be finite and ≥ 0, got {}",
                self.beta
            )));
        }
        if self.top_k == 0 {
            return Err(PolicyError::InvalidParameter("top_k must be ≥ 1".into()));
        }
        if self.block_size == 0 {
            return Err(PolicyError::InvalidParameter("block_size must be ≥ 1".into()));
        }
        check_temperature(self.temperature)
    }

    /// The top-k width actually used on a vocabulary of `vocab_size` tokens.
    pub fn effective_k(&self, vocab_size: usize) -> usize {
        self.top_k.min(vocab_size)
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        Self {
            beta,
            ..self.clone()
        }
    }
}

/// `π_{V}`: a base policy guided by a value function. Borrows both; neither
/// is modified.
#[derive(Clone, Copy)]
pub struct GuidedPolicy<'a> {
    base: &'a dyn PolicyBackend,
    value: &'a dyn ValueFunction,
    cfg: &'a GuidanceConfig,
}

impl<'a> GuidedPolicy<'a> {
    pub fn new(
        base: &'a dyn PolicyBackend,
        value: &'a dyn ValueFunction,
        cfg: &'a GuidanceConfig,
    ) -> Result<Self, PolicyError> {
        cfg.check()?;
        if cfg.mode == GuidanceMode::Dense && !base.supports_dense() {
            return Err(PolicyError::InvalidParameter(
                "dense guidance needs a backend with full next-token rows; use sparse mode".into(),
            ));
        }
        Ok(Self { base, value, cfg })
    }

    pub fn base(&self) -> &'a dyn PolicyBackend {
        self.base
    }

    pub fn value(&self) -> &'a dyn ValueFunction {
        self.value
    }

    pub fn config(&self) -> &'a GuidanceConfig {
        self.cfg
    }

    /// The tempered base distribution at `state`.
    pub fn base_distribution(&self, state: &State) -> Result<NextTokenDistribution, PolicyError> {
        self.base.next_distribution(state, self.cfg.temperature)
    }

    /// The reweighted distribution at `state`. Costs `k + 1` value
    /// evaluations.
    pub fn next_distribution(&self, state: &State) -> Result<NextTokenDistribution, PolicyError> {
        let vocab = self.base.vocabulary();
        check_state(state, vocab)?;
        let v = vocab.size();
        let k = self.cfg.effective_k(v);
        match self.cfg.mode {
            GuidanceMode::Dense => {
                let p = self.base_distribution(state)?.to_dense(v)?;
                let NextTokenDistribution::Sparse { token_ids, .. } =
                    NextTokenDistribution::Dense(p.clone()).top_k(k)?
                else {
                    unreachable!("top_k returns a sparse distribution")
                };
                let (f_out, f_top) = self.tilt_factors(state, &token_ids);
                if f_out == 1.0 && f_top.iter().all(|&f| f == 1.0) {
                    return Ok(NextTokenDistribution::Dense(p));
                }
                let mut w: Vec<f64> = p.iter().map(|&x| x * f_out).collect();
                for (id, f) in token_ids.iter().zip(&f_top) {
                    w[id.index()] = p[id.index()] * f;
                }
                let z = normalizer(w.iter().sum())?;
                w.iter_mut().for_each(|x| *x /= z);
                Ok(NextTokenDistribution::Dense(w))
            }
            GuidanceMode::Sparse => {
                let d = self.base.top_k(state, k, self.cfg.temperature)?;
                let NextTokenDistribution::Sparse {
                    token_ids,
                    probs,
                    tail_mass,
                } = d
                else {
                    return Err(PolicyError::ProtocolViolation {
                        field: "top_k".into(),
                        reason: "backend returned a dense distribution".into(),
                    });
                };
                let (f_out, f_top) = self.tilt_factors(state, &token_ids);
                if f_out == 1.0 && f_top.iter().all(|&f| f == 1.0) {
                    return Ok(NextTokenDistribution::Sparse {
                        token_ids,
                        probs,
                        tail_mass,
                    });
                }
                let mut w: Vec<f64> = probs.iter().zip(&f_top).map(|(p, f)| p * f).collect();
                let tail = tail_mass * f_out;
                let z = normalizer(w.iter().sum::<f64>() + tail)?;
                w.iter_mut().for_each(|x| *x /= z);
                Ok(NextTokenDistribution::Sparse {
                    token_ids,
                    probs: w,
                    tail_mass: tail / z,
                })
            }
        }
    }

    /// `exp(β(V(s) − m))` and `exp(β(V(s ⊕ a) − m))` for each listed token,
    /// with `m` the largest of those values.
    fn tilt_factors(&self, state: &State, ids: &[TokenId]) -> (f64, Vec<f64>) {
        let v_prefix = self.value.evaluate(state);
        let v_top: Vec<f64> = ids
            .iter()
            .map(|&a| self.value.evaluate(&state.extended_unchecked(a)))
            .collect();
        let m = v_top.iter().copied().fold(v_prefix, f64::max);
        let beta = self.cfg.beta;
        let f = |x: f64| if beta == 0.0 { 1.0 } else { (beta * (x - m)).exp() };
        (f(v_prefix), v_top.into_iter().map(f).collect())
    }

    pub fn is_guided_step(&self, state: &State) -> bool {
        state.generated_len() % self.cfg.block_size == 0
    }

    /// Blockwise step: guided at block boundaries, tempered base elsewhere.
    pub fn blockwise_distribution(
        &self,
        state: &State,
    ) -> Result<NextTokenDistribution, PolicyError> {
        if self.is_guided_step(state) {
            self.next_distribution(state)
        } else {
            check_state(state, self.base.vocabulary())?;
            self.base_distribution(state)
        }
    }

    /// Guided at every step.
    pub fn sample_tokenwise(
        &self,
        prompt: &[TokenId],
        max_length: usize,
        seed: u64,
    ) -> Result<Trajectory, PolicyError> {
        let mut rng = seeded_rng(seed);
        let completion = rollout(self.base.vocabulary(), prompt, max_length, &mut rng, |s| {
            self.next_distribution(s)
        })?;
        Ok(Trajectory::new(prompt.to_vec(), completion, TOKENWISE_TAG, 0, seed))
    }

    /// Guided only at block boundaries.
    pub fn sample_blockwise(
        &self,
        prompt: &[TokenId],
        max_length: usize,
        seed: u64,
    ) -> Result<Trajectory, PolicyError> {
        let mut rng = seeded_rng(seed);
        let completion = rollout(self.base.vocabulary(), prompt, max_length, &mut rng, |s| {
            self.blockwise_distribution(s)
        })?;
        Ok(Trajectory::new(
            prompt.to_vec(),
            completion,
            blockwise_tag(self.cfg.block_size),
            0,
            seed,
        ))
    }
}

fn normalizer(z: f64) -> Result<f64, PolicyError> {
    if z > 0.0 && z.is_finite() {
        Ok(z)
    } else {
        Err(PolicyError::DegenerateDistribution(format!(
            "guided weights sum to {z}"
        )))
    }
}

pub const TOKENWISE_TAG: &str = "guided-tokenwise";

pub fn blockwise_tag(block_size: usize) -> String {
    format!("guided-blockwise-b{block_size}")
}

/// The blockwise sampling law. Use `block_size = 1` for the tokenwise law.
impl StepPolicy for GuidedPolicy<'_> {
    fn step_law(&self, state: &State) -> Result<Vec<f64>, PolicyError> {
        Ok(self
            .blockwise_distribution(state)?
            .sampling_law(self.base.vocabulary().size()))
    }
}

/// Anything that turns `(prompt, seed)` into an unlabeled trajectory.
pub trait TrajectorySampler: Sync {
    fn sample(
        &self,
        prompt: &[TokenId],
        max_length: usize,
        seed: u64,
    ) -> Result<Trajectory, PolicyError>;
}

/// Plain tempered base sampling.
pub struct BaseSampler<'a> {
    pub base: &'a dyn PolicyBackend,
    pub temperature: f64,
}

impl TrajectorySampler for BaseSampler<'_> {
    fn sample(
        &self,
        prompt: &[TokenId],
        max_length: usize,
        seed: u64,
    ) -> Result<Trajectory, PolicyError> {
        crate::policy::sample_trajectory(self.base, prompt, max_length, self.temperature, seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Tokenwise,
    Blockwise,
}

pub struct GuidedSampler<'a> {
    pub policy: GuidedPolicy<'a>,
    pub mode: DecodeMode,
}

impl TrajectorySampler for GuidedSampler<'_> {
    fn sample(
        &self,
        prompt: &[TokenId],
        max_length: usize,
        seed: u64,
    ) -> Result<Trajectory, PolicyError> {
        match self.mode {
            DecodeMode::Tokenwise => self.policy.sample_tokenwise(prompt, max_length, seed),
            DecodeMode::Blockwise => self.policy.sample_blockwise(prompt, max_length, seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{tokens, Vocabulary};
    use crate::policy::{sample_trajectory, NGramPolicy, TabularPolicy};
    use crate::value::{FnValue, CountingValue};
    use proptest::prelude::*;

    fn vocab3_policy() -> TabularPolicy {
        let mut p = TabularPolicy::new(Vocabulary::new(3, TokenId(2)).unwrap());
        p.insert(State::new(tokens(&[1])), vec![0.5, 0.3, 0.2]).unwrap();
        p
    }

    fn cfg(beta: f64, k: usize) -> GuidanceConfig {
        GuidanceConfig {
            beta,
            top_k: k,
            block_size: 1,
            temperature: 1.0,
            mode: GuidanceMode::Dense,
        }
    }

    /// 1 for the extension by token 0, 0 everywhere else.
    fn first_token_value() -> FnValue<impl Fn(&State) -> f64 + Send + Sync> {
        FnValue(|s: &State| if s.generated() == tokens(&[0]).as_slice() { 1.0 } else { 0.0 })
    }

    #[test]
    fn reweighting_example() {
        let base = vocab3_policy();
        let v = first_token_value();
        let c = cfg(1.0, 2);
        let g = GuidedPolicy::new(&base, &v, &c).unwrap();
        let d = g.next_distribution(&State::new(tokens(&[1]))).unwrap();
        let e = std::f64::consts::E;
        let z = 0.5 * e + 0.5;
        let want = [0.5 * e / z, 0.3 / z, 0.2 / z];
        for (a, b) in d.to_dense(3).unwrap().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        // Recomputed independently: 0.5e / (0.5e + 0.5) etc.
        assert!((want[0] - 0.7310585786300049).abs() < 1e-15);
        assert!((want[1] - 0.16136485282199704).abs() < 1e-15);
        assert!((want[2] - 0.10757656854799804).abs() < 1e-15);
    }

    #[test]
    fn sparse_mode_keeps_tail_cell() {
        let base = vocab3_policy();
        let v = first_token_value();
        let c = GuidanceConfig {
            mode: GuidanceMode::Sparse,
            ..cfg(1.0, 2)
        };
        let g = GuidedPolicy::new(&base, &v, &c).unwrap();
        let d = g.next_distribution(&State::new(tokens(&[1]))).unwrap();
        let NextTokenDistribution::Sparse { token_ids, probs, tail_mass } = &d else {
            panic!("expected sparse")
        };
        assert_eq!(token_ids, &tokens(&[0, 1]));
        assert!((tail_mass - 0.10757656854799804).abs() < 1e-15);
        assert!((probs[0] - 0.7310585786300049).abs() < 1e-15);
        let law = d.sampling_law(3);
        assert_eq!(law[2], 0.0);
        assert!((law[0] - 0.5 * std::f64::consts::E / (0.5 * std::f64::consts::E + 0.3)).abs() < 1e-14);
    }

    #[test]
    fn beta_zero_is_base_exactly() {
        let base = vocab3_policy();
        let v = first_token_value();
        let c = GuidanceConfig {
            temperature: 0.7,
            ..cfg(0.0, 2)
        };
        let g = GuidedPolicy::new(&base, &v, &c).unwrap();
        let s = State::new(tokens(&[1]));
        assert_eq!(
            g.next_distribution(&s).unwrap(),
            base.next_distribution(&s, 0.7).unwrap()
        );
        for seed in 0..20 {
            let a = g.sample_tokenwise(&tokens(&[1]), 6, seed).unwrap();
            let b = sample_trajectory(&base, &tokens(&[1]), 6, 0.7, seed).unwrap();
            assert_eq!(a.completion, b.completion);
        }
    }

    #[test]
    fn large_beta_picks_argmax_value() {
        let base = vocab3_policy();
        let v = first_token_value();
        let c = cfg(200.0, 3);
        let g = GuidedPolicy::new(&base, &v, &c).unwrap();
        let d = g.next_distribution(&State::new(tokens(&[1]))).unwrap();
        assert!(d.prob(TokenId(0)) > 1.0 - 1e-12);
    }

    #[test]
    fn counts_k_plus_one_evaluations() {
        let base = vocab3_policy();
        let inner = first_token_value();
        let v = CountingValue::new(&inner);
        let c = cfg(1.0, 2);
        let g = GuidedPolicy::new(&base, &v, &c).unwrap();
        g.next_distribution(&State::new(tokens(&[1]))).unwrap();
        assert_eq!(v.count(), 3);
    }

    #[test]
    fn blockwise_guides_only_on_boundaries() {
        let base = vocab3_policy();
        let inner = first_token_value();
        let v = CountingValue::new(&inner);
        let c = GuidanceConfig {
            block_size: 2,
            ..cfg(1.0, 20)
        };
        let g = GuidedPolicy::new(&base, &v, &c).unwrap();
        let s = State::with_generated(tokens(&[1]), tokens(&[0]));
        assert_eq!(
            g.blockwise_distribution(&s).unwrap(),
            base.next_distribution(&s, 1.0).unwrap()
        );
        assert_eq!(v.count(), 0);
        g.blockwise_distribution(&State::new(tokens(&[1]))).unwrap();
        assert_eq!(v.count(), 4);
    }

    #[test]
    fn block_size_beyond_horizon_guides_first_step_only() {
        let base = vocab3_policy();
        let inner = FnValue(|s: &State| s.generated().len() as f64);
        let v = CountingValue::new(&inner);
        let c = GuidanceConfig {
            block_size: 10,
            ..cfg(1.0, 3)
        };
        let g = GuidedPolicy::new(&base, &v, &c).unwrap();
        for seed in 0..10 {
            v.reset();
            let t = g.sample_blockwise(&tokens(&[1]), 5, seed).unwrap();
            assert_eq!(v.count(), 4, "{t:?}");
            assert_eq!(t.policy_tag, "guided-blockwise-b10");
        }
    }

    #[test]
    fn block_one_matches_tokenwise() {
        let vocab = Vocabulary::new(4, TokenId(0)).unwrap();
        let base = NGramPolicy::fit(vocab, &[tokens(&[1, 2, 3, 1, 0]), tokens(&[2, 2, 0])], 2, 0.5).unwrap();
        let v = FnValue(|s: &State| s.generated().iter().filter(|t| t.0 == 3).count() as f64);
        let c = GuidanceConfig {
            block_size: 1,
            top_k: 2,
            ..GuidanceConfig::default()
        };
        let g = GuidedPolicy::new(&base, &v, &c).unwrap();
        for seed in 0..50 {
            let a = g.sample_tokenwise(&tokens(&[1]), 8, seed).unwrap();
            let b = g.sample_blockwise(&tokens(&[1]), 8, seed).unwrap();
            assert_eq!(a.completion, b.completion);
            assert_eq!(a.policy_tag, "guided-tokenwise");
            assert_eq!(b.policy_tag, "guided-blockwise-b1");
        }
    }

    #[test]
    fn rejects_bad_config() {
        let base = vocab3_policy();
        let v = first_token_value();
        for c in [cfg(-1.0, 2), cfg(f64::INFINITY, 2), cfg(1.0, 0)] {
            assert!(GuidedPolicy::new(&base, &v, &c).is_err());
        }
        let c = GuidanceConfig {
            block_size: 0,
            ..cfg(1.0, 2)
        };
        assert!(GuidedPolicy::new(&base, &v, &c).is_err());
    }

    #[test]
    fn terminal_state_is_rejected() {
        let base = vocab3_policy();
        let v = first_token_value();
        let c = cfg(1.0, 2);
        let g = GuidedPolicy::new(&base, &v, &c).unwrap();
        let s = State::with_generated(tokens(&[1]), tokens(&[2]));
        assert!(matches!(g.next_distribution(&s), Err(PolicyError::TerminalState(_))));
    }

    proptest! {
        #[test]
        fn invariances(
            row in prop::collection::vec(0.01f64..1.0, 6),
            vals in prop::collection::vec(-3.0f64..3.0, 7),
            shift in -50.0f64..50.0,
            beta in 0.0f64..5.0,
            k in 1usize..6,
        ) {
            let total: f64 = row.iter().sum();
            let row: Vec<f64> = row.iter().map(|x| x / total).collect();
            let mut base = TabularPolicy::new(Vocabulary::new(6, TokenId(5)).unwrap());
            let s = State::new(tokens(&[0]));
            base.insert(s.clone(), row.clone()).unwrap();
            let value_of = move |st: &State, c: f64| match st.generated().first() {
                Some(t) => vals[t.index()] + c,
                None => vals[6] + c,
            };
            let c = cfg(beta, k);
            let v0 = FnValue(|st: &State| value_of(st, 0.0));
            let v1 = FnValue(|st: &State| value_of(st, shift));
            let d0 = GuidedPolicy::new(&base, &v0, &c).unwrap().next_distribution(&s).unwrap().to_dense(6).unwrap();
            let d1 = GuidedPolicy::new(&base, &v1, &c).unwrap().next_distribution(&s).unwrap().to_dense(6).unwrap();
            prop_assert!((d0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in d0.iter().zip(&d1) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
            let NextTokenDistribution::Sparse { token_ids, .. } = NextTokenDistribution::Dense(row.clone()).top_k(k).unwrap() else { unreachable!() };
            let outside: Vec<usize> = (0..6).filter(|i| !token_ids.iter().any(|t| t.index() == *i)).collect();
            for &a in &outside {
                for &b in &outside {
                    let r = (d0[a] / d0[b]) / (row[a] / row[b]);
                    prop_assert!((r - 1.0).abs() <= 1e-9);
                }
            }
        }
    }
}
