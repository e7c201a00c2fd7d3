use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mdp::{State, TokenId, Trajectory};
use crate::policy::{
    check_temperature, sample_token, seeded_rng, PolicyBackend, PolicyError, SeededRng,
};
use crate::value::ValueFunction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub block_size: usize,
    pub max_length: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 4,
            block_size: 2,
            max_length: 5,
            temperature: 0.7,
            seed: 0,
        }
    }
}

impl BeamConfig {
    pub fn check(&self) -> Result<(), PolicyError> {
        if self.beam_width == 0 {
            return Err(PolicyError::InvalidParameter("beam_width must be ≥ 1".into()));
        }
        if self.block_size == 0 {
            return Err(PolicyError::InvalidParameter("block_size must be ≥ 1".into()));
        }
        if self.max_length == 0 {
            return Err(PolicyError::InvalidParameter("max_length must be ≥ 1".into()));
        }
        check_temperature(self.temperature)
    }

    pub fn tag(&self) -> String {
        format!("beam-B{}-b{}", self.beam_width, self.block_size)
    }
}

/// Everything a search produced, for inspection.
#[derive(Clone, Debug)]
pub struct BeamOutcome {
    pub trajectory: Trajectory,
    pub value: f64,
    /// Every completed sequence ever kept in the beam, with its value.
    pub completed: Vec<(State, f64)>,
    /// Candidates ranked out of the beam in the last round.
    pub pruned_final: Vec<(State, f64)>,
    pub rounds: usize,
}

/// Highest value first, then lexicographic order of the generated tokens.
fn rank(a: &(State, f64), b: &(State, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.generated().cmp(b.0.generated()))
}

fn is_finished(s: &State, eos: TokenId, max_length: usize) -> bool {
    s.is_terminal(eos, max_length)
}

fn sample_block(
    base: &dyn PolicyBackend,
    from: &State,
    cfg: &BeamConfig,
    rng: &mut SeededRng,
) -> Result<State, PolicyError> {
    let vocab = base.vocabulary();
    let mut s = from.clone();
    for _ in 0..cfg.block_size {
        if is_finished(&s, vocab.eos(), cfg.max_length) {
            break;
        }
        let d = base.next_distribution(&s, cfg.temperature)?;
        let tok = sample_token(&d, rng)?;
        vocab.check(tok)?;
        s = s.extended_unchecked(tok);
    }
    Ok(s)
}

pub fn blockwise_beam_search(
    base: &dyn PolicyBackend,
    value: &dyn ValueFunction,
    prompt: &[TokenId],
    cfg: &BeamConfig,
) -> Result<Trajectory, PolicyError> {
    Ok(blockwise_beam_search_detailed(base, value, prompt, cfg)?.trajectory)
}

/// Keeps `B` candidates. Each round every unfinished candidate samples `B`
/// blocks of up to `b` tokens from the tempered base; the extensions and the
/// finished candidates are ranked by value and the best `B` distinct states
/// are kept. Stops once every kept candidate is finished and returns the
/// best completed sequence seen.
pub fn blockwise_beam_search_detailed(
    base: &dyn PolicyBackend,
    value: &dyn ValueFunction,
    prompt: &[TokenId],
    cfg: &BeamConfig,
) -> Result<BeamOutcome, PolicyError> {
    cfg.check()?;
    let vocab = base.vocabulary();
    vocab.check_all(prompt)?;
    let eos = vocab.eos();
    let mut rng = seeded_rng(cfg.seed);
    let mut cache: HashMap<State, f64> = HashMap::new();
    let mut completed: Vec<(State, f64)> = Vec::new();
    let mut seen_completed: HashSet<State> = HashSet::new();
    let mut beam: Vec<(State, f64)> = vec![(State::new(prompt.to_vec()), f64::NAN)];
    let mut pruned_final = Vec::new();
    let mut rounds = 0;

    while beam.iter().any(|(s, _)| !is_finished(s, eos, cfg.max_length)) {
        rounds += 1;
        let mut pool: Vec<State> = Vec::new();
        for (s, _) in &beam {
            if is_finished(s, eos, cfg.max_length) {
                pool.push(s.clone());
                continue;
            }
            for _ in 0..cfg.beam_width {
                pool.push(sample_block(base, s, cfg, &mut rng)?);
            }
        }
        let mut seen = HashSet::new();
        pool.retain(|s| seen.insert(s.clone()));

        let fresh: Vec<&State> = pool.iter().filter(|s| !cache.contains_key(*s)).collect();
        let scores: Vec<f64> = if fresh.len() >= 32 {
            fresh.par_iter().map(|s| value.evaluate(s)).collect()
        } else {
            fresh.iter().map(|s| value.evaluate(s)).collect()
        };
        for (s, v) in fresh.into_iter().zip(scores) {
            cache.insert(s.clone(), v);
        }
        let mut ranked: Vec<(State, f64)> = pool
            .into_iter()
            .map(|s| {
                let v = cache[&s];
                (s, v)
            })
            .collect();
        ranked.sort_by(rank);
        pruned_final = ranked.split_off(cfg.beam_width.min(ranked.len()));
        beam = ranked;
        for (s, v) in &beam {
            if is_finished(s, eos, cfg.max_length) && seen_completed.insert(s.clone()) {
                completed.push((s.clone(), *v));
            }
        }
    }

    let best = completed
        .iter()
        .min_by(|a, b| rank(a, b))
        .cloned()
        .expect("the final beam holds at least one completed sequence");
    let trajectory = Trajectory::new(
        prompt.to_vec(),
        best.0.generated().to_vec(),
        cfg.tag(),
        0,
        cfg.seed,
    );
    Ok(BeamOutcome {
        trajectory,
        value: best.1,
        completed,
        pruned_final,
        rounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{tokens, Vocabulary};
    use crate::policy::{sample_trajectory, NGramPolicy};
    use crate::value::FnValue;

    fn base() -> NGramPolicy {
        let vocab = Vocabulary::new(5, TokenId(0)).unwrap();
        NGramPolicy::fit(
            vocab,
            &[tokens(&[1, 2, 3, 0]), tokens(&[2, 4, 4, 1, 0]), tokens(&[3, 3, 0])],
            2,
            0.5,
        )
        .unwrap()
    }

    fn count_fours() -> FnValue<impl Fn(&State) -> f64 + Send + Sync> {
        FnValue(|s: &State| s.generated().iter().filter(|t| t.0 == 4).count() as f64)
    }

    fn cfg(b_width: usize, block: usize, seed: u64) -> BeamConfig {
        BeamConfig {
            beam_width: b_width,
            block_size: block,
            max_length: 6,
            temperature: 0.7,
            seed,
        }
    }

    #[test]
    fn width_one_is_plain_base_sampling() {
        let p = base();
        let v = count_fours();
        for seed in 0..30 {
            let beam = blockwise_beam_search(&p, &v, &tokens(&[1]), &cfg(1, 2, seed)).unwrap();
            let plain = sample_trajectory(&p, &tokens(&[1]), 6, 0.7, seed).unwrap();
            assert_eq!(beam.completion, plain.completion);
            assert_eq!(beam.policy_tag, "beam-B1-b2");
            assert!(!beam.is_labeled());
        }
    }

    #[test]
    fn returns_best_completed_and_beats_pruned() {
        let p = base();
        let v = count_fours();
        for seed in 0..30 {
            let out = blockwise_beam_search_detailed(&p, &v, &tokens(&[2]), &cfg(3, 2, seed)).unwrap();
            let max = out.completed.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(out.value, max);
            assert!(out.pruned_final.iter().all(|c| c.1 <= out.value));
            assert_eq!((v.0)(&out.trajectory.final_state()), out.value);
            let fin = out.trajectory.final_state();
            assert!(fin.is_terminal(TokenId(0), 6));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let p = base();
        let v = count_fours();
        let a = blockwise_beam_search(&p, &v, &tokens(&[1]), &cfg(4, 2, 11)).unwrap();
        let b = blockwise_beam_search(&p, &v, &tokens(&[1]), &cfg(4, 2, 11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn value_ties_break_lexicographically() {
        let p = base();
        let flat = FnValue(|_: &State| 0.0);
        for seed in 0..10 {
            let out = blockwise_beam_search_detailed(&p, &flat, &tokens(&[1]), &cfg(4, 1, seed)).unwrap();
            let smallest = out.completed.iter().map(|c| c.0.generated().to_vec()).min().unwrap();
            assert_eq!(out.trajectory.completion, smallest);
        }
    }

    #[test]
    fn wider_beam_finds_more_value() {
        let p = base();
        let v = count_fours();
        let mean = |w: usize| {
            (0..40)
                .map(|seed| {
                    blockwise_beam_search_detailed(&p, &v, &tokens(&[1]), &cfg(w, 2, seed))
                        .unwrap()
                        .value
                })
                .sum::<f64>()
                / 40.0
        };
        assert!(mean(4) > mean(1));
    }

    #[test]
    fn rejects_zero_width() {
        let p = base();
        let v = count_fours();
        assert!(blockwise_beam_search(&p, &v, &tokens(&[1]), &cfg(0, 2, 0)).is_err());
    }
}
