//! Base policies and the next-token distributions they emit.

mod ngram;
pub mod remote;
mod softmax;
pub mod stub;
mod tabular;

pub use ngram::NGramPolicy;
pub use remote::RemotePolicyClient;
pub use softmax::LinearSoftmaxPolicy;
pub use tabular::TabularPolicy;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mdp::{MdpError, State, TokenId, Trajectory, Vocabulary};

/// Tolerance on probability normalization.
pub const NORM_TOL: f64 = 1e-9;

/// Deterministic, platform-independent RNG used for every sampling path.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes two integers into a well-spread seed (splitmix64 finalizer).
pub fn derive_seed(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("top-k width {k} outside [1, {vocab_size}]")]
    InvalidK { k: usize, vocab_size: usize },
    #[error("state {0} is terminal")]
    TerminalState(String),
    #[error("no distribution defined for state {0}")]
    UnknownState(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("backend unavailable after {attempts} attempt(s): {cause}")]
    BackendUnavailable { attempts: u32, cause: String },
    #[error("protocol violation in field `{field}`: {reason}")]
    ProtocolViolation { field: String, reason: String },
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// A categorical distribution over the vocabulary.
///
/// Sparse distributions carry an explicit tail mass for everything outside
/// the listed tokens. Sampling from a sparse distribution stays inside the
/// listed support.
#[derive(Clone, Debug, PartialEq)]
pub enum NextTokenDistribution {
    Dense(Vec<f64>),
    Sparse {
        token_ids: Vec<TokenId>,
        probs: Vec<f64>,
        tail_mass: f64,
    },
}

impl NextTokenDistribution {
    pub fn dense(probs: Vec<f64>) -> Result<Self, PolicyError> {
        let d = NextTokenDistribution::Dense(probs);
        d.check_normalized()?;
        Ok(d)
    }

    pub fn sparse(
        token_ids: Vec<TokenId>,
        probs: Vec<f64>,
        tail_mass: f64,
    ) -> Result<Self, PolicyError> {
        let d = NextTokenDistribution::Sparse {
            token_ids,
            probs,
            tail_mass,
        };
        d.check_normalized()?;
        Ok(d)
    }

    pub fn uniform(n: usize) -> Self {
        NextTokenDistribution::Dense(vec![1.0 / n as f64; n])
    }

    fn check_normalized(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::InvalidDistribution(m));
        match self {
            NextTokenDistribution::Dense(p) => {
                if p.is_empty() {
                    return bad("empty dense distribution".into());
                }
                if let Some(x) = p.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                    return bad(format!("probability {x} is not a finite nonnegative value"));
                }
                let s: f64 = p.iter().sum();
                if (s - 1.0).abs() > NORM_TOL {
                    return bad(format!("dense probabilities sum to {s}"));
                }
            }
            NextTokenDistribution::Sparse {
                token_ids,
                probs,
                tail_mass,
            } => {
                if token_ids.len() != probs.len() {
                    return bad(format!(
                        "{} token ids but {} probabilities",
                        token_ids.len(),
                        probs.len()
                    ));
                }
                if let Some(x) = probs
                    .iter()
                    .chain(std::iter::once(tail_mass))
                    .find(|x| !(x.is_finite() && **x >= 0.0))
                {
                    return bad(format!("probability {x} is not a finite nonnegative value"));
                }
                let mut seen = token_ids.clone();
                seen.sort_unstable();
                if seen.windows(2).any(|w| w[0] == w[1]) {
                    return bad("duplicate token ids".into());
                }
                let s: f64 = probs.iter().sum::<f64>() + tail_mass;
                if (s - 1.0).abs() > NORM_TOL {
                    return bad(format!("sparse probabilities plus tail sum to {s}"));
                }
            }
        }
        Ok(())
    }

    /// Checks normalization and that every token id fits the vocabulary.
    pub fn validate(&self, vocab_size: usize) -> Result<(), PolicyError> {
        self.check_normalized()?;
        match self {
            NextTokenDistribution::Dense(p) if p.len() != vocab_size => {
                Err(PolicyError::InvalidDistribution(format!(
                    "dense row of length {} for vocabulary of size {vocab_size}",
                    p.len()
                )))
            }
            NextTokenDistribution::Sparse { token_ids, .. }
                if token_ids.iter().any(|t| t.index() >= vocab_size) =>
            {
                Err(PolicyError::InvalidDistribution(
                    "token id outside vocabulary".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, NextTokenDistribution::Dense(_))
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        match self {
            NextTokenDistribution::Dense(p) => p.get(token.index()).copied().unwrap_or(0.0),
            NextTokenDistribution::Sparse {
                token_ids, probs, ..
            } => token_ids
                .iter()
                .position(|&t| t == token)
                .map_or(0.0, |i| probs[i]),
        }
    }

    /// The k most probable tokens, ties broken by smaller id.
    pub fn top_k(&self, k: usize) -> Result<NextTokenDistribution, PolicyError> {
        let (ids, probs): (Vec<TokenId>, Vec<f64>) = match self {
            NextTokenDistribution::Dense(p) => (
                (0..p.len() as u32).map(TokenId).collect(),
                p.clone(),
            ),
            NextTokenDistribution::Sparse {
                token_ids, probs, ..
            } => (token_ids.clone(), probs.clone()),
        };
        if k == 0 || (self.is_dense() && k > ids.len()) {
            return Err(PolicyError::InvalidK {
                k,
                vocab_size: ids.len(),
            });
        }
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(ids[a].cmp(&ids[b])));
        let take = k.min(order.len());
        let (kept, rest) = order.split_at(take);
        let prior_tail = match self {
            NextTokenDistribution::Sparse { tail_mass, .. } => *tail_mass,
            NextTokenDistribution::Dense(_) => 0.0,
        };
        let tail_mass = rest.iter().map(|&i| probs[i]).sum::<f64>() + prior_tail;
        Ok(NextTokenDistribution::Sparse {
            token_ids: kept.iter().map(|&i| ids[i]).collect(),
            probs: kept.iter().map(|&i| probs[i]).collect(),
            tail_mass,
        })
    }

    /// Places listed probabilities into a dense row. Fails when a nonzero
    /// tail would be lost.
    pub fn to_dense(&self, vocab_size: usize) -> Result<Vec<f64>, PolicyError> {
        match self {
            NextTokenDistribution::Dense(p) => Ok(p.clone()),
            NextTokenDistribution::Sparse {
                token_ids,
                probs,
                tail_mass,
            } => {
                if *tail_mass > NORM_TOL {
                    return Err(PolicyError::InvalidDistribution(format!(
                        "cannot densify with tail mass {tail_mass}"
                    )));
                }
                let mut row = vec![0.0; vocab_size];
                for (t, p) in token_ids.iter().zip(probs) {
                    row[t.index()] = *p;
                }
                Ok(row)
            }
        }
    }

    /// The law actually sampled by [`sample_token`], as a dense row.
    pub fn sampling_law(&self, vocab_size: usize) -> Vec<f64> {
        match self {
            NextTokenDistribution::Dense(p) => p.clone(),
            NextTokenDistribution::Sparse {
                token_ids, probs, ..
            } => {
                let z: f64 = probs.iter().sum();
                let mut row = vec![0.0; vocab_size];
                for (t, p) in token_ids.iter().zip(probs) {
                    row[t.index()] = p / z;
                }
                row
            }
        }
    }
}

/// Applies a temperature to a probability row: `softmax(ln p / T)`.
/// `T = 1` returns the row unchanged.
pub fn temper(probs: &[f64], temperature: f64) -> Result<Vec<f64>, PolicyError> {
    check_temperature(temperature)?;
    if temperature == 1.0 {
        return Ok(probs.to_vec());
    }
    let logits: Vec<f64> = probs
        .iter()
        .map(|&p| if p > 0.0 { p.ln() / temperature } else { f64::NEG_INFINITY })
        .collect();
    Ok(softmax(&logits))
}

pub fn check_temperature(temperature: f64) -> Result<(), PolicyError> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(PolicyError::InvalidTemperature(temperature))
    }
}

/// Numerically stable softmax. Entries at `-inf` get probability zero.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Draws one token by inverse CDF over the stored order. Sparse
/// distributions are renormalized within their listed support.
pub fn sample_token<R: Rng + ?Sized>(
    d: &NextTokenDistribution,
    rng: &mut R,
) -> Result<TokenId, PolicyError> {
    let (ids, probs): (Option<&[TokenId]>, &[f64]) = match d {
        NextTokenDistribution::Dense(p) => (None, p),
        NextTokenDistribution::Sparse {
            token_ids, probs, ..
        } => (Some(token_ids), probs),
    };
    if probs.iter().any(|p| p.is_nan()) {
        return Err(PolicyError::DegenerateDistribution("NaN probability".into()));
    }
    let total: f64 = probs.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(PolicyError::DegenerateDistribution("empty support".into()));
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_positive = i;
        acc += p;
        if u < acc {
            return Ok(ids.map_or(TokenId(i as u32), |ids| ids[i]));
        }
    }
    Ok(ids.map_or(TokenId(last_positive as u32), |ids| ids[last_positive]))
}

/// A frozen next-token model.
pub trait PolicyBackend: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;

    /// Whether a full-vocabulary distribution is available.
    fn supports_dense(&self) -> bool {
        true
    }

    fn supports_sampling(&self) -> bool {
        true
    }

    /// Next-token distribution at `state`, tempered by `temperature`.
    fn next_distribution(
        &self,
        state: &State,
        temperature: f64,
    ) -> Result<NextTokenDistribution, PolicyError>;

    fn top_k(
        &self,
        state: &State,
        k: usize,
        temperature: f64,
    ) -> Result<NextTokenDistribution, PolicyError> {
        let v = self.vocabulary().size();
        if k == 0 || k > v {
            return Err(PolicyError::InvalidK { k, vocab_size: v });
        }
        self.next_distribution(state, temperature)?.top_k(k)
    }
}

pub(crate) fn check_state(state: &State, vocab: &Vocabulary) -> Result<(), PolicyError> {
    if state.ends_with_eos(vocab.eos()) {
        return Err(PolicyError::TerminalState(state.key()));
    }
    Ok(())
}

/// A per-step sampling law over the full vocabulary, as used by exact
/// enumeration. Implemented by base policies, guided policies and oracle
/// solutions.
pub trait StepPolicy: Sync {
    fn step_law(&self, state: &State) -> Result<Vec<f64>, PolicyError>;
}

/// A base policy sampled at a fixed temperature.
#[derive(Clone, Copy)]
pub struct Tempered<'a> {
    pub base: &'a dyn PolicyBackend,
    pub temperature: f64,
}

impl<'a> Tempered<'a> {
    pub fn new(base: &'a dyn PolicyBackend, temperature: f64) -> Self {
        Self { base, temperature }
    }
}

impl StepPolicy for Tempered<'_> {
    fn step_law(&self, state: &State) -> Result<Vec<f64>, PolicyError> {
        let d = self.base.next_distribution(state, self.temperature)?;
        Ok(d.sampling_law(self.base.vocabulary().size()))
    }
}

/// Generates a completion token by token until eos or `max_length`,
/// drawing one uniform per step from `rng`.
pub fn rollout<R, F>(
    vocab: &Vocabulary,
    prompt: &[TokenId],
    max_length: usize,
    rng: &mut R,
    mut step: F,
) -> Result<Vec<TokenId>, PolicyError>
where
    R: Rng + ?Sized,
    F: FnMut(&State) -> Result<NextTokenDistribution, PolicyError>,
{
    if max_length == 0 {
        return Err(PolicyError::InvalidParameter("max_length must be ≥ 1".into()));
    }
    vocab.check_all(prompt)?;
    let mut state = State::new(prompt.to_vec());
    while state.generated_len() < max_length {
        let d = step(&state)?;
        let tok = sample_token(&d, rng)?;
        vocab.check(tok)?;
        state = state.extended_unchecked(tok);
        if tok == vocab.eos() {
            break;
        }
    }
    Ok(state.generated().to_vec())
}

/// Samples one unlabeled trajectory from a tempered base policy.
pub fn sample_trajectory(
    base: &dyn PolicyBackend,
    prompt: &[TokenId],
    max_length: usize,
    temperature: f64,
    seed: u64,
) -> Result<Trajectory, PolicyError> {
    let mut rng = seeded_rng(seed);
    let completion = rollout(base.vocabulary(), prompt, max_length, &mut rng, |s| {
        base.next_distribution(s, temperature)
    })?;
    Ok(Trajectory::new(prompt.to_vec(), completion, "base", 0, seed))
}
