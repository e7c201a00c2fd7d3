//! Token-level MDP: vocabularies, states with concatenation transitions,
//! and sampled trajectories.
//!
//! A state is a prompt plus the tokens generated so far. The only transition
//! is appending one token; an episode ends when the end-of-sequence token is
//! generated or the task's length cap is reached. Rewards are terminal.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("cannot extend a terminal state")]
    ExtendingTerminalState,
    #[error("token {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("trajectory invariant violated: {0}")]
    InvariantViolation(String),
    #[error("reward already set on trajectory")]
    RewardAlreadySet,
    #[error("malformed state key {0:?}")]
    MalformedKey(String),
    #[error("malformed trajectory record: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A vocabulary index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Convenience for building token sequences from plain integers.
pub fn tokens(ids: &[u32]) -> Vec<TokenId> {
    ids.iter().copied().map(TokenId).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    eos: TokenId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
}

impl Vocabulary {
    pub fn new(size: usize, eos: TokenId) -> Result<Self, MdpError> {
        Self::with_names(size, eos, None)
    }

    pub fn with_names(
        size: usize,
        eos: TokenId,
        names: Option<Vec<String>>,
    ) -> Result<Self, MdpError> {
        if size == 0 {
            return Err(MdpError::InvalidVocabulary("size must be positive".into()));
        }
        if eos.index() >= size {
            return Err(MdpError::InvalidVocabulary(format!(
                "eos {} outside vocabulary of size {size}",
                eos.0
            )));
        }
        if let Some(n) = &names {
            if n.len() != size {
                return Err(MdpError::InvalidVocabulary(format!(
                    "{} names for a vocabulary of size {size}",
                    n.len()
                )));
            }
        }
        Ok(Self { size, eos, names })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn check(&self, token: TokenId) -> Result<(), MdpError> {
        if token.index() < self.size {
            Ok(())
        } else {
            Err(MdpError::TokenOutOfRange {
                token: token.0,
                vocab_size: self.size,
            })
        }
    }

    pub fn check_all(&self, seq: &[TokenId]) -> Result<(), MdpError> {
        seq.iter().try_for_each(|&t| self.check(t))
    }

    pub fn all_tokens(&self) -> impl Iterator<Item = TokenId> {
        (0..self.size as u32).map(TokenId)
    }
}

/// `x ⊕ y_{≤t}`: prompt tokens plus generated tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct State {
    prompt: Vec<TokenId>,
    generated: Vec<TokenId>,
}

impl State {
    pub fn new(prompt: Vec<TokenId>) -> Self {
        Self {
            prompt,
            generated: Vec::new(),
        }
    }

    pub fn with_generated(prompt: Vec<TokenId>, generated: Vec<TokenId>) -> Self {
        Self { prompt, generated }
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.generated
    }

    pub fn generated_len(&self) -> usize {
        self.generated.len()
    }

    /// Prompt followed by generated tokens.
    pub fn full_sequence(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.prompt.iter().chain(self.generated.iter()).copied()
    }

    pub fn ends_with_eos(&self, eos: TokenId) -> bool {
        self.generated.last() == Some(&eos)
    }

    /// Terminal under the episode rules: eos generated or length cap reached.
    pub fn is_terminal(&self, eos: TokenId, max_length: usize) -> bool {
        self.ends_with_eos(eos) || self.generated.len() >= max_length
    }

    /// The transition `f(s, a) = s ⊕ a`.
    pub fn extend(&self, token: TokenId, vocab: &Vocabulary) -> Result<State, MdpError> {
        vocab.check(token)?;
        if self.ends_with_eos(vocab.eos()) {
            return Err(MdpError::ExtendingTerminalState);
        }
        Ok(self.extended_unchecked(token))
    }

    pub(crate) fn extended_unchecked(&self, token: TokenId) -> State {
        let mut generated = Vec::with_capacity(self.generated.len() + 1);
        generated.extend_from_slice(&self.generated);
        generated.push(token);
        State {
            prompt: self.prompt.clone(),
            generated,
        }
    }

    /// Prefix of the generated part with `len` tokens.
    pub fn truncated(&self, len: usize) -> State {
        State {
            prompt: self.prompt.clone(),
            generated: self.generated[..len.min(self.generated.len())].to_vec(),
        }
    }

    /// Canonical key: `p0,p1|g0,g1`.
    pub fn key(&self) -> String {
        fn join(seq: &[TokenId]) -> String {
            seq.iter()
                .map(|t| t.0.to_string())
                .collect::<Vec<_>>()
                .join(",")
        }
        format!("{}|{}", join(&self.prompt), join(&self.generated))
    }

    pub fn parse_key(key: &str) -> Result<State, MdpError> {
        let bad = || MdpError::MalformedKey(key.chars().take(64).collect());
        let (p, g) = key.split_once('|').ok_or_else(bad)?;
        let parse = |s: &str| -> Result<Vec<TokenId>, MdpError> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|t| t.parse::<u32>().map(TokenId).map_err(|_| bad()))
                .collect()
        };
        Ok(State {
            prompt: parse(p)?,
            generated: parse(g)?,
        })
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// A prompt, its sampled completion and (once scored) the terminal reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub prompt: Vec<TokenId>,
    pub completion: Vec<TokenId>,
    reward: Option<f64>,
    pub policy_tag: String,
    pub iteration: u32,
    pub seed: u64,
}

impl Trajectory {
    pub fn new(
        prompt: Vec<TokenId>,
        completion: Vec<TokenId>,
        policy_tag: impl Into<String>,
        iteration: u32,
        seed: u64,
    ) -> Self {
        Self {
            prompt,
            completion,
            reward: None,
            policy_tag: policy_tag.into(),
            iteration,
            seed,
        }
    }

    pub fn reward(&self) -> Option<f64> {
        self.reward
    }

    pub fn is_labeled(&self) -> bool {
        self.reward.is_some()
    }

    /// Sets the reward. A reward can be set once.
    pub fn set_reward(&mut self, reward: f64) -> Result<(), MdpError> {
        if self.reward.is_some() {
            return Err(MdpError::RewardAlreadySet);
        }
        self.reward = Some(reward);
        Ok(())
    }

    pub fn with_reward(mut self, reward: f64) -> Result<Self, MdpError> {
        self.set_reward(reward)?;
        Ok(self)
    }

    pub fn final_state(&self) -> State {
        State::with_generated(self.prompt.clone(), self.completion.clone())
    }

    /// States `x ⊕ y_{≤t}` for `t = 1..=|y|`.
    pub fn prefix_states(&self) -> impl Iterator<Item = State> + '_ {
        (1..=self.completion.len())
            .map(|t| State::with_generated(self.prompt.clone(), self.completion[..t].to_vec()))
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), MdpError> {
        vocab.check_all(&self.prompt)?;
        vocab.check_all(&self.completion)?;
        if self.completion.is_empty() {
            return Err(MdpError::InvariantViolation("empty completion".into()));
        }
        let eos = vocab.eos();
        if let Some(pos) = self.completion.iter().position(|&t| t == eos) {
            if pos + 1 != self.completion.len() {
                return Err(MdpError::InvariantViolation(format!(
                    "eos at position {pos} is not the final token"
                )));
            }
        }
        if let Some(r) = self.reward {
            if !r.is_finite() {
                return Err(MdpError::InvariantViolation(format!("non-finite reward {r}")));
            }
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory serialization is infallible")
    }

    pub fn from_json_line(line: &str) -> Result<Self, MdpError> {
        Ok(serde_json::from_str(line)?)
    }
}

/// Prompts and episode length cap shared by every component of an experiment.
#[derive(Clone, Debug)]
pub struct Task {
    pub vocabulary: Vocabulary,
    pub prompts: Vec<Vec<TokenId>>,
    pub max_length: usize,
}
