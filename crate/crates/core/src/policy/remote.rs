//! Client for external next-token servers.
//!
//! Wire protocol, JSON over HTTP:
//!
//! ```text
//! POST /v1/next_token_distribution
//! request:  {"context":[int...],"k":int,"temperature":float}
//! response: {"token_ids":[int...],"logprobs":[float...],"tail_logprob":float}
//! ```
//!
//! `exp(tail_logprob)` is the mass outside the returned tokens; a zero tail
//! is encoded as `-1e30`. Any status other than 200 is treated as the
//! backend being unavailable.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{check_state, check_temperature, NextTokenDistribution, PolicyBackend, PolicyError};
use crate::mdp::{State, TokenId, Vocabulary};

pub const ROUTE: &str = "/v1/next_token_distribution";

/// Normalization tolerance applied to server payloads.
pub const WIRE_TOL: f64 = 1e-6;

/// Log-probability used on the wire for zero mass.
pub const ZERO_LOGPROB: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    pub context: Vec<u32>,
    pub k: usize,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub token_ids: Vec<i64>,
    pub logprobs: Vec<f64>,
    pub tail_logprob: f64,
}

impl WireResponse {
    /// Encodes a sparse distribution for the wire.
    pub fn from_distribution(d: &NextTokenDistribution) -> Self {
        let ln = |p: f64| if p > 0.0 { p.ln() } else { ZERO_LOGPROB };
        match d {
            NextTokenDistribution::Dense(p) => WireResponse {
                token_ids: (0..p.len() as i64).collect(),
                logprobs: p.iter().map(|&x| ln(x)).collect(),
                tail_logprob: ZERO_LOGPROB,
            },
            NextTokenDistribution::Sparse {
                token_ids,
                probs,
                tail_mass,
            } => WireResponse {
                token_ids: token_ids.iter().map(|t| i64::from(t.0)).collect(),
                logprobs: probs.iter().map(|&x| ln(x)).collect(),
                tail_logprob: ln(*tail_mass),
            },
        }
    }
}

fn violation(field: &str, reason: impl Into<String>) -> PolicyError {
    PolicyError::ProtocolViolation {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Decodes and validates a server response body, then renormalizes it.
pub fn parse_response(
    body: &[u8],
    k: usize,
    vocab_size: usize,
) -> Result<NextTokenDistribution, PolicyError> {
    let resp: WireResponse =
        serde_json::from_slice(body).map_err(|e| violation("body", e.to_string()))?;
    if resp.token_ids.len() != resp.logprobs.len() {
        return Err(violation(
            "logprobs",
            format!(
                "{} logprobs for {} token ids",
                resp.logprobs.len(),
                resp.token_ids.len()
            ),
        ));
    }
    if resp.token_ids.len() > k {
        return Err(violation(
            "token_ids",
            format!("{} entries exceed k={k}", resp.token_ids.len()),
        ));
    }
    let mut ids = Vec::with_capacity(resp.token_ids.len());
    for &id in &resp.token_ids {
        if id < 0 || id as u64 >= vocab_size as u64 {
            return Err(violation(
                "token_ids",
                format!("id {id} outside vocabulary of size {vocab_size}"),
            ));
        }
        let t = TokenId(id as u32);
        if ids.contains(&t) {
            return Err(violation("token_ids", format!("duplicate id {id}")));
        }
        ids.push(t);
    }
    let to_prob = |field: &str, lp: f64| -> Result<f64, PolicyError> {
        if lp.is_nan() || lp > WIRE_TOL {
            return Err(violation(field, format!("invalid log-probability {lp}")));
        }
        Ok(lp.exp())
    };
    let probs: Vec<f64> = resp
        .logprobs
        .iter()
        .map(|&lp| to_prob("logprobs", lp))
        .collect::<Result<_, _>>()?;
    let tail = to_prob("tail_logprob", resp.tail_logprob)?;
    let total = probs.iter().sum::<f64>() + tail;
    if (total - 1.0).abs() > WIRE_TOL {
        return Err(violation(
            "logprobs",
            format!("probabilities plus tail sum to {total}"),
        ));
    }
    NextTokenDistribution::sparse(
        ids,
        probs.iter().map(|p| p / total).collect(),
        tail / total,
    )
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("limiter lock");
        while *n == 0 {
            n = self.freed.wait(n).expect("limiter lock");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("limiter lock") += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug)]
pub struct RemotePolicyClient {
    url: String,
    vocab: Vocabulary,
    retry_budget: u32,
    agent: ureq::Agent,
    limiter: Limiter,
}

impl RemotePolicyClient {
    /// `endpoint` is the server root, e.g. `http://127.0.0.1:8080`.
    /// `retry_budget` counts retries after the first attempt.
    pub fn new(
        endpoint: &str,
        vocab: Vocabulary,
        timeout: Duration,
        retry_budget: u32,
        max_in_flight: usize,
    ) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self {
            url: format!("{}{ROUTE}", endpoint.trim_end_matches('/')),
            vocab,
            retry_budget,
            agent,
            limiter: Limiter::new(max_in_flight),
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// One logical request for the top-k distribution at `state`, retried on
    /// transport failures and 5xx responses.
    pub fn next_top_k(
        &self,
        state: &State,
        k: usize,
        temperature: f64,
    ) -> Result<NextTokenDistribution, PolicyError> {
        check_state(state, &self.vocab)?;
        check_temperature(temperature)?;
        if k == 0 || k > self.vocab.size() {
            return Err(PolicyError::InvalidK {
                k,
                vocab_size: self.vocab.size(),
            });
        }
        let body = serde_json::to_string(&WireRequest {
            context: state.full_sequence().map(|t| t.0).collect(),
            k,
            temperature,
        })
        .expect("request serialization");
        let _permit = self.limiter.acquire();
        let mut attempts = 0;
        loop {
            attempts += 1;
            let outcome = self
                .agent
                .post(&self.url)
                .set("Content-Type", "application/json")
                .send_string(&body);
            let (retryable, cause) = match outcome {
                Ok(resp) if resp.status() == 200 => {
                    let text = resp.into_string().map_err(|e| {
                        PolicyError::BackendUnavailable {
                            attempts,
                            cause: format!("reading body: {e}"),
                        }
                    })?;
                    return parse_response(text.as_bytes(), k, self.vocab.size());
                }
                Ok(resp) => (false, format!("status {}", resp.status())),
                Err(ureq::Error::Status(code, _)) => (code >= 500, format!("status {code}")),
                Err(e) => (true, e.to_string()),
            };
            if !retryable || attempts > self.retry_budget {
                return Err(PolicyError::BackendUnavailable { attempts, cause });
            }
        }
    }
}

impl PolicyBackend for RemotePolicyClient {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn supports_dense(&self) -> bool {
        false
    }

    fn next_distribution(
        &self,
        state: &State,
        temperature: f64,
    ) -> Result<NextTokenDistribution, PolicyError> {
        self.next_top_k(state, self.vocab.size(), temperature)
    }

    fn top_k(
        &self,
        state: &State,
        k: usize,
        temperature: f64,
    ) -> Result<NextTokenDistribution, PolicyError> {
        self.next_top_k(state, k, temperature)
    }
}
