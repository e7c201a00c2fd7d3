//! Exact ground truth on small token MDPs by full enumeration of the
//! completion tree.
//!
//! The optimal policy and its value satisfy
//!
//! ```text
//! π*(a|s) ∝ π_base(a|s) · exp(β · V*(s ⊕ a))
//! V*(s)   = E_{π*}[R | s]
//! ```
//!
//! and are found by iterating `V ← E_{π(V)}[R]` from `V = 0`.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{State, TokenId, Vocabulary};
use crate::policy::{PolicyError, StepPolicy, NORM_TOL};
use crate::reward::{RewardError, RewardModel};
use crate::value::ValueFunction;

pub const DEFAULT_BUDGET: u64 = 10_000_000;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 10_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("enumeration needs about {needed} states, budget is {budget}")]
    BudgetExceeded { needed: u64, budget: u64 },
    #[error("oracle solution did not converge (residual {residual:e})")]
    UnconvergedOracle { residual: f64 },
    #[error("support violation at {state}: p({token}) = {p:e} but q({token}) = 0")]
    SupportViolation { state: String, token: TokenId, p: f64 },
    #[error("invalid MDP: {0}")]
    Invalid(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

#[derive(Clone, Debug)]
struct Node {
    state: State,
    /// Child node per token, empty for terminal states.
    children: Vec<usize>,
    reward: Option<f64>,
    /// Probability of the prompt under ρ, for root nodes.
    root_weight: f64,
}

impl Node {
    fn is_terminal(&self) -> bool {
        self.children.is_empty()
    }
}

/// A prompt distribution `ρ`, a base step law, a terminal reward and a
/// horizon, with the completion tree built up front.
pub struct EnumerableMdp<'a> {
    base: &'a dyn StepPolicy,
    vocab: Vocabulary,
    max_length: usize,
    nodes: Vec<Node>,
    index: HashMap<State, usize>,
    base_laws: Vec<Vec<f64>>,
}

impl<'a> EnumerableMdp<'a> {
    pub fn new(
        base: &'a dyn StepPolicy,
        vocab: Vocabulary,
        reward: &dyn RewardModel,
        prompts: &[(Vec<TokenId>, f64)],
        max_length: usize,
    ) -> Result<Self, OracleError> {
        Self::with_budget(base, vocab, reward, prompts, max_length, DEFAULT_BUDGET)
    }

    /// Uniform `ρ` over `prompts`.
    pub fn uniform(
        base: &'a dyn StepPolicy,
        vocab: Vocabulary,
        reward: &dyn RewardModel,
        prompts: &[Vec<TokenId>],
        max_length: usize,
    ) -> Result<Self, OracleError> {
        let w = 1.0 / prompts.len().max(1) as f64;
        let weighted: Vec<_> = prompts.iter().map(|p| (p.clone(), w)).collect();
        Self::new(base, vocab, reward, &weighted, max_length)
    }

    pub fn with_budget(
        base: &'a dyn StepPolicy,
        vocab: Vocabulary,
        reward: &dyn RewardModel,
        prompts: &[(Vec<TokenId>, f64)],
        max_length: usize,
        budget: u64,
    ) -> Result<Self, OracleError> {
        if prompts.is_empty() {
            return Err(OracleError::Invalid("no prompts".into()));
        }
        if max_length == 0 {
            return Err(OracleError::Invalid("max_length must be ≥ 1".into()));
        }
        let total: f64 = prompts.iter().map(|p| p.1).sum();
        if prompts.iter().any(|p| !(p.1 >= 0.0)) || (total - 1.0).abs() > NORM_TOL {
            return Err(OracleError::Invalid(format!(
                "prompt weights must be nonnegative and sum to 1, got {total}"
            )));
        }
        let needed = (vocab.size() as u64)
            .checked_pow(max_length as u32)
            .and_then(|n| n.checked_mul(prompts.len() as u64))
            .unwrap_or(u64::MAX);
        if needed > budget {
            return Err(OracleError::BudgetExceeded { needed, budget });
        }
        for (p, _) in prompts {
            vocab.check_all(p).map_err(PolicyError::from)?;
        }

        let eos = vocab.eos();
        let mut nodes: Vec<Node> = Vec::new();
        let mut index = HashMap::new();
        for (p, w) in prompts {
            let root = State::new(p.clone());
            if index.contains_key(&root) {
                return Err(OracleError::Invalid(format!("duplicate prompt {root}")));
            }
            index.insert(root.clone(), nodes.len());
            nodes.push(Node {
                state: root,
                children: Vec::new(),
                reward: None,
                root_weight: *w,
            });
        }
        // Breadth-first: children always come after their parent.
        let mut i = 0;
        while i < nodes.len() {
            let s = nodes[i].state.clone();
            if s.is_terminal(eos, max_length) {
                nodes[i].reward = Some(reward.score(s.prompt(), s.generated())?);
            } else {
                let mut children = Vec::with_capacity(vocab.size());
                for a in vocab.all_tokens() {
                    let c = s.extended_unchecked(a);
                    index.insert(c.clone(), nodes.len());
                    children.push(nodes.len());
                    nodes.push(Node {
                        state: c,
                        children: Vec::new(),
                        reward: None,
                        root_weight: 0.0,
                    });
                }
                nodes[i].children = children;
            }
            i += 1;
        }
        let mut m = Self {
            base,
            vocab,
            max_length,
            nodes,
            index,
            base_laws: Vec::new(),
        };
        m.base_laws = m.laws(base)?;
        Ok(m)
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn max_length(&self) -> usize {
        self.max_length
    }

    pub fn base(&self) -> &'a dyn StepPolicy {
        self.base
    }

    /// Every non-terminal state in the tree.
    pub fn decision_states(&self) -> impl Iterator<Item = &State> {
        self.nodes.iter().filter(|n| !n.is_terminal()).map(|n| &n.state)
    }

    pub fn state_count(&self) -> usize {
        self.nodes.len()
    }

    /// The step law of `policy` at every decision node (empty rows at
    /// terminal nodes).
    fn laws(&self, policy: &dyn StepPolicy) -> Result<Vec<Vec<f64>>, OracleError> {
        let v = self.vocab.size();
        self.nodes
            .par_iter()
            .map(|n| {
                if n.is_terminal() {
                    return Ok(Vec::new());
                }
                let row = policy.step_law(&n.state)?;
                let sum: f64 = row.iter().sum();
                if row.len() != v || row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > NORM_TOL
                {
                    return Err(OracleError::Policy(PolicyError::InvalidDistribution(format!(
                        "step law at {} is not a distribution over {v} tokens",
                        n.state
                    ))));
                }
                Ok(row)
            })
            .collect()
    }

    /// Probability of reaching each node under `laws`, weighted by `ρ`.
    fn reach(&self, laws: &[Vec<f64>]) -> Vec<f64> {
        let mut mass: Vec<f64> = self.nodes.iter().map(|n| n.root_weight).collect();
        for (i, n) in self.nodes.iter().enumerate() {
            if mass[i] == 0.0 {
                continue;
            }
            for (&c, &p) in n.children.iter().zip(&laws[i]) {
                mass[c] = mass[i] * p;
            }
        }
        mass
    }

    fn node(&self, state: &State) -> Option<usize> {
        self.index.get(state).copied()
    }
}

fn tilted_row(base: &[f64], child_values: impl Iterator<Item = f64>, beta: f64) -> Vec<f64> {
    if beta == 0.0 {
        return base.to_vec();
    }
    let logits: Vec<f64> = base
        .iter()
        .zip(child_values)
        .map(|(&p, v)| if p > 0.0 { p.ln() + beta * v } else { f64::NEG_INFINITY })
        .collect();
    crate::policy::softmax(&logits)
}

/// `V*`, `π*` and convergence diagnostics.
#[derive(Clone, Debug)]
pub struct OracleSolution {
    pub beta: f64,
    pub converged: bool,
    pub residual: f64,
    pub iterations: usize,
    values: HashMap<State, f64>,
    policy: HashMap<State, Vec<f64>>,
}

/// Iterates `V ← E_{π(V)}[R]` until the largest change is at most `tol`.
/// Non-convergence is reported in the solution, not as an error.
pub fn solve_fixed_point(
    m: &EnumerableMdp<'_>,
    beta: f64,
    tol: f64,
    max_iters: usize,
) -> Result<OracleSolution, OracleError> {
    if !(tol > 0.0) {
        return Err(OracleError::Invalid("tol must be positive".into()));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(OracleError::Invalid(format!("beta must be finite and ≥ 0, got {beta}")));
    }
    let n = m.nodes.len();
    let mut v = vec![0.0; n];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut next = vec![0.0; n];
        for i in (0..n).rev() {
            let node = &m.nodes[i];
            next[i] = match node.reward {
                Some(r) => r,
                None => {
                    let row = tilted_row(&m.base_laws[i], node.children.iter().map(|&c| v[c]), beta);
                    row.iter().zip(&node.children).map(|(p, &c)| p * next[c]).sum()
                }
            };
        }
        residual = v
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if residual <= tol {
            break;
        }
    }
    let mut values = HashMap::with_capacity(n);
    let mut policy = HashMap::new();
    for (i, node) in m.nodes.iter().enumerate() {
        values.insert(node.state.clone(), v[i]);
        if !node.is_terminal() {
            let row = tilted_row(&m.base_laws[i], node.children.iter().map(|&c| v[c]), beta);
            policy.insert(node.state.clone(), row);
        }
    }
    Ok(OracleSolution {
        beta,
        converged: residual <= tol,
        residual,
        iterations,
        values,
        policy,
    })
}

#[derive(Serialize, Deserialize)]
struct SolutionFile {
    beta: f64,
    converged: bool,
    residual: f64,
    iterations: usize,
    values: BTreeMap<String, f64>,
    policy: BTreeMap<String, Vec<f64>>,
}

impl OracleSolution {
    pub fn v_star(&self, state: &State) -> Option<f64> {
        self.values.get(state).copied()
    }

    pub fn pi_star(&self, state: &State) -> Option<&[f64]> {
        self.policy.get(state).map(Vec::as_slice)
    }

    /// `π*` recomputed directly from `Q*(a|s) = V*(s ⊕ a)` as
    /// `π_base(a|s) e^{β Q*(a|s)} / Σ_b π_base(b|s) e^{β Q*(b|s)}`.
    pub fn pi_from_q(&self, m: &EnumerableMdp<'_>, state: &State) -> Option<Vec<f64>> {
        let i = m.node(state)?;
        let node = &m.nodes[i];
        if node.is_terminal() {
            return None;
        }
        let w: Vec<f64> = m.base_laws[i]
            .iter()
            .zip(&node.children)
            .map(|(p, &c)| p * (self.beta * self.values[&m.nodes[c].state]).exp())
            .collect();
        let z: f64 = w.iter().sum();
        Some(w.into_iter().map(|x| x / z).collect())
    }

    /// `Σ_x ρ(x) V*(x)`.
    pub fn root_value(&self, m: &EnumerableMdp<'_>) -> f64 {
        m.nodes
            .iter()
            .filter(|n| n.root_weight > 0.0)
            .map(|n| n.root_weight * self.values[&n.state])
            .sum()
    }

    /// Golden-file form: sorted state keys mapped to values and rows.
    pub fn to_json(&self) -> String {
        let file = SolutionFile {
            beta: self.beta,
            converged: self.converged,
            residual: self.residual,
            iterations: self.iterations,
            values: self.values.iter().map(|(s, v)| (s.key(), *v)).collect(),
            policy: self.policy.iter().map(|(s, r)| (s.key(), r.clone())).collect(),
        };
        serde_json::to_string_pretty(&file).expect("serializable")
    }
}

impl ValueFunction for OracleSolution {
    /// NaN outside the enumerated tree.
    fn evaluate(&self, state: &State) -> f64 {
        self.v_star(state).unwrap_or(f64::NAN)
    }

    fn kind(&self) -> &'static str {
        "oracle"
    }
}

impl StepPolicy for OracleSolution {
    fn step_law(&self, state: &State) -> Result<Vec<f64>, PolicyError> {
        self.pi_star(state)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| PolicyError::UnknownState(state.key()))
    }
}

/// `E_{x~ρ, y~π}[R(x, y)]`.
pub fn exact_policy_value(m: &EnumerableMdp<'_>, policy: &dyn StepPolicy) -> Result<f64, OracleError> {
    let laws = m.laws(policy)?;
    let mass = m.reach(&laws);
    Ok(m.nodes
        .iter()
        .zip(&mass)
        .filter_map(|(n, w)| n.reward.map(|r| w * r))
        .sum())
}

/// Expected number of visits to each (state, action) pair.
#[derive(Clone, Debug, Default)]
pub struct VisitationMeasure {
    pub entries: HashMap<(State, TokenId), f64>,
}

impl VisitationMeasure {
    pub fn total(&self) -> f64 {
        self.entries.values().sum()
    }

    pub fn get(&self, state: &State, token: TokenId) -> f64 {
        self.entries.get(&(state.clone(), token)).copied().unwrap_or(0.0)
    }
}

pub fn visitation_measure(
    m: &EnumerableMdp<'_>,
    policy: &dyn StepPolicy,
) -> Result<VisitationMeasure, OracleError> {
    let laws = m.laws(policy)?;
    let mass = m.reach(&laws);
    let mut entries = HashMap::new();
    for (i, n) in m.nodes.iter().enumerate() {
        if n.is_terminal() || mass[i] == 0.0 {
            continue;
        }
        for (a, &p) in laws[i].iter().enumerate() {
            if p > 0.0 {
                entries.insert((n.state.clone(), TokenId(a as u32)), mass[i] * p);
            }
        }
    }
    Ok(VisitationMeasure { entries })
}

/// `V*(ρ) − V^π(ρ)`. Requires a converged solution.
pub fn optimality_gap(
    m: &EnumerableMdp<'_>,
    solution: &OracleSolution,
    policy: &dyn StepPolicy,
) -> Result<f64, OracleError> {
    if !solution.converged {
        return Err(OracleError::UnconvergedOracle {
            residual: solution.residual,
        });
    }
    Ok(exact_policy_value(m, solution)? - exact_policy_value(m, policy)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    /// Trajectory-level `KL(p ‖ q)` averaged over `ρ`.
    pub total: f64,
    /// Expected number of generated tokens under `p`.
    pub expected_length: f64,
    /// `total / expected_length`.
    pub per_token: f64,
}

pub fn exact_kl(
    m: &EnumerableMdp<'_>,
    p: &dyn StepPolicy,
    q: &dyn StepPolicy,
) -> Result<KlReport, OracleError> {
    let lp = m.laws(p)?;
    let lq = m.laws(q)?;
    let mass = m.reach(&lp);
    let mut total = 0.0;
    let mut expected_length = 0.0;
    for (i, n) in m.nodes.iter().enumerate() {
        if n.is_terminal() || mass[i] == 0.0 {
            continue;
        }
        expected_length += mass[i];
        let mut step = 0.0;
        for (a, (&pa, &qa)) in lp[i].iter().zip(&lq[i]).enumerate() {
            if pa == 0.0 {
                continue;
            }
            if qa == 0.0 {
                return Err(OracleError::SupportViolation {
                    state: n.state.key(),
                    token: TokenId(a as u32),
                    p: pa,
                });
            }
            step += pa * (pa / qa).ln();
        }
        total += mass[i] * step;
    }
    Ok(KlReport {
        total,
        expected_length,
        per_token: if expected_length > 0.0 { total / expected_length } else { 0.0 },
    })
}
