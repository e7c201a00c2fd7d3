//! Experiment runners and CSV/JSON report emitters.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guided::{
    blockwise_beam_search, BeamConfig, DecodeMode, GuidanceConfig, GuidedPolicy,
};
use crate::ivr::{run_ivr, IvrConfig, IvrContext, IvrError};
use crate::mdp::{State, TokenId};
use crate::oracle::{exact_kl, exact_policy_value, EnumerableMdp, OracleError};
use crate::policy::{
    derive_seed, rollout, sample_trajectory, seeded_rng, PolicyBackend,
    PolicyError, Tempered,
};
use crate::reward::{RewardError, RewardModel};
use crate::stats;
use crate::value::{AnyValue, CountingValue, ValueFunction};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Ivr(#[from] IvrError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A base policy, a reward and prompts to decode from.
#[derive(Clone, Copy)]
pub struct EvalTask<'a> {
    pub base: &'a dyn PolicyBackend,
    pub reward: &'a dyn RewardModel,
    pub prompts: &'a [Vec<TokenId>],
    pub max_length: usize,
}

impl EvalTask<'_> {
    fn check(&self) -> Result<(), EvalError> {
        if self.prompts.is_empty() {
            return Err(EvalError::InvalidSpec("no prompts".into()));
        }
        if self.max_length == 0 {
            return Err(EvalError::InvalidSpec("max_length must be ≥ 1".into()));
        }
        Ok(())
    }

    fn score(&self, prompt: &[TokenId], completion: &[TokenId]) -> Result<f64, EvalError> {
        Ok(self.reward.score(prompt, completion)?)
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// Enumerate every completion.
    #[default]
    Exact,
    /// Average analytic per-step KL along sampled trajectories.
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub beta_grid: Vec<f64>,
    /// Trajectories per prompt per seed (Monte-Carlo only).
    pub samples_per_point: usize,
    pub seeds: Vec<u64>,
    pub mode: DecodeMode,
    pub estimator: KlEstimator,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            beta_grid: vec![0.0, 0.25, 0.5, 1.0, 2.0, 4.0],
            samples_per_point: 64,
            seeds: default_seeds(),
            mode: DecodeMode::Tokenwise,
            estimator: KlEstimator::Exact,
        }
    }
}

impl SweepSpec {
    pub fn check(&self) -> Result<(), EvalError> {
        if self.beta_grid.is_empty() {
            return Err(EvalError::InvalidSpec("beta_grid must be nonempty".into()));
        }
        if self.beta_grid.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(EvalError::InvalidSpec("beta_grid values must be finite and ≥ 0".into()));
        }
        if self.beta_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(EvalError::InvalidSpec("beta_grid must be strictly increasing".into()));
        }
        if self.seeds.is_empty() {
            return Err(EvalError::InvalidSpec("seeds must be nonempty".into()));
        }
        if self.estimator == KlEstimator::MonteCarlo && self.samples_per_point == 0 {
            return Err(EvalError::InvalidSpec("samples_per_point must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub mean_token_kl: f64,
    pub wall_clock_per_token: f64,
}

fn guidance_for(guidance: &GuidanceConfig, beta: f64, mode: DecodeMode) -> GuidanceConfig {
    let mut g = guidance.with_beta(beta);
    if mode == DecodeMode::Tokenwise {
        g.block_size = 1;
    }
    g
}

/// Reward and token-level KL to the tempered base for each β. Exact rows
/// have `std_reward = 0`; Monte-Carlo rows report the spread of per-seed
/// means.
pub fn run_beta_sweep(
    task: &EvalTask<'_>,
    value: &dyn ValueFunction,
    guidance: &GuidanceConfig,
    spec: &SweepSpec,
) -> Result<Vec<SweepRow>, EvalError> {
    task.check()?;
    spec.check()?;
    guidance.check()?;
    match spec.estimator {
        KlEstimator::Exact => {
            let base_law = Tempered::new(task.base, guidance.temperature);
            let mdp = EnumerableMdp::uniform(
                &base_law,
                task.base.vocabulary().clone(),
                task.reward,
                task.prompts,
                task.max_length,
            )?;
            spec.beta_grid
                .iter()
                .map(|&beta| {
                    let start = Instant::now();
                    let g = guidance_for(guidance, beta, spec.mode);
                    let policy = GuidedPolicy::new(task.base, value, &g)?;
                    let mean_reward = exact_policy_value(&mdp, &policy)?;
                    let kl = exact_kl(&mdp, &policy, &base_law)?;
                    let tokens = kl.expected_length * task.prompts.len() as f64;
                    Ok(SweepRow {
                        beta,
                        mean_reward,
                        std_reward: 0.0,
                        mean_token_kl: kl.per_token,
                        wall_clock_per_token: start.elapsed().as_secs_f64() / tokens,
                    })
                })
                .collect()
        }
        KlEstimator::MonteCarlo => spec
            .beta_grid
            .iter()
            .map(|&beta| {
                let start = Instant::now();
                let g = guidance_for(guidance, beta, spec.mode);
                let policy = GuidedPolicy::new(task.base, value, &g)?;
                let per_seed: Vec<(f64, f64, usize)> = spec
                    .seeds
                    .par_iter()
                    .map(|&seed| monte_carlo_seed(task, &policy, spec.samples_per_point, seed))
                    .collect::<Result<_, EvalError>>()?;
                let means: Vec<f64> = per_seed.iter().map(|r| r.0).collect();
                let kl: f64 = per_seed.iter().map(|r| r.1).sum();
                let tokens: usize = per_seed.iter().map(|r| r.2).sum();
                Ok(SweepRow {
                    beta,
                    mean_reward: stats::mean(&means),
                    std_reward: stats::std_dev(&means),
                    mean_token_kl: kl / tokens as f64,
                    wall_clock_per_token: start.elapsed().as_secs_f64() / tokens as f64,
                })
            })
            .collect(),
    }
}

/// Mean reward, summed per-step KL and token count for one seed.
fn monte_carlo_seed(
    task: &EvalTask<'_>,
    policy: &GuidedPolicy<'_>,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64, usize), EvalError> {
    let vocab = task.base.vocabulary();
    let v = vocab.size();
    let mut rewards = Vec::with_capacity(task.prompts.len() * samples);
    let mut kl = 0.0;
    let mut tokens = 0;
    for (i, prompt) in task.prompts.iter().enumerate() {
        for j in 0..samples {
            let mut rng = seeded_rng(derive_seed(seed, (i * samples + j) as u64));
            let completion = rollout(vocab, prompt, task.max_length, &mut rng, |s: &State| {
                let d = policy.blockwise_distribution(s)?;
                let p = d.sampling_law(v);
                let q = policy.base_distribution(s)?.sampling_law(v);
                kl += step_kl(&p, &q).map_err(|a| {
                    PolicyError::InvalidDistribution(format!(
                        "guided law puts mass on token {a} outside the base support at {s}"
                    ))
                })?;
                Ok(d)
            })?;
            tokens += completion.len();
            rewards.push(task.score(prompt, &completion)?);
        }
    }
    Ok((stats::mean(&rewards), kl, tokens))
}

/// `Σ p ln(p/q)`, or the first token where `p > 0 = q`.
fn step_kl(p: &[f64], q: &[f64]) -> Result<f64, usize> {
    let mut kl = 0.0;
    for (a, (&pa, &qa)) in p.iter().zip(q).enumerate() {
        if pa == 0.0 {
            continue;
        }
        if qa == 0.0 {
            return Err(a);
        }
        kl += pa * (pa / qa).ln();
    }
    Ok(kl)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamEvalSpec {
    pub beam: BeamConfig,
    pub seeds: Vec<u64>,
    pub samples_per_prompt: usize,
}

impl Default for BeamEvalSpec {
    fn default() -> Self {
        Self {
            beam: BeamConfig::default(),
            seeds: default_seeds(),
            samples_per_prompt: 8,
        }
    }
}

impl BeamEvalSpec {
    pub fn check(&self) -> Result<(), EvalError> {
        self.beam.check()?;
        if self.seeds.is_empty() {
            return Err(EvalError::InvalidSpec("seeds must be nonempty".into()));
        }
        if self.samples_per_prompt == 0 {
            return Err(EvalError::InvalidSpec("samples_per_prompt must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamRow {
    pub variant: String,
    pub mean_reward: f64,
    pub std_reward: f64,
    /// Mean reward for each seed, in seed order.
    pub per_seed: Vec<f64>,
}

impl BeamRow {
    fn from_seeds(variant: impl Into<String>, per_seed: Vec<f64>) -> Self {
        Self {
            variant: variant.into(),
            mean_reward: stats::mean(&per_seed),
            std_reward: stats::std_dev(&per_seed),
            per_seed,
        }
    }
}

/// Mean beam-search reward over prompts and samples for one seed.
pub fn beam_reward(
    task: &EvalTask<'_>,
    value: &dyn ValueFunction,
    spec: &BeamEvalSpec,
    seed: u64,
) -> Result<f64, EvalError> {
    let mut rewards = Vec::new();
    for (i, prompt) in task.prompts.iter().enumerate() {
        for j in 0..spec.samples_per_prompt {
            let cfg = BeamConfig {
                seed: derive_seed(seed, (i * spec.samples_per_prompt + j) as u64),
                ..spec.beam.clone()
            };
            let t = blockwise_beam_search(task.base, value, prompt, &cfg)?;
            rewards.push(task.score(prompt, &t.completion)?);
        }
    }
    Ok(stats::mean(&rewards))
}

/// Mean reward of plain tempered base sampling for one seed, using the same
/// per-sample seeds as [`beam_reward`].
pub fn base_reward(task: &EvalTask<'_>, spec: &BeamEvalSpec, seed: u64) -> Result<f64, EvalError> {
    let mut rewards = Vec::new();
    for (i, prompt) in task.prompts.iter().enumerate() {
        for j in 0..spec.samples_per_prompt {
            let s = derive_seed(seed, (i * spec.samples_per_prompt + j) as u64);
            let t = sample_trajectory(task.base, prompt, task.max_length.min(spec.beam.max_length), spec.beam.temperature, s)?;
            rewards.push(task.score(prompt, &t.completion)?);
        }
    }
    Ok(stats::mean(&rewards))
}

/// One row for unguided base sampling (`"base"`), then one per variant.
pub fn run_beam_comparison(
    task: &EvalTask<'_>,
    variants: &[(&str, &dyn ValueFunction)],
    spec: &BeamEvalSpec,
) -> Result<Vec<BeamRow>, EvalError> {
    task.check()?;
    spec.check()?;
    if variants.is_empty() {
        return Err(EvalError::InvalidSpec("at least one variant is required".into()));
    }
    let mut rows = Vec::with_capacity(variants.len() + 1);
    let base: Vec<f64> = spec
        .seeds
        .par_iter()
        .map(|&s| base_reward(task, spec, s))
        .collect::<Result<_, _>>()?;
    rows.push(BeamRow::from_seeds("base", base));
    for (name, value) in variants {
        let per_seed: Vec<f64> = spec
            .seeds
            .par_iter()
            .map(|&s| beam_reward(task, *value, spec, s))
            .collect::<Result<_, _>>()?;
        rows.push(BeamRow::from_seeds(*name, per_seed));
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationAxis {
    #[serde(rename = "K")]
    K,
    #[serde(rename = "iterations")]
    Iterations,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::K => "K",
            AblationAxis::Iterations => "iterations",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub per_seed: Vec<f64>,
}

/// Fixed ingredients of an IVR run.
pub struct IvrSetup<'a> {
    pub task: EvalTask<'a>,
    pub config: IvrConfig,
    pub initial_value: &'a AnyValue,
}

/// Trains with `config` (seed replaced by `seed`) and returns the value that
/// guides decoding afterwards, one per completed iteration.
pub fn train_values(setup: &IvrSetup<'_>, config: &IvrConfig) -> Result<Vec<AnyValue>, EvalError> {
    let ctx = IvrContext {
        base: setup.task.base,
        reward: setup.task.reward,
        prompts: setup.task.prompts,
        max_length: setup.task.max_length,
        config,
        initial_value: setup.initial_value,
        out_dir: None,
        manifest_config: serde_json::Value::Null,
    };
    Ok(run_ivr(&ctx)?.history)
}

/// Full IVR runs varying one axis; each grid point reports the mean
/// beam-search reward of the final value over `spec.seeds`. Seed `s` trains
/// with IVR seed `s` and evaluates with beam seeds derived from `s`.
pub fn run_ablation(
    setup: &IvrSetup<'_>,
    axis: AblationAxis,
    grid: &[usize],
    spec: &BeamEvalSpec,
) -> Result<Vec<AblationRow>, EvalError> {
    setup.task.check()?;
    spec.check()?;
    if grid.is_empty() {
        return Err(EvalError::InvalidSpec("grid must be nonempty".into()));
    }
    grid.iter()
        .map(|&g| {
            let per_seed: Vec<f64> = spec
                .seeds
                .par_iter()
                .map(|&seed| {
                    let mut cfg = IvrConfig {
                        seed,
                        ..setup.config.clone()
                    };
                    match axis {
                        AblationAxis::K => cfg.k = g,
                        AblationAxis::Iterations => cfg.iterations = g,
                    }
                    let history = train_values(setup, &cfg)?;
                    let guide = if cfg.compose {
                        crate::value::ComposedValue(history)
                    } else {
                        crate::value::ComposedValue(vec![history.last().cloned().expect("≥ 1 iteration")])
                    };
                    beam_reward(&setup.task, &guide, spec, seed)
                })
                .collect::<Result<_, EvalError>>()?;
            Ok(AblationRow {
                axis,
                value: g,
                mean_reward: stats::mean(&per_seed),
                std_reward: stats::std_dev(&per_seed),
                per_seed,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedRow {
    pub block_size: usize,
    pub wall_clock_per_token: f64,
    /// Time per token relative to the largest block size.
    pub relative_time: f64,
    pub value_evals_per_token: f64,
    pub tokens: usize,
}

/// Times blockwise guided sampling for each block size on one thread and
/// counts value evaluations per generated token.
pub fn measure_block_speed(
    task: &EvalTask<'_>,
    value: &dyn ValueFunction,
    guidance: &GuidanceConfig,
    block_sizes: &[usize],
    seeds: &[u64],
) -> Result<Vec<SpeedRow>, EvalError> {
    task.check()?;
    if block_sizes.is_empty() {
        return Err(EvalError::InvalidSpec("block_sizes must be nonempty".into()));
    }
    if seeds.is_empty() {
        return Err(EvalError::InvalidSpec("seeds must be nonempty".into()));
    }
    let mut rows = Vec::with_capacity(block_sizes.len());
    for &b in block_sizes {
        let g = GuidanceConfig {
            block_size: b,
            ..guidance.clone()
        };
        let counting = CountingValue::new(value);
        let policy = GuidedPolicy::new(task.base, &counting, &g)?;
        let mut tokens = 0;
        let start = Instant::now();
        for &seed in seeds {
            for (i, prompt) in task.prompts.iter().enumerate() {
                let t = policy.sample_blockwise(prompt, task.max_length, derive_seed(seed, i as u64))?;
                tokens += t.completion.len();
            }
        }
        let secs = start.elapsed().as_secs_f64();
        rows.push(SpeedRow {
            block_size: b,
            wall_clock_per_token: secs / tokens as f64,
            relative_time: f64::NAN,
            value_evals_per_token: counting.count() as f64 / tokens as f64,
            tokens,
        });
    }
    let largest = rows
        .iter()
        .max_by_key(|r| r.block_size)
        .map(|r| r.wall_clock_per_token)
        .expect("nonempty");
    for r in &mut rows {
        r.relative_time = r.wall_clock_per_token / largest;
    }
    Ok(rows)
}

/// Rounds to 6 significant digits.
pub fn sig6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

fn num(x: f64) -> String {
    sig6(x).to_string()
}

/// A row type with a fixed CSV layout.
pub trait ReportRow: Serialize + DeserializeOwned {
    const HEADER: &'static [&'static str];

    fn cells(&self) -> Vec<String>;

    /// The row with every float rounded to 6 significant digits.
    fn rounded(&self) -> Self;
}

impl ReportRow for SweepRow {
    const HEADER: &'static [&'static str] =
        &["beta", "mean_reward", "std_reward", "mean_token_kl", "wall_clock_per_token"];

    fn cells(&self) -> Vec<String> {
        vec![
            num(self.beta),
            num(self.mean_reward),
            num(self.std_reward),
            num(self.mean_token_kl),
            num(self.wall_clock_per_token),
        ]
    }

    fn rounded(&self) -> Self {
        Self {
            beta: sig6(self.beta),
            mean_reward: sig6(self.mean_reward),
            std_reward: sig6(self.std_reward),
            mean_token_kl: sig6(self.mean_token_kl),
            wall_clock_per_token: sig6(self.wall_clock_per_token),
        }
    }
}

impl ReportRow for BeamRow {
    const HEADER: &'static [&'static str] = &["variant", "mean_reward", "std_reward", "seeds"];

    fn cells(&self) -> Vec<String> {
        vec![
            self.variant.clone(),
            num(self.mean_reward),
            num(self.std_reward),
            self.per_seed.len().to_string(),
        ]
    }

    fn rounded(&self) -> Self {
        Self {
            variant: self.variant.clone(),
            mean_reward: sig6(self.mean_reward),
            std_reward: sig6(self.std_reward),
            per_seed: self.per_seed.iter().map(|&x| sig6(x)).collect(),
        }
    }
}

impl ReportRow for AblationRow {
    const HEADER: &'static [&'static str] = &["axis", "value", "mean_reward", "std_reward"];

    fn cells(&self) -> Vec<String> {
        vec![
            self.axis.name().to_string(),
            self.value.to_string(),
            num(self.mean_reward),
            num(self.std_reward),
        ]
    }

    fn rounded(&self) -> Self {
        Self {
            axis: self.axis,
            value: self.value,
            mean_reward: sig6(self.mean_reward),
            std_reward: sig6(self.std_reward),
            per_seed: self.per_seed.iter().map(|&x| sig6(x)).collect(),
        }
    }
}

impl ReportRow for SpeedRow {
    const HEADER: &'static [&'static str] = &[
        "block_size",
        "wall_clock_per_token",
        "relative_time",
        "value_evals_per_token",
        "tokens",
    ];

    fn cells(&self) -> Vec<String> {
        vec![
            self.block_size.to_string(),
            num(self.wall_clock_per_token),
            num(self.relative_time),
            num(self.value_evals_per_token),
            self.tokens.to_string(),
        ]
    }

    fn rounded(&self) -> Self {
        Self {
            block_size: self.block_size,
            wall_clock_per_token: sig6(self.wall_clock_per_token),
            relative_time: sig6(self.relative_time),
            value_evals_per_token: sig6(self.value_evals_per_token),
            tokens: self.tokens,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

pub fn render_report<R: ReportRow>(rows: &[R], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = R::HEADER.join(",");
            out.push('\n');
            for r in rows {
                out.push_str(&r.cells().join(","));
                out.push('\n');
            }
            out
        }
        ReportFormat::Json => {
            let rounded: Vec<R> = rows.iter().map(ReportRow::rounded).collect();
            let mut s = serde_json::to_string_pretty(&rounded).expect("rows serialize");
            s.push('\n');
            s
        }
    }
}

pub fn emit_report<R: ReportRow>(
    rows: &[R],
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<(), EvalError> {
    let path = path.as_ref();
    fs::write(path, render_report(rows, format)).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_json_report<R: ReportRow>(path: impl AsRef<Path>) -> Result<Vec<R>, EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| EvalError::InvalidSpec(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{tokens, Vocabulary};
    use crate::policy::NGramPolicy;
    use crate::reward::SubsequenceReward;
    use crate::value::{FnValue, TabularValue};

    fn base() -> NGramPolicy {
        let vocab = Vocabulary::new(4, TokenId(0)).unwrap();
        NGramPolicy::fit(vocab, &[tokens(&[1, 2, 0]), tokens(&[2, 3, 1, 0])], 2, 1.0).unwrap()
    }

    fn reward() -> SubsequenceReward {
        SubsequenceReward::new(tokens(&[3]), 1.0, 0.0, 0.0, 3).unwrap()
    }

    fn threes() -> FnValue<impl Fn(&State) -> f64 + Send + Sync> {
        FnValue(|s: &State| s.generated().iter().any(|t| t.0 == 3) as u8 as f64)
    }

    #[test]
    fn sig6_rounding() {
        assert_eq!(sig6(0.123456789), 0.123457);
        assert_eq!(sig6(123456789.0), 123457000.0);
        assert_eq!(sig6(0.0), 0.0);
        assert!(sig6(f64::NAN).is_nan());
        assert_eq!(num(1.0), "1");
    }

    #[test]
    fn exact_sweep_shape() {
        let b = base();
        let r = reward();
        let prompts = vec![tokens(&[1]), tokens(&[2])];
        let task = EvalTask { base: &b, reward: &r, prompts: &prompts, max_length: 3 };
        let v = threes();
        let rows = run_beta_sweep(&task, &v, &GuidanceConfig::default(), &SweepSpec::default()).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].mean_token_kl, 0.0);
        for w in rows.windows(2) {
            assert!(w[1].beta > w[0].beta);
            assert!(w[1].mean_reward >= w[0].mean_reward - 1e-9);
            assert!(w[1].mean_token_kl >= 0.0);
        }
        let base_value = {
            let law = Tempered::new(&b, 0.7);
            let m = EnumerableMdp::uniform(&law, b.vocabulary().clone(), &r, &prompts, 3).unwrap();
            exact_policy_value(&m, &law).unwrap()
        };
        assert!((rows[0].mean_reward - base_value).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_sweep_tracks_exact() {
        let b = base();
        let r = reward();
        let prompts = vec![tokens(&[1]), tokens(&[2])];
        let task = EvalTask { base: &b, reward: &r, prompts: &prompts, max_length: 3 };
        let v = threes();
        let exact = run_beta_sweep(&task, &v, &GuidanceConfig::default(), &SweepSpec::default()).unwrap();
        let spec = SweepSpec {
            estimator: KlEstimator::MonteCarlo,
            samples_per_point: 400,
            ..SweepSpec::default()
        };
        let mc = run_beta_sweep(&task, &v, &GuidanceConfig::default(), &spec).unwrap();
        assert_eq!(mc[0].mean_token_kl, 0.0);
        for (e, m) in exact.iter().zip(&mc) {
            assert!((e.mean_reward - m.mean_reward).abs() < 0.03, "{e:?} {m:?}");
            assert!((e.mean_token_kl - m.mean_token_kl).abs() < 0.03, "{e:?} {m:?}");
        }
        let again = run_beta_sweep(&task, &v, &GuidanceConfig::default(), &spec).unwrap();
        assert_eq!(
            render_report(&mc.iter().map(|r| SweepRow { wall_clock_per_token: 0.0, ..r.clone() }).collect::<Vec<_>>(), ReportFormat::Csv),
            render_report(&again.iter().map(|r| SweepRow { wall_clock_per_token: 0.0, ..r.clone() }).collect::<Vec<_>>(), ReportFormat::Csv),
        );
    }

    #[test]
    fn sweep_spec_validation() {
        for grid in [vec![], vec![1.0, 0.5], vec![-1.0], vec![0.0, 0.0]] {
            let s = SweepSpec { beta_grid: grid, ..SweepSpec::default() };
            assert!(s.check().is_err());
        }
    }

    #[test]
    fn beam_comparison_rows() {
        let b = base();
        let r = reward();
        let prompts = vec![tokens(&[1]), tokens(&[2])];
        let task = EvalTask { base: &b, reward: &r, prompts: &prompts, max_length: 3 };
        let v = threes();
        let spec = BeamEvalSpec {
            beam: BeamConfig { beam_width: 4, block_size: 1, max_length: 3, ..BeamConfig::default() },
            ..BeamEvalSpec::default()
        };
        let rows = run_beam_comparison(&task, &[("a", &v), ("b", &v)], &spec).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].variant, "base");
        assert_eq!(rows[1].per_seed, rows[2].per_seed);
        assert!(rows[1].mean_reward > rows[0].mean_reward);
        // Width one without guidance is plain sampling.
        let flat = FnValue(|_: &State| 0.0);
        let one = BeamEvalSpec { beam: BeamConfig { beam_width: 1, ..spec.beam.clone() }, ..spec.clone() };
        let rows = run_beam_comparison(&task, &[("flat", &flat)], &one).unwrap();
        assert_eq!(rows[0].per_seed, rows[1].per_seed);
    }

    #[test]
    fn speed_counts_evaluations() {
        let vocab = Vocabulary::new(4, TokenId(0)).unwrap();
        let b = crate::policy::LinearSoftmaxPolicy::random(vocab, 1.0, 3).forbid(TokenId(0));
        let r = reward();
        let prompts = vec![tokens(&[1]), tokens(&[2])];
        let task = EvalTask { base: &b, reward: &r, prompts: &prompts, max_length: 8 };
        let v = threes();
        let g = GuidanceConfig { top_k: 3, ..GuidanceConfig::default() };
        let rows = measure_block_speed(&task, &v, &g, &[1, 2, 4], &[0, 1]).unwrap();
        let evals: Vec<f64> = rows.iter().map(|r| r.value_evals_per_token).collect();
        assert_eq!(evals, vec![4.0, 2.0, 1.0]);
        assert_eq!(rows[2].relative_time, 1.0);
        let single = measure_block_speed(&task, &v, &g, &[2], &[0]).unwrap();
        assert_eq!(single[0].relative_time, 1.0);
    }

    #[test]
    fn ablation_single_point_matches_plain_run() {
        let b = base();
        let r = reward();
        let prompts = vec![tokens(&[1]), tokens(&[2])];
        let task = EvalTask { base: &b, reward: &r, prompts: &prompts, max_length: 3 };
        let init = AnyValue::Tabular(TabularValue::new(r.range()));
        let setup = IvrSetup { task, config: IvrConfig { iterations: 1, ..IvrConfig::default() }, initial_value: &init };
        let spec = BeamEvalSpec {
            beam: BeamConfig { max_length: 3, ..BeamConfig::default() },
            seeds: vec![7],
            samples_per_prompt: 2,
        };
        let rows = run_ablation(&setup, AblationAxis::K, &[4], &spec).unwrap();
        let cfg = IvrConfig { iterations: 1, seed: 7, ..IvrConfig::default() };
        let v = train_values(&setup, &cfg).unwrap().pop().unwrap();
        assert_eq!(rows[0].per_seed, vec![beam_reward(&task, &v, &spec, 7).unwrap()]);
    }

    #[test]
    fn reports_round_trip() {
        let rows = vec![
            SweepRow { beta: 0.0, mean_reward: 0.25, std_reward: 0.0, mean_token_kl: 0.0, wall_clock_per_token: 1.5e-6 },
            SweepRow { beta: 0.5, mean_reward: 0.123456789, std_reward: 0.01, mean_token_kl: 0.2, wall_clock_per_token: 2e-6 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("s.csv");
        emit_report(&rows, &csv, ReportFormat::Csv).unwrap();
        let text = fs::read_to_string(&csv).unwrap();
        assert_eq!(
            text,
            "beta,mean_reward,std_reward,mean_token_kl,wall_clock_per_token\n0,0.25,0,0,0.0000015\n0.5,0.123457,0.01,0.2,0.000002\n"
        );
        let json = dir.path().join("s.json");
        emit_report(&rows, &json, ReportFormat::Json).unwrap();
        let back: Vec<SweepRow> = read_json_report(&json).unwrap();
        let want: Vec<SweepRow> = rows.iter().map(ReportRow::rounded).collect();
        assert_eq!(back, want);
        emit_report::<SweepRow>(&[], &csv, ReportFormat::Csv).unwrap();
        assert_eq!(fs::read_to_string(&csv).unwrap(), "beta,mean_reward,std_reward,mean_token_kl,wall_clock_per_token\n");
    }
}
