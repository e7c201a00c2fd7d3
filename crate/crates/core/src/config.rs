//! Experiment configuration: one JSON file describing the task, the base
//! policy, reward, value function and every experiment's settings.
//!
//! All sections are optional and default to the canonical toy task. Unknown
//! keys are rejected. Relative paths are resolved against the directory of
//! the config file.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{AblationAxis, BeamEvalSpec, SweepSpec};
use crate::guided::{BeamConfig, GuidanceConfig};
use crate::ivr::IvrConfig;
use crate::mdp::{TokenId, Vocabulary};
use crate::policy::{NGramPolicy, PolicyBackend, RemotePolicyClient, TabularPolicy};
use crate::reward::{RewardModel, RewardSpec, SubsequenceReward};
use crate::value::{AnyValue, FeatureMap, MlpValue, TabularValue, TrainConfig};

/// A user error in a config file, tagged with the offending key.
#[derive(Debug, Error, PartialEq)]
#[error("{key}: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl ToString) -> Self {
        Self {
            key: key.into(),
            message: message.to_string(),
        }
    }
}

const TOY_CORPUS: &[&str] = &[
    "1230", "2140", "3310", "1520", "2230", "4310", "1120", "3240", "2510", "1330", "4120", "2310",
    "3150", "1240", "2130", "5310",
];

/// A second corpus over the same vocabulary, for transfer experiments.
pub const TOY_TRANSFER_CORPUS: &[&str] = &[
    "2130", "1320", "3210", "1410", "2530", "3120", "1230", "4210", "2350", "3110",
];

const TOY_PROMPTS: &[&str] = &["1", "2", "3", "4", "5", "12", "23", "31", "15", "32"];

/// Digits to tokens; only for the built-in single-digit toy data.
pub fn digits(s: &str) -> Vec<TokenId> {
    s.chars()
        .map(|c| TokenId(c.to_digit(10).expect("digit")))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    /// Used in report file names.
    pub name: String,
    pub vocab_size: usize,
    pub eos: TokenId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts: Option<Vec<Vec<TokenId>>>,
    /// One prompt per line, whitespace-separated token ids.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_file: Option<PathBuf>,
    pub max_length: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            name: "toy".into(),
            vocab_size: 6,
            eos: TokenId(0),
            prompts: Some(TOY_PROMPTS.iter().map(|p| digits(p)).collect()),
            prompt_file: None,
            max_length: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseSpec {
    Tabular {
        path: PathBuf,
    },
    Ngram {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        corpus: Option<Vec<Vec<TokenId>>>,
        /// One sequence per line, whitespace-separated token ids.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        corpus_file: Option<PathBuf>,
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    Remote {
        endpoint: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_retry_budget")]
        retry_budget: u32,
        #[serde(default = "default_max_in_flight")]
        max_in_flight: usize,
    },
}

fn default_order() -> usize {
    2
}
fn default_alpha() -> f64 {
    1.0
}
fn default_timeout_ms() -> u64 {
    5000
}
fn default_retry_budget() -> u32 {
    2
}
fn default_max_in_flight() -> usize {
    8
}

impl Default for BaseSpec {
    fn default() -> Self {
        BaseSpec::Ngram {
            corpus: Some(TOY_CORPUS.iter().map(|s| digits(s)).collect()),
            corpus_file: None,
            order: 2,
            alpha: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ValueSpec {
    Tabular {
        /// Estimate for unseen states; the reward-range midpoint if absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        default_value: Option<f64>,
    },
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_true")]
        last_token: bool,
        #[serde(default)]
        seed: u64,
    },
}

fn default_hidden() -> Vec<usize> {
    vec![16]
}
fn default_true() -> bool {
    true
}

impl Default for ValueSpec {
    fn default() -> Self {
        ValueSpec::Mlp {
            hidden: default_hidden(),
            last_token: true,
            seed: 0,
        }
    }
}

/// Collection and training knobs. Guidance and the seed live at top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IvrSection {
    #[serde(rename = "K")]
    pub k: usize,
    pub iterations: usize,
    pub beta_collect: f64,
    pub temperature: f64,
    pub train: TrainConfig,
    pub warm_start: bool,
    pub accumulate: bool,
    pub compose: bool,
}

impl Default for IvrSection {
    fn default() -> Self {
        let c = IvrConfig::default();
        Self {
            k: c.k,
            iterations: c.iterations,
            beta_collect: c.beta_collect,
            temperature: c.temperature,
            train: c.train,
            warm_start: c.warm_start,
            accumulate: c.accumulate,
            compose: c.compose,
        }
    }
}

/// Seeds and sample counts for beam-search evaluations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSpec {
    pub seeds: Vec<u64>,
    pub samples_per_prompt: usize,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            samples_per_prompt: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub axis: AblationAxis,
    pub grid: Vec<usize>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            axis: AblationAxis::K,
            grid: vec![1, 2, 4, 5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeedSpec {
    pub block_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SpeedSpec {
    fn default() -> Self {
        Self {
            block_sizes: vec![1, 2, 4],
            seeds: (0..5).collect(),
        }
    }
}

fn toy_reward() -> RewardSpec {
    RewardSpec::Subsequence(
        SubsequenceReward::new(digits("53"), 1.0, 0.0, 0.0, 5).expect("valid toy reward"),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub base: BaseSpec,
    pub reward: RewardSpec,
    pub value: ValueSpec,
    pub ivr: IvrSection,
    pub guidance: GuidanceConfig,
    pub beam: BeamConfig,
    pub evaluation: EvaluationSpec,
    pub sweep: SweepSpec,
    pub ablation: AblationSpec,
    pub speed: SpeedSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Trained value used by the decoding commands.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value_checkpoint: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            base: BaseSpec::default(),
            reward: toy_reward(),
            value: ValueSpec::default(),
            ivr: IvrSection::default(),
            guidance: GuidanceConfig::default(),
            beam: BeamConfig::default(),
            evaluation: EvaluationSpec::default(),
            sweep: SweepSpec::default(),
            ablation: AblationSpec::default(),
            speed: SpeedSpec::default(),
            output_dir: None,
            value_checkpoint: None,
            seed: 0,
        }
    }
}

fn check_range(key: &str, ok: bool, message: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::new(key, message))
    }
}

fn read_file(key: &str, path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path)
        .map_err(|e| ConfigError::new(key, format!("cannot read {}: {e}", path.display())))
}

/// Whitespace-separated token ids, one sequence per nonblank line.
pub fn parse_token_lines(text: &str) -> Result<Vec<Vec<TokenId>>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|t| {
                    t.parse::<u32>()
                        .map(TokenId)
                        .map_err(|_| format!("line {}: {t:?} is not a token id", i + 1))
                })
                .collect()
        })
        .collect()
}

impl ExperimentConfig {
    /// Parses and validates. `base_dir` anchors relative paths.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let key = if key == "." { "config".to_string() } else { key };
            ConfigError::new(key, e.inner())
        })?;
        cfg.resolve_paths(base_dir);
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = read_file("config", path)?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve_paths(&mut self, base_dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        for p in [&mut self.task.prompt_file, &mut self.output_dir, &mut self.value_checkpoint]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        match &mut self.base {
            BaseSpec::Tabular { path } => fix(path),
            BaseSpec::Ngram {
                corpus_file: Some(p),
                ..
            } => fix(p),
            _ => {}
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let t = &self.task;
        check_range(
            "task.name",
            !t.name.is_empty()
                && t.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_'),
            "name must be nonempty ASCII letters, digits, '-' or '_'",
        )?;
        check_range("task.vocab_size", t.vocab_size >= 2, "vocab_size must be ≥ 2")?;
        self.vocabulary()?;
        check_range("task.max_length", t.max_length >= 1, "max_length must be ≥ 1")?;
        match (&t.prompts, &t.prompt_file) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::new(
                    "task.prompts",
                    "give either prompts or prompt_file, not both",
                ))
            }
            (None, None) => {
                return Err(ConfigError::new("task.prompts", "no prompts or prompt_file given"))
            }
            (_, Some(p)) if !p.is_file() => {
                return Err(ConfigError::new(
                    "task.prompt_file",
                    format!("{} does not exist", p.display()),
                ))
            }
            _ => {}
        }
        if t.prompts.is_some() {
            self.prompts()?;
        }
        match &self.base {
            BaseSpec::Tabular { path } => check_range(
                "base.path",
                path.is_file(),
                &format!("{} does not exist", path.display()),
            )?,
            BaseSpec::Ngram {
                corpus,
                corpus_file,
                order,
                alpha,
            } => {
                check_range("base.order", *order >= 1, "order must be ≥ 1")?;
                check_range(
                    "base.alpha",
                    *alpha > 0.0 && alpha.is_finite(),
                    "alpha must be positive",
                )?;
                match (corpus, corpus_file) {
                    (Some(_), Some(_)) => {
                        return Err(ConfigError::new(
                            "base.corpus",
                            "give either corpus or corpus_file, not both",
                        ))
                    }
                    (None, None) => {
                        return Err(ConfigError::new("base.corpus", "no corpus or corpus_file given"))
                    }
                    (_, Some(p)) if !p.is_file() => {
                        return Err(ConfigError::new(
                            "base.corpus_file",
                            format!("{} does not exist", p.display()),
                        ))
                    }
                    _ => {}
                }
            }
            BaseSpec::Remote {
                endpoint,
                max_in_flight,
                ..
            } => {
                check_range(
                    "base.endpoint",
                    endpoint.starts_with("http://") || endpoint.starts_with("https://"),
                    "endpoint must be an http(s) URL",
                )?;
                check_range("base.max_in_flight", *max_in_flight >= 1, "max_in_flight must be ≥ 1")?;
            }
        }
        self.reward
            .check()
            .map_err(|e| ConfigError::new("reward", e))?;
        let reward_len = match &self.reward {
            RewardSpec::Subsequence(r) => r.max_length,
            RewardSpec::FeatureLinear(r) => r.max_length,
        };
        check_range(
            "reward.max_length",
            reward_len == t.max_length,
            "reward max_length must equal task.max_length",
        )?;
        match &self.value {
            ValueSpec::Tabular {
                default_value: Some(d),
            } => {
                let (lo, hi) = self.reward.range();
                check_range(
                    "value.default_value",
                    (lo..=hi).contains(d),
                    "default_value must lie inside the reward range",
                )?;
            }
            ValueSpec::Mlp { hidden, .. } => check_range(
                "value.hidden",
                hidden.iter().all(|&h| h >= 1),
                "hidden layer widths must be ≥ 1",
            )?,
            _ => {}
        }
        self.guidance
            .check()
            .map_err(|e| ConfigError::new("guidance", e))?;
        self.ivr_config()
            .check()
            .map_err(|e| ConfigError::new("ivr", e.to_string().trim_start_matches("invalid config: ")))?;
        self.beam.check().map_err(|e| ConfigError::new("beam", e))?;
        check_range(
            "beam.max_length",
            self.beam.max_length <= t.max_length,
            "beam max_length must not exceed task.max_length",
        )?;
        check_range(
            "evaluation.seeds",
            !self.evaluation.seeds.is_empty(),
            "seeds must be nonempty",
        )?;
        check_range(
            "evaluation.samples_per_prompt",
            self.evaluation.samples_per_prompt >= 1,
            "samples_per_prompt must be ≥ 1",
        )?;
        self.sweep.check().map_err(|e| {
            ConfigError::new("sweep", e.to_string().trim_start_matches("invalid experiment spec: "))
        })?;
        check_range("ablation.grid", !self.ablation.grid.is_empty(), "grid must be nonempty")?;
        check_range(
            "ablation.grid",
            self.ablation.grid.iter().all(|&g| g >= 1),
            "grid values must be ≥ 1",
        )?;
        check_range(
            "speed.block_sizes",
            !self.speed.block_sizes.is_empty() && self.speed.block_sizes.iter().all(|&b| b >= 1),
            "block_sizes must be nonempty and ≥ 1",
        )?;
        check_range("speed.seeds", !self.speed.seeds.is_empty(), "seeds must be nonempty")?;
        if let Some(p) = &self.value_checkpoint {
            check_range("value_checkpoint", p.is_file(), &format!("{} does not exist", p.display()))?;
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary, ConfigError> {
        Vocabulary::new(self.task.vocab_size, self.task.eos).map_err(|e| ConfigError::new("task.eos", e))
    }

    pub fn prompts(&self) -> Result<Vec<Vec<TokenId>>, ConfigError> {
        let (key, prompts) = match (&self.task.prompts, &self.task.prompt_file) {
            (Some(p), _) => ("task.prompts", p.clone()),
            (None, Some(path)) => (
                "task.prompt_file",
                parse_token_lines(&read_file("task.prompt_file", path)?)
                    .map_err(|e| ConfigError::new("task.prompt_file", e))?,
            ),
            (None, None) => return Err(ConfigError::new("task.prompts", "no prompts given")),
        };
        check_range(key, !prompts.is_empty(), "at least one prompt is required")?;
        let vocab = self.vocabulary()?;
        for p in &prompts {
            vocab.check_all(p).map_err(|e| ConfigError::new(key, e))?;
        }
        Ok(prompts)
    }

    pub fn build_base(&self) -> Result<Box<dyn PolicyBackend>, ConfigError> {
        let vocab = self.vocabulary()?;
        Ok(match &self.base {
            BaseSpec::Tabular { path } => Box::new(
                TabularPolicy::from_json(vocab, &read_file("base.path", path)?)
                    .map_err(|e| ConfigError::new("base.path", e))?,
            ),
            BaseSpec::Ngram {
                corpus,
                corpus_file,
                order,
                alpha,
            } => {
                let corpus = match (corpus, corpus_file) {
                    (Some(c), _) => c.clone(),
                    (None, Some(p)) => parse_token_lines(&read_file("base.corpus_file", p)?)
                        .map_err(|e| ConfigError::new("base.corpus_file", e))?,
                    (None, None) => return Err(ConfigError::new("base.corpus", "no corpus given")),
                };
                Box::new(
                    NGramPolicy::fit(vocab, &corpus, *order, *alpha)
                        .map_err(|e| ConfigError::new("base.corpus", e))?,
                )
            }
            BaseSpec::Remote {
                endpoint,
                timeout_ms,
                retry_budget,
                max_in_flight,
            } => Box::new(RemotePolicyClient::new(
                endpoint,
                vocab,
                Duration::from_millis(*timeout_ms),
                *retry_budget,
                *max_in_flight,
            )),
        })
    }

    pub fn initial_value(&self) -> AnyValue {
        let range = self.reward.range();
        match &self.value {
            ValueSpec::Tabular { default_value } => AnyValue::Tabular(match default_value {
                Some(d) => TabularValue::with_default(range, *d),
                None => TabularValue::new(range),
            }),
            ValueSpec::Mlp {
                hidden,
                last_token,
                seed,
            } => {
                let mut fm = FeatureMap::new(self.task.vocab_size, self.task.max_length);
                if *last_token {
                    fm = fm.with_last_token();
                }
                AnyValue::Mlp(MlpValue::new(fm, hidden, range, *seed))
            }
        }
    }

    pub fn ivr_config(&self) -> IvrConfig {
        let s = &self.ivr;
        IvrConfig {
            k: s.k,
            iterations: s.iterations,
            beta_collect: s.beta_collect,
            temperature: s.temperature,
            guidance: self.guidance.clone(),
            train: s.train.clone(),
            seed: self.seed,
            warm_start: s.warm_start,
            accumulate: s.accumulate,
            compose: s.compose,
        }
    }

    pub fn beam_eval(&self) -> BeamEvalSpec {
        BeamEvalSpec {
            beam: self.beam.clone(),
            seeds: self.evaluation.seeds.clone(),
            samples_per_prompt: self.evaluation.samples_per_prompt,
        }
    }
}
