//! Iterative value refinement: collect K trajectories per prompt, label them,
//! regress a value function on every prefix, then collect again from the
//! base policy guided by the new value.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guided::{
    BaseSampler, DecodeMode, GuidanceConfig, GuidedPolicy, GuidedSampler, TrajectorySampler,
};
use crate::mdp::{MdpError, TokenId, Trajectory};
use crate::policy::{PolicyBackend, PolicyError};
use crate::reward::{label_trajectories, RewardError, RewardModel};
use crate::stats;
use crate::store::{read_trajectories, TrajectoryStore};
use crate::value::{
    build_regression_set, load_value, save_value, AnyValue, ComposedValue, TrainConfig,
    TrainableValue, ValueError, ValueFunction,
};

#[derive(Debug, Error)]
pub enum IvrError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Value(#[from] ValueError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IvrError + '_ {
    move |source| IvrError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IvrConfig {
    /// Trajectories per prompt.
    #[serde(rename = "K")]
    pub k: usize,
    pub iterations: usize,
    /// β used for guided collection from iteration 2 on.
    pub beta_collect: f64,
    pub temperature: f64,
    pub guidance: GuidanceConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Continue training from the previous iteration's parameters.
    pub warm_start: bool,
    /// Train on all trajectories collected so far instead of the latest batch.
    pub accumulate: bool,
    /// Guide collection with the sum of every value trained so far.
    pub compose: bool,
}

impl Default for IvrConfig {
    fn default() -> Self {
        Self {
            k: 4,
            iterations: 2,
            beta_collect: 2.0,
            temperature: 0.7,
            guidance: GuidanceConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            warm_start: true,
            accumulate: false,
            compose: false,
        }
    }
}

impl IvrConfig {
    pub fn check(&self) -> Result<(), IvrError> {
        if self.k == 0 {
            return Err(IvrError::Config("K must be ≥ 1".into()));
        }
        if self.iterations == 0 {
            return Err(IvrError::Config("iterations must be ≥ 1".into()));
        }
        if !(self.beta_collect >= 0.0 && self.beta_collect.is_finite()) {
            return Err(IvrError::Config("beta_collect must be finite and ≥ 0".into()));
        }
        crate::policy::check_temperature(self.temperature)
            .map_err(|_| IvrError::Config("temperature must be positive".into()))?;
        self.guidance
            .check()
            .map_err(|e| IvrError::Config(format!("guidance: {e}")))?;
        self.train
            .check()
            .map_err(|e| IvrError::Config(format!("train: {e}")))?;
        Ok(())
    }

    /// Guidance used for collection: the configured guidance at
    /// `beta_collect` and the collection temperature.
    pub fn collection_guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            beta: self.beta_collect,
            temperature: self.temperature,
            ..self.guidance.clone()
        }
    }
}

/// `K` trajectories per prompt with seeds `seed_base + i·K + k`, tagged with
/// `iteration`. Prompts are sampled in parallel; output order is fixed.
pub fn collect_trajectories(
    sampler: &dyn TrajectorySampler,
    prompts: &[Vec<TokenId>],
    k: usize,
    max_length: usize,
    seed_base: u64,
    iteration: u32,
) -> Result<Vec<Trajectory>, PolicyError> {
    if k == 0 {
        return Err(PolicyError::InvalidParameter("K must be ≥ 1".into()));
    }
    if prompts.is_empty() {
        return Err(PolicyError::InvalidParameter("no prompts".into()));
    }
    let per_prompt: Vec<Vec<Trajectory>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            (0..k)
                .map(|j| {
                    let seed = seed_base.wrapping_add((i * k + j) as u64);
                    let mut t = sampler.sample(p, max_length, seed)?;
                    t.iteration = iteration;
                    Ok(t)
                })
                .collect::<Result<Vec<_>, PolicyError>>()
        })
        .collect::<Result<_, _>>()?;
    Ok(per_prompt.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub index: u32,
    pub trajectories: usize,
    pub regression_samples: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub final_loss: f64,
    pub trajectory_file: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub iterations: Vec<IterationReport>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, IvrError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| IvrError::Manifest(format!("{}: {e}", path.display())))
    }

    /// Atomic write: temporary file, fsync, rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IvrError> {
        write_atomic(path.as_ref(), &serde_json::to_vec_pretty(self).expect("serializable"))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IvrError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Fixed inputs of a run.
pub struct IvrContext<'a> {
    pub base: &'a dyn PolicyBackend,
    pub reward: &'a dyn RewardModel,
    pub prompts: &'a [Vec<TokenId>],
    pub max_length: usize,
    pub config: &'a IvrConfig,
    /// Parameters used before the first iteration and on cold starts.
    pub initial_value: &'a AnyValue,
    /// When set, trajectories, checkpoints and the manifest are written here.
    pub out_dir: Option<&'a Path>,
    /// Stored verbatim as the manifest's `config`.
    pub manifest_config: serde_json::Value,
}

/// Everything carried from one iteration to the next.
#[derive(Clone, Debug)]
pub struct IvrState {
    /// Value after each completed iteration.
    pub history: Vec<AnyValue>,
    /// Trajectories kept for training under `accumulate`.
    pub data: Vec<Trajectory>,
    pub reports: Vec<IterationReport>,
}

impl IvrState {
    pub fn new() -> Self {
        Self {
            history: Vec::new(),
            data: Vec::new(),
            reports: Vec::new(),
        }
    }

    pub fn latest<'a>(&'a self, initial: &'a AnyValue) -> &'a AnyValue {
        self.history.last().unwrap_or(initial)
    }

    /// The value that guides collection in the next iteration.
    pub fn guidance_value(&self, initial: &AnyValue, compose: bool) -> ComposedValue {
        if compose && !self.history.is_empty() {
            ComposedValue(self.history.clone())
        } else {
            ComposedValue(vec![self.latest(initial).clone()])
        }
    }
}

impl Default for IvrState {
    fn default() -> Self {
        Self::new()
    }
}

fn seed_base(cfg: &IvrConfig, n_prompts: usize, iteration: u32) -> u64 {
    cfg.seed
        .wrapping_add(u64::from(iteration - 1).wrapping_mul((n_prompts * cfg.k) as u64))
}

/// Runs iteration `state.history.len() + 1` and appends its results to
/// `state`. On error `state` is left unchanged.
pub fn run_iteration(ctx: &IvrContext<'_>, state: &mut IvrState) -> Result<IterationReport, IvrError> {
    let cfg = ctx.config;
    cfg.check()?;
    let iteration = state.history.len() as u32 + 1;
    let seeds = seed_base(cfg, ctx.prompts.len(), iteration);

    let collected = if iteration == 1 {
        let sampler = BaseSampler {
            base: ctx.base,
            temperature: cfg.temperature,
        };
        collect_trajectories(&sampler, ctx.prompts, cfg.k, ctx.max_length, seeds, iteration)?
    } else {
        let guide = state.guidance_value(ctx.initial_value, cfg.compose);
        let gcfg = cfg.collection_guidance();
        let sampler = GuidedSampler {
            policy: GuidedPolicy::new(ctx.base, &guide as &dyn ValueFunction, &gcfg)?,
            mode: DecodeMode::Blockwise,
        };
        collect_trajectories(&sampler, ctx.prompts, cfg.k, ctx.max_length, seeds, iteration)?
    };
    let labeled = label_trajectories(ctx.reward, collected)?;
    let rewards: Vec<f64> = labeled.iter().filter_map(Trajectory::reward).collect();

    let train_on: Vec<Trajectory> = if cfg.accumulate {
        state.data.iter().chain(&labeled).cloned().collect()
    } else {
        labeled.clone()
    };
    let regression = build_regression_set(&train_on)?;
    let mut value = if cfg.warm_start {
        state.latest(ctx.initial_value).clone()
    } else {
        ctx.initial_value.clone()
    };
    let train_cfg = TrainConfig {
        seed: cfg.train.seed.wrapping_add(u64::from(iteration)),
        ..cfg.train.clone()
    };
    let trace = value.train(&regression, &train_cfg)?;

    let mut report = IterationReport {
        index: iteration,
        trajectories: labeled.len(),
        regression_samples: regression.len(),
        mean_reward: stats::mean(&rewards),
        std_reward: stats::std_dev(&rewards),
        final_loss: *trace.last().expect("epochs ≥ 1"),
        trajectory_file: None,
        checkpoint: None,
    };

    if let Some(dir) = ctx.out_dir {
        let iter_dir = dir.join(format!("iter_{iteration}"));
        fs::create_dir_all(&iter_dir).map_err(io_err(&iter_dir))?;
        let traj_path = iter_dir.join("trajectories.jsonl");
        let mut store = TrajectoryStore::create(&traj_path, ctx.base.vocabulary().clone())?;
        store.append_all(&labeled)?;
        store.sync()?;
        let ckpt = iter_dir.join("value.json");
        save_value(&value, &ckpt)?;
        report.trajectory_file = Some(PathBuf::from(format!("iter_{iteration}/trajectories.jsonl")));
        report.checkpoint = Some(PathBuf::from(format!("iter_{iteration}/value.json")));
        let mut reports = state.reports.clone();
        reports.push(report.clone());
        RunManifest {
            config: ctx.manifest_config.clone(),
            iterations: reports,
        }
        .save(dir.join(MANIFEST_FILE))?;
    }

    if cfg.accumulate {
        state.data.extend(labeled);
    }
    state.history.push(value);
    state.reports.push(report.clone());
    Ok(report)
}

/// Runs the remaining iterations up to `config.iterations`.
pub fn continue_ivr(ctx: &IvrContext<'_>, state: &mut IvrState) -> Result<(), IvrError> {
    ctx.config.check()?;
    if ctx.prompts.is_empty() {
        return Err(IvrError::Config("no prompts".into()));
    }
    while state.history.len() < ctx.config.iterations {
        run_iteration(ctx, state)?;
    }
    Ok(())
}

pub fn run_ivr(ctx: &IvrContext<'_>) -> Result<IvrState, IvrError> {
    let mut state = IvrState::new();
    continue_ivr(ctx, &mut state)?;
    Ok(state)
}

/// Rebuilds the state of an interrupted run from `ctx.out_dir`'s manifest.
/// The manifest's config must equal `ctx.manifest_config`.
pub fn load_state(ctx: &IvrContext<'_>) -> Result<IvrState, IvrError> {
    let dir = ctx
        .out_dir
        .ok_or_else(|| IvrError::Manifest("resuming needs an output directory".into()))?;
    let manifest = RunManifest::load(dir.join(MANIFEST_FILE))?;
    if manifest.config != ctx.manifest_config {
        return Err(IvrError::Manifest(
            "stored config differs from the current config".into(),
        ));
    }
    let mut state = IvrState::new();
    for (i, r) in manifest.iterations.iter().enumerate() {
        if r.index as usize != i + 1 {
            return Err(IvrError::Manifest(format!(
                "iteration {} listed at position {}",
                r.index,
                i + 1
            )));
        }
        let ckpt = r
            .checkpoint
            .as_ref()
            .ok_or_else(|| IvrError::Manifest(format!("iteration {} has no checkpoint", r.index)))?;
        state.history.push(load_value(dir.join(ckpt))?);
        if ctx.config.accumulate {
            let file = r.trajectory_file.as_ref().ok_or_else(|| {
                IvrError::Manifest(format!("iteration {} has no trajectory file", r.index))
            })?;
            state.data.extend(read_trajectories(dir.join(file))?);
        }
        state.reports.push(r.clone());
    }
    Ok(state)
}

pub fn resume_ivr(ctx: &IvrContext<'_>) -> Result<IvrState, IvrError> {
    let mut state = load_state(ctx)?;
    continue_ivr(ctx, &mut state)?;
    Ok(state)
}
