//! `ivr`: run value-guided decoding experiments from a JSON config.
//!
//! Settings come from, highest precedence first: command-line flags, the
//! config file (`--config`), built-in defaults (the canonical toy task). The
//! output root is `--output-dir`, else `output_dir` from the config, else
//! `$IVR_OUTPUT_DIR`, else `./runs`.
//!
//! Exit codes: 0 success, 1 user error, 2 internal error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use ivr_core::config::{ConfigError, ExperimentConfig};
use ivr_core::eval::{
    emit_report, measure_block_speed, run_ablation, run_beam_comparison, run_beta_sweep,
    AblationAxis, EvalError, EvalTask, IvrSetup, KlEstimator, ReportFormat, ReportRow,
};
use ivr_core::guided::{DecodeMode, GuidedPolicy};
use ivr_core::ivr::{resume_ivr, run_ivr, write_atomic, IvrContext, IvrError, RunManifest, MANIFEST_FILE};
use ivr_core::mdp::{TokenId, Trajectory};
use ivr_core::oracle::{exact_policy_value, solve_fixed_point, EnumerableMdp, OracleError};
use ivr_core::policy::{derive_seed, PolicyBackend, PolicyError, Tempered};
use ivr_core::reward::label_trajectories;
use ivr_core::stats;
use ivr_core::store::TrajectoryStore;
use ivr_core::value::{load_value, AnyValue, ValueError, ValueFunction};

/// `println!` that tolerates a closed stdout, e.g. when piped into `head`.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Debug)]
enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<IvrError> for CliError {
    fn from(e: IvrError) -> Self {
        match e {
            IvrError::Config(_) | IvrError::Manifest(_) => CliError::User(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidSpec(_) => CliError::User(e.to_string()),
            EvalError::Oracle(OracleError::BudgetExceeded { .. }) => CliError::User(e.to_string()),
            EvalError::Ivr(e) => e.into(),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::BudgetExceeded { .. } | OracleError::Invalid(_) => CliError::User(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        CliError::Internal(e.to_string())
    }
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "ivr", version, about = "Value-guided decoding experiments on token-level MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON). A run manifest is also accepted; its
    /// `config` object is used. Defaults to the built-in toy task.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; overrides `output_dir` and $IVR_OUTPUT_DIR.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct ValueArg {
    /// Value checkpoint; defaults to the latest `train` checkpoint.
    #[arg(long)]
    value: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run IVR training; writes checkpoints, trajectories and a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(short = 'K', long = "k")]
        k: Option<usize>,
        /// Continue an interrupted run in the same output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Sample guided trajectories and score them.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        value: ValueArg,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        block_size: Option<usize>,
        /// Samples per prompt.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Compare blockwise beam search across trained values.
    Beam {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        value: ValueArg,
        #[arg(long)]
        beam_width: Option<usize>,
        #[arg(long)]
        block_size: Option<usize>,
    },
    /// Reward versus token-level KL over a grid of β.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        value: ValueArg,
        /// Comma-separated, strictly increasing.
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        #[arg(long, value_parser = parse_estimator)]
        estimator: Option<KlEstimator>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<DecodeMode>,
    },
    /// Full IVR runs over a grid of K or iteration counts.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_axis)]
        axis: Option<AblationAxis>,
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<usize>>,
    },
    /// Solve the exact optimal value by enumeration.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Time blockwise guided sampling per block size.
    Speed {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        value: ValueArg,
        #[arg(long, value_delimiter = ',')]
        block_sizes: Option<Vec<usize>>,
    },
    /// Parse and validate a config, then print the effective config.
    ValidateConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_estimator(s: &str) -> Result<KlEstimator, String> {
    match s {
        "exact" => Ok(KlEstimator::Exact),
        "monte_carlo" | "monte-carlo" => Ok(KlEstimator::MonteCarlo),
        _ => Err(format!("unknown estimator {s:?} (exact | monte_carlo)")),
    }
}

fn parse_mode(s: &str) -> Result<DecodeMode, String> {
    match s {
        "tokenwise" => Ok(DecodeMode::Tokenwise),
        "blockwise" => Ok(DecodeMode::Blockwise),
        _ => Err(format!("unknown mode {s:?} (tokenwise | blockwise)")),
    }
}

fn parse_axis(s: &str) -> Result<AblationAxis, String> {
    match s {
        "K" | "k" => Ok(AblationAxis::K),
        "iterations" => Ok(AblationAxis::Iterations),
        _ => Err(format!("unknown axis {s:?} (K | iterations)")),
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::User(format!("config: cannot read {}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    // Manifests embed the effective config under "config".
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&text) {
        if let (Some(cfg), true) = (map.get("config"), map.contains_key("command") || map.contains_key("iterations")) {
            return Ok(ExperimentConfig::from_json(&cfg.to_string(), dir)?);
        }
    }
    Ok(ExperimentConfig::from_json(&text, dir)?)
}

fn output_root(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common
        .output_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os("IVR_OUTPUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn setup_workers(workers: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = workers {
        if n == 0 {
            return Err(CliError::User("--workers must be ≥ 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(internal)?;
    }
    Ok(())
}

/// Config with common flag overrides applied, and the resolved output root.
fn prepare(common: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    setup_workers(common.workers)?;
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let root = output_root(common, &cfg);
    Ok((cfg, root))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::User(format!("output_dir: cannot create {}: {e}", dir.display())))
}

fn write_manifest(dir: &Path, manifest: &Value) -> Result<PathBuf, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest).map_err(internal)?;
    text.push('\n');
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

struct Loaded {
    base: Box<dyn PolicyBackend>,
    prompts: Vec<Vec<TokenId>>,
}

fn load_task(cfg: &ExperimentConfig) -> Result<Loaded, CliError> {
    cfg.check()?;
    Ok(Loaded {
        base: cfg.build_base()?,
        prompts: cfg.prompts()?,
    })
}

fn task<'a>(cfg: &'a ExperimentConfig, l: &'a Loaded) -> EvalTask<'a> {
    EvalTask {
        base: l.base.as_ref(),
        reward: &cfg.reward,
        prompts: &l.prompts,
        max_length: cfg.task.max_length,
    }
}

/// Checkpoints listed in `<root>/train/manifest.json`, oldest first.
fn trained_checkpoints(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let dir = root.join("train");
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let m = RunManifest::load(&path)?;
    Ok(m.iterations
        .iter()
        .filter_map(|r| r.checkpoint.as_ref().map(|c| dir.join(c)))
        .collect())
}

/// Resolves the value for decoding commands: `--value`, then
/// `value_checkpoint`, then the latest training checkpoint.
fn resolve_value(
    cfg: &mut ExperimentConfig,
    arg: &ValueArg,
    root: &Path,
    allow_untrained: bool,
) -> Result<AnyValue, CliError> {
    if let Some(p) = &arg.value {
        cfg.value_checkpoint = Some(p.clone());
    }
    if cfg.value_checkpoint.is_none() {
        cfg.value_checkpoint = trained_checkpoints(root)?.pop();
    }
    match &cfg.value_checkpoint {
        Some(p) => {
            let p = fs::canonicalize(p)
                .map_err(|e| CliError::User(format!("value_checkpoint: {}: {e}", p.display())))?;
            cfg.value_checkpoint = Some(p.clone());
            load_value(&p).map_err(|e| match e {
                ValueError::Io { .. } | ValueError::FormatMismatch { .. } | ValueError::Malformed(_) => {
                    CliError::User(format!("value_checkpoint: {e}"))
                }
                e => internal(e),
            })
        }
        None if allow_untrained => Ok(cfg.initial_value()),
        None => Err(CliError::User(
            "value_checkpoint: no trained value; run `train` first or pass --value".into(),
        )),
    }
}

fn report_name(kind: &str, cfg: &ExperimentConfig, seeds: &[u64]) -> String {
    let lo = seeds.iter().min().copied().unwrap_or(0);
    let hi = seeds.iter().max().copied().unwrap_or(0);
    format!("{kind}_{}_seeds{lo}-{hi}", cfg.task.name)
}

fn emit_both<R: ReportRow>(rows: &[R], dir: &Path, stem: &str) -> Result<Vec<String>, CliError> {
    let mut out = Vec::new();
    for f in [ReportFormat::Csv, ReportFormat::Json] {
        let name = format!("{stem}.{}", f.extension());
        emit_report(rows, dir.join(&name), f)?;
        out.push(name);
    }
    Ok(out)
}

fn run_manifest(command: &str, cfg: &ExperimentConfig, outputs: Vec<String>, summary: Value) -> Value {
    json!({
        "command": command,
        "config": cfg.to_json(),
        "outputs": outputs,
        "summary": summary,
    })
}

fn cmd_train(common: Common, iterations: Option<usize>, k: Option<usize>, resume: bool) -> Result<(), CliError> {
    let (mut cfg, root) = prepare(&common)?;
    if let Some(n) = iterations {
        cfg.ivr.iterations = n;
    }
    if let Some(k) = k {
        cfg.ivr.k = k;
    }
    let loaded = load_task(&cfg)?;
    let dir = root.join("train");
    create_dir(&dir)?;
    let ivr = cfg.ivr_config();
    let init = cfg.initial_value();
    let ctx = IvrContext {
        base: loaded.base.as_ref(),
        reward: &cfg.reward,
        prompts: &loaded.prompts,
        max_length: cfg.task.max_length,
        config: &ivr,
        initial_value: &init,
        out_dir: Some(&dir),
        manifest_config: cfg.to_json(),
    };
    let state = if resume { resume_ivr(&ctx)? } else { run_ivr(&ctx)? };
    for r in &state.reports {
        say!(
            "iteration {}: trajectories={} mean_reward={:.6} std_reward={:.6} final_loss={:.6}",
            r.index, r.trajectories, r.mean_reward, r.std_reward, r.final_loss
        );
    }
    say!("manifest: {}", dir.join(MANIFEST_FILE).display());
    Ok(())
}

fn cmd_sample(
    common: Common,
    value: ValueArg,
    beta: Option<f64>,
    block_size: Option<usize>,
    samples: Option<usize>,
) -> Result<(), CliError> {
    let (mut cfg, root) = prepare(&common)?;
    if let Some(b) = beta {
        cfg.guidance.beta = b;
    }
    if let Some(b) = block_size {
        cfg.guidance.block_size = b;
    }
    if let Some(n) = samples {
        cfg.evaluation.samples_per_prompt = n;
    }
    let v = resolve_value(&mut cfg, &value, &root, false)?;
    let loaded = load_task(&cfg)?;
    let dir = root.join("sample");
    create_dir(&dir)?;
    let policy = GuidedPolicy::new(loaded.base.as_ref(), &v, &cfg.guidance)?;
    let n = cfg.evaluation.samples_per_prompt;
    let mut ts: Vec<Trajectory> = Vec::with_capacity(loaded.prompts.len() * n);
    for (i, p) in loaded.prompts.iter().enumerate() {
        for j in 0..n {
            let seed = derive_seed(cfg.seed, (i * n + j) as u64);
            ts.push(policy.sample_blockwise(p, cfg.task.max_length, seed)?);
        }
    }
    let ts = label_trajectories(&cfg.reward, ts).map_err(internal)?;
    let rewards: Vec<f64> = ts.iter().filter_map(Trajectory::reward).collect();
    let name = format!("samples_{}_seed{}.jsonl", cfg.task.name, cfg.seed);
    let mut store = TrajectoryStore::create(dir.join(&name), cfg.vocabulary()?).map_err(internal)?;
    store.append_all(&ts).map_err(internal)?;
    store.sync().map_err(internal)?;
    let summary = json!({
        "trajectories": ts.len(),
        "mean_reward": stats::mean(&rewards),
        "std_reward": stats::std_dev(&rewards),
    });
    say!("{} trajectories, mean_reward={:.6}", ts.len(), stats::mean(&rewards));
    write_manifest(&dir, &run_manifest("sample", &cfg, vec![name], summary))?;
    Ok(())
}

fn cmd_beam(common: Common, value: ValueArg, beam_width: Option<usize>, block_size: Option<usize>) -> Result<(), CliError> {
    let (mut cfg, root) = prepare(&common)?;
    if let Some(b) = beam_width {
        cfg.beam.beam_width = b;
    }
    if let Some(b) = block_size {
        cfg.beam.block_size = b;
    }
    let (names, values): (Vec<String>, Vec<AnyValue>) = if value.value.is_some() || cfg.value_checkpoint.is_some() {
        let v = resolve_value(&mut cfg, &value, &root, false)?;
        (vec!["value".into()], vec![v])
    } else {
        let ckpts = trained_checkpoints(&root)?;
        if ckpts.is_empty() {
            return Err(CliError::User(
                "value_checkpoint: no trained value; run `train` first or pass --value".into(),
            ));
        }
        let mut vs = Vec::new();
        for c in &ckpts {
            vs.push(load_value(c).map_err(|e| CliError::User(format!("value_checkpoint: {e}")))?);
        }
        ((1..=ckpts.len()).map(|i| format!("iter{i}")).collect(), vs)
    };
    let loaded = load_task(&cfg)?;
    let dir = root.join("beam");
    create_dir(&dir)?;
    let variants: Vec<(&str, &dyn ValueFunction)> = names
        .iter()
        .zip(&values)
        .map(|(n, v)| (n.as_str(), v as &dyn ValueFunction))
        .collect();
    let spec = cfg.beam_eval();
    let rows = run_beam_comparison(&task(&cfg, &loaded), &variants, &spec)?;
    for r in &rows {
        say!("{}: mean_reward={:.6} std_reward={:.6}", r.variant, r.mean_reward, r.std_reward);
    }
    let outputs = emit_both(&rows, &dir, &report_name(&cfg.beam.tag(), &cfg, &spec.seeds))?;
    write_manifest(&dir, &run_manifest("beam", &cfg, outputs, json!({ "variants": names })))?;
    Ok(())
}

fn cmd_sweep(
    common: Common,
    value: ValueArg,
    betas: Option<Vec<f64>>,
    estimator: Option<KlEstimator>,
    mode: Option<DecodeMode>,
) -> Result<(), CliError> {
    let (mut cfg, root) = prepare(&common)?;
    if let Some(b) = betas {
        cfg.sweep.beta_grid = b;
    }
    if let Some(e) = estimator {
        cfg.sweep.estimator = e;
    }
    if let Some(m) = mode {
        cfg.sweep.mode = m;
    }
    let v = resolve_value(&mut cfg, &value, &root, false)?;
    let loaded = load_task(&cfg)?;
    let dir = root.join("sweep");
    create_dir(&dir)?;
    let rows = run_beta_sweep(&task(&cfg, &loaded), &v, &cfg.guidance, &cfg.sweep)?;
    for r in &rows {
        say!(
            "beta={}: mean_reward={:.6} mean_token_kl={:.6}",
            r.beta, r.mean_reward, r.mean_token_kl
        );
    }
    let outputs = emit_both(&rows, &dir, &report_name("sweep", &cfg, &cfg.sweep.seeds))?;
    write_manifest(&dir, &run_manifest("sweep", &cfg, outputs, Value::Null))?;
    Ok(())
}

fn cmd_ablate(common: Common, axis: Option<AblationAxis>, grid: Option<Vec<usize>>) -> Result<(), CliError> {
    let (mut cfg, root) = prepare(&common)?;
    if let Some(a) = axis {
        cfg.ablation.axis = a;
    }
    if let Some(g) = grid {
        cfg.ablation.grid = g;
    }
    let loaded = load_task(&cfg)?;
    let dir = root.join("ablate");
    create_dir(&dir)?;
    let init = cfg.initial_value();
    let setup = IvrSetup {
        task: task(&cfg, &loaded),
        config: cfg.ivr_config(),
        initial_value: &init,
    };
    let spec = cfg.beam_eval();
    let rows = run_ablation(&setup, cfg.ablation.axis, &cfg.ablation.grid, &spec)?;
    for r in &rows {
        say!(
            "{}={}: mean_reward={:.6} std_reward={:.6}",
            r.axis.name(),
            r.value,
            r.mean_reward,
            r.std_reward
        );
    }
    let kind = format!("ablate-{}", cfg.ablation.axis.name());
    let outputs = emit_both(&rows, &dir, &report_name(&kind, &cfg, &spec.seeds))?;
    write_manifest(&dir, &run_manifest("ablate", &cfg, outputs, Value::Null))?;
    Ok(())
}

fn cmd_oracle(common: Common, beta: Option<f64>) -> Result<(), CliError> {
    let (mut cfg, root) = prepare(&common)?;
    if let Some(b) = beta {
        cfg.guidance.beta = b;
    }
    let loaded = load_task(&cfg)?;
    let dir = root.join("oracle");
    create_dir(&dir)?;
    let law = Tempered::new(loaded.base.as_ref(), cfg.guidance.temperature);
    let mdp = EnumerableMdp::uniform(
        &law,
        cfg.vocabulary()?,
        &cfg.reward,
        &loaded.prompts,
        cfg.task.max_length,
    )?;
    let sol = solve_fixed_point(
        &mdp,
        cfg.guidance.beta,
        ivr_core::oracle::DEFAULT_TOL,
        ivr_core::oracle::DEFAULT_MAX_ITERS,
    )?;
    let base_value = exact_policy_value(&mdp, &law)?;
    let name = format!("oracle_{}_beta{}.json", cfg.task.name, cfg.guidance.beta);
    write_atomic(&dir.join(&name), sol.to_json().as_bytes())?;
    let summary = json!({
        "converged": sol.converged,
        "residual": sol.residual,
        "iterations": sol.iterations,
        "states": mdp.state_count(),
        "optimal_value": sol.root_value(&mdp),
        "base_value": base_value,
    });
    say!(
        "converged={} residual={:e} iterations={} optimal_value={:.6} base_value={:.6}",
        sol.converged,
        sol.residual,
        sol.iterations,
        sol.root_value(&mdp),
        base_value
    );
    write_manifest(&dir, &run_manifest("oracle", &cfg, vec![name], summary))?;
    if !sol.converged {
        return Err(CliError::Internal(format!(
            "oracle did not converge (residual {:e})",
            sol.residual
        )));
    }
    Ok(())
}

fn cmd_speed(common: Common, value: ValueArg, block_sizes: Option<Vec<usize>>) -> Result<(), CliError> {
    let (mut cfg, root) = prepare(&common)?;
    if let Some(b) = block_sizes {
        cfg.speed.block_sizes = b;
    }
    let v = resolve_value(&mut cfg, &value, &root, true)?;
    let loaded = load_task(&cfg)?;
    let dir = root.join("speed");
    create_dir(&dir)?;
    let rows = measure_block_speed(
        &task(&cfg, &loaded),
        &v,
        &cfg.guidance,
        &cfg.speed.block_sizes,
        &cfg.speed.seeds,
    )?;
    for r in &rows {
        say!(
            "b={}: relative_time={:.3} value_evals_per_token={}",
            r.block_size, r.relative_time, r.value_evals_per_token
        );
    }
    let outputs = emit_both(&rows, &dir, &report_name("speed", &cfg, &cfg.speed.seeds))?;
    write_manifest(&dir, &run_manifest("speed", &cfg, outputs, Value::Null))?;
    Ok(())
}

fn cmd_validate(config: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = load_config(config.as_deref())?;
    say!("{}", serde_json::to_string_pretty(&cfg.to_json()).map_err(internal)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, iterations, k, resume } => cmd_train(common, iterations, k, resume),
        Command::Sample { common, value, beta, block_size, samples } => {
            cmd_sample(common, value, beta, block_size, samples)
        }
        Command::Beam { common, value, beam_width, block_size } => cmd_beam(common, value, beam_width, block_size),
        Command::Sweep { common, value, betas, estimator, mode } => cmd_sweep(common, value, betas, estimator, mode),
        Command::Ablate { common, axis, grid } => cmd_ablate(common, axis, grid),
        Command::Oracle { common, beta } => cmd_oracle(common, beta),
        Command::Speed { common, value, block_sizes } => cmd_speed(common, value, block_sizes),
        Command::ValidateConfig { config } => cmd_validate(config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::User(m) => eprintln!("error: {m}"),
                CliError::Internal(m) => eprintln!("internal error: {m}"),
            }
            ExitCode::from(e.code())
        }
    }
}
