//! End-to-end training runs through the file layout.

use std::fs;
use std::path::Path;

use ivr_core::config::ExperimentConfig;
use ivr_core::ivr::{resume_ivr, run_ivr, IvrConfig, IvrContext, IvrError, RunManifest, MANIFEST_FILE};
use ivr_core::mdp::{State, TokenId};
use ivr_core::policy::PolicyBackend;
use ivr_core::store::read_trajectories;
use ivr_core::value::{AnyValue, ValueFunction};

struct Run {
    cfg: ExperimentConfig,
    base: Box<dyn PolicyBackend>,
    prompts: Vec<Vec<TokenId>>,
    initial: AnyValue,
}

impl Run {
    fn new() -> Self {
        let cfg = ExperimentConfig::default();
        Self {
            base: cfg.build_base().unwrap(),
            prompts: cfg.prompts().unwrap(),
            initial: cfg.initial_value(),
            cfg,
        }
    }

    fn ctx<'a>(&'a self, ivr: &'a IvrConfig, out: Option<&'a Path>) -> IvrContext<'a> {
        IvrContext {
            base: self.base.as_ref(),
            reward: &self.cfg.reward,
            prompts: &self.prompts,
            max_length: self.cfg.task.max_length,
            config: ivr,
            initial_value: &self.initial,
            out_dir: out,
            manifest_config: serde_json::json!({"run": "pipeline"}),
        }
    }
}

fn probe_states(run: &Run) -> Vec<State> {
    run.prompts
        .iter()
        .flat_map(|p| {
            (1..6u32).map(move |t| State::with_generated(p.clone(), vec![TokenId(t)]))
        })
        .collect()
}

fn same_values(a: &AnyValue, b: &AnyValue, states: &[State]) -> bool {
    states
        .iter()
        .all(|s| a.evaluate(s).to_bits() == b.evaluate(s).to_bits())
}

#[test]
fn files_on_disk_describe_the_run() {
    let run = Run::new();
    let dir = tempfile::tempdir().unwrap();
    let ivr = run.cfg.ivr_config();
    let state = run_ivr(&run.ctx(&ivr, Some(dir.path()))).unwrap();
    let manifest = RunManifest::load(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.iterations.len(), ivr.iterations);
    let states = probe_states(&run);
    for (i, r) in manifest.iterations.iter().enumerate() {
        let trajectories = read_trajectories(dir.path().join(r.trajectory_file.as_ref().unwrap())).unwrap();
        assert_eq!(trajectories.len(), run.prompts.len() * ivr.k);
        assert!(trajectories.iter().all(|t| t.is_labeled() && t.iteration == r.index));
        let mean = trajectories.iter().map(|t| t.reward().unwrap()).sum::<f64>() / trajectories.len() as f64;
        assert!((mean - r.mean_reward).abs() < 1e-12);
        let bytes = fs::read(dir.path().join(r.checkpoint.as_ref().unwrap())).unwrap();
        let loaded = AnyValue::from_checkpoint_json(&bytes).unwrap();
        assert!(same_values(&loaded, &state.history[i], &states));
    }
}

#[test]
fn interrupted_run_resumes_to_the_same_values() {
    let run = Run::new();
    let full = IvrConfig {
        iterations: 3,
        ..run.cfg.ivr_config()
    };
    let reference = run_ivr(&run.ctx(&full, None)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let partial = IvrConfig {
        iterations: 1,
        ..full.clone()
    };
    run_ivr(&run.ctx(&partial, Some(dir.path()))).unwrap();
    let resumed = resume_ivr(&run.ctx(&full, Some(dir.path()))).unwrap();

    let states = probe_states(&run);
    assert_eq!(resumed.history.len(), 3);
    for (a, b) in resumed.history.iter().zip(&reference.history) {
        assert!(same_values(a, b, &states));
    }
    let manifest = RunManifest::load(dir.path().join(MANIFEST_FILE)).unwrap();
    let indices: Vec<u32> = manifest.iterations.iter().map(|r| r.index).collect();
    assert_eq!(indices, [1, 2, 3]);
}

#[test]
fn corrupt_checkpoint_blocks_resume() {
    let run = Run::new();
    let dir = tempfile::tempdir().unwrap();
    let ivr = run.cfg.ivr_config();
    run_ivr(&run.ctx(&ivr, Some(dir.path()))).unwrap();
    let manifest = RunManifest::load(dir.path().join(MANIFEST_FILE)).unwrap();
    let ckpt = dir.path().join(manifest.iterations[0].checkpoint.as_ref().unwrap());
    fs::write(&ckpt, b"{\"version\": \"0\"").unwrap();
    assert!(matches!(
        resume_ivr(&run.ctx(&ivr, Some(dir.path()))),
        Err(IvrError::Value(_))
    ));
}

#[test]
fn resume_without_a_manifest_fails() {
    let run = Run::new();
    let dir = tempfile::tempdir().unwrap();
    let ivr = run.cfg.ivr_config();
    assert!(resume_ivr(&run.ctx(&ivr, Some(dir.path()))).is_err());
    assert!(matches!(resume_ivr(&run.ctx(&ivr, None)), Err(IvrError::Manifest(_))));
}
