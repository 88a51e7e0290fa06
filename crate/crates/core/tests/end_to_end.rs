use cnsn_core::agent::{Agent, QNet};
use cnsn_core::harness::{
    evaluate, evaluate_policy, latest_checkpoint, read_metrics, train_run, Greedy, Policy, RunConfig, RunStatus, RunSummary,
    ScriptedOptimal, Variant, METRICS_FILE,
};
use cnsn_core::pixelworld::{optimal_return, Action, Env, Observation, ShiftSpec, Suite, WorldState};
use cnsn_core::{Error, Prng, Result};

fn tiny(variant: Variant, seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        variant,
        total_steps: 60,
        eval_interval: 30,
        eval_episodes: 3,
        checkpoint_interval: 30,
        ..Default::default()
    };
    cfg.encoder.layers.truncate(2);
    for l in &mut cfg.encoder.layers {
        l.out_channels = 4;
    }
    cfg.encoder.feature_dim = 16;
    cfg.agent.batch = 4;
    cfg.agent.learning_starts = 20;
    cfg.agent.buffer_capacity = 100;
    cfg
}

fn agent(cfg: &RunConfig) -> Agent {
    Agent::new(cfg.agent.clone(), &cfg.resolved_encoder(), &Prng::new(cfg.seed)).unwrap()
}

/// Records each episode's initial state, then defers to the wrapped policy.
struct Recorder<'a> {
    inner: Greedy<'a>,
    starts: Vec<WorldState>,
}

impl Policy for Recorder<'_> {
    fn actions(&mut self, envs: &[&Env], obs: &[&Observation]) -> Result<Vec<Action>> {
        for e in envs {
            if e.state().t == 0 {
                self.starts.push(*e.state());
            }
        }
        self.inner.actions(envs, obs)
    }
}

#[test]
fn variants_are_evaluated_on_identical_episodes() {
    let rng = Prng::new(5).split_named("eval");
    let mut starts = Vec::new();
    for variant in [Variant::Base, Variant::Cnsn, Variant::Bn] {
        let a = agent(&tiny(variant, 5));
        let mut rec = Recorder {
            inner: Greedy(&a.online),
            starts: Vec::new(),
        };
        evaluate_policy(&mut rec, &ShiftSpec::suite(Suite::ColorHard), 8, &rng).unwrap();
        starts.push(rec.starts);
    }
    assert_eq!(starts[0].len(), 8);
    assert_eq!(starts[0], starts[1]);
    assert_eq!(starts[0], starts[2]);
}

#[test]
fn greedy_evaluation_is_pure() {
    let a = agent(&tiny(Variant::Cnsn, 1));
    let snapshot: QNet<f32> = a.online.clone();
    let rng = Prng::new(9);
    let spec = ShiftSpec::suite(Suite::VideoEasy);
    let first = evaluate(&snapshot, &spec, 4, &rng).unwrap();
    let second = evaluate(&snapshot, &spec, 4, &rng).unwrap();
    assert_eq!(first, second);
    assert_eq!(snapshot, a.online);
}

#[test]
fn scripted_policy_is_optimal_on_every_suite() {
    let rng = Prng::new(3);
    for suite in Suite::ALL {
        let spec = ShiftSpec::suite(suite);
        let expected: Vec<f64> = (0..20)
            .map(|i| optimal_return(Env::reset(&spec, &rng.split(i)).0.state()))
            .collect();
        let got = evaluate_policy(&mut ScriptedOptimal, &spec, 20, &rng).unwrap();
        for (g, e) in got.returns.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-9, "{suite}: {g} vs {e}");
        }
    }
}

#[test]
fn final_checkpoint_reproduces_the_final_evaluation() {
    let cfg = tiny(Variant::Cnsn, 2);
    let dir = tempfile::tempdir().unwrap();
    train_run(&cfg, dir.path()).unwrap();
    let ckpt = latest_checkpoint(dir.path()).unwrap().expect("checkpoint written");
    let mut restored = agent(&cfg);
    let meta = restored.load_checkpoint(&ckpt).unwrap();
    assert_eq!(meta["step"], cfg.total_steps);
    assert!(restored.updates > 0);

    let rows = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    let eval_rng = Prng::new(cfg.seed).split_named("eval");
    for suite in Suite::ALL {
        let res = evaluate(&restored.online, &ShiftSpec::suite(suite), cfg.eval_episodes, &eval_rng).unwrap();
        let row = rows.iter().find(|r| r.step == cfg.total_steps && r.suite == suite).unwrap();
        assert_eq!((res.mean, res.std), (row.mean_return, row.std_return), "{suite}");
    }
}

#[test]
fn runs_replay_byte_for_byte_and_depend_on_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = |name: &str, cfg: &RunConfig| {
        let out = dir.path().join(name);
        train_run(cfg, &out).unwrap();
        std::fs::read(out.join(METRICS_FILE)).unwrap()
    };
    let cfg = tiny(Variant::CnsnNocrop, 4);
    let a = bytes("a", &cfg);
    assert_eq!(a, bytes("b", &cfg));
    assert_ne!(a, bytes("c", &cfg.with_seed(5)));
}

#[test]
fn divergence_marks_the_run_failed() {
    let mut cfg = tiny(Variant::Base, 0);
    cfg.agent.lr = 1e30;
    cfg.total_steps = 200;
    cfg.checkpoint_interval = 10;
    let dir = tempfile::tempdir().unwrap();
    let summary = train_run(&cfg, dir.path()).unwrap();
    assert_eq!(summary.status, RunStatus::Failed);
    assert!(summary.failure.as_deref().unwrap_or("").contains("numeric"));
    assert!(summary.steps_completed < cfg.total_steps);
    assert!(summary.last_checkpoint.is_some());
    assert_eq!(RunSummary::load(dir.path()).unwrap(), summary);
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let mut cfg = tiny(Variant::Cnsn, 0);
    cfg.agent.batch = 1;
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(train_run(&cfg, dir.path()), Err(Error::Config(_))));
    assert!(!dir.path().join(METRICS_FILE).exists());
}
