use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{greedy_actions, obs_batch, Agent, Transition};
use crate::error::{Error, Result};
use crate::numcore::Prng;
use crate::pixelworld::{Action, Env, Observation, ShiftSpec, Suite};

use super::evaluate::{dump_episode_frames, evaluate};
use super::metrics::{read_metrics, MetricsWriter, RunRecord, METRICS_FILE};
use super::RunConfig;

pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
}

/// Contents of `summary.json`. Everything except the status fields is
/// recomputed from `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: super::Variant,
    pub seed: u64,
    pub status: RunStatus,
    pub failure: Option<String>,
    pub steps_completed: usize,
    pub updates: u64,
    /// Step of the last evaluation.
    pub final_step: usize,
    pub final_returns: BTreeMap<Suite, SuiteResult>,
    /// Test-suite mean over train-suite mean at `final_step`; null when the
    /// train mean is not positive.
    pub generalization_ratio: BTreeMap<Suite, Option<f64>>,
    pub last_checkpoint: Option<String>,
}

impl RunSummary {
    pub fn load(dir: &Path) -> Result<RunSummary> {
        let path = dir.join(SUMMARY_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }

    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

/// Final-step returns and generalization ratios from metrics rows.
pub fn final_results(records: &[RunRecord]) -> Result<(usize, BTreeMap<Suite, SuiteResult>, BTreeMap<Suite, Option<f64>>)> {
    let step = records
        .iter()
        .map(|r| r.step)
        .max()
        .ok_or_else(|| Error::Schema("metrics contain no rows".into()))?;
    let finals: BTreeMap<Suite, SuiteResult> = records
        .iter()
        .filter(|r| r.step == step)
        .map(|r| {
            (
                r.suite,
                SuiteResult {
                    mean: r.mean_return,
                    std: r.std_return,
                    episodes: r.episodes,
                },
            )
        })
        .collect();
    let train = finals.get(&Suite::Train).map(|r| r.mean);
    let ratios = finals
        .iter()
        .filter(|(s, _)| **s != Suite::Train)
        .map(|(s, r)| (*s, train.filter(|t| *t > 0.0).map(|t| r.mean / t)))
        .collect();
    Ok((step, finals, ratios))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the newest checkpoint in the run directory.
    pub resume: bool,
}

struct Progress {
    step: usize,
    episode: u64,
}

/// Train with default options. See [`train_run_with`].
pub fn train_run(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    train_run_with(cfg, out_dir, &TrainOptions::default())
}

/// Train on the train suite, evaluating every configured suite at step 0,
/// every `eval_interval` steps and at the end. Numeric failures end the run
/// with a failed summary; the newest checkpoint is kept.
///
/// Seeds derive from `cfg.seed` only: training episode `i` starts from
/// `split("train_env").split(i)` and evaluation episode `j` from
/// `split("eval").split(j)`, identical for every variant.
pub fn train_run_with(cfg: &RunConfig, out_dir: &Path, opts: &TrainOptions) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let root = Prng::new(cfg.seed);
    let encoder = cfg.resolved_encoder();
    let mut agent = Agent::new(cfg.agent.clone(), &encoder, &root.split_named("agent"))?;
    let env_root = root.split_named("train_env");
    let eval_rng = root.split_named("eval");
    let mut explore = root.split_named("explore");
    let metrics_path = out_dir.join(METRICS_FILE);
    let config_path = out_dir.join(CONFIG_FILE);

    let mut progress = Progress { step: 0, episode: 0 };
    let mut metrics;
    if opts.resume {
        let saved = RunConfig::load(&config_path)?;
        if &saved != cfg {
            return Err(Error::config(format!(
                "{} holds a different config; refusing to resume",
                config_path.display()
            )));
        }
        let ckpt = latest_checkpoint(out_dir)?
            .ok_or_else(|| Error::config(format!("no checkpoint under {}", out_dir.display())))?;
        let meta = agent.load_checkpoint(&ckpt)?;
        progress.step = meta["step"].as_u64().unwrap_or(0) as usize;
        // The interrupted episode is abandoned; sampling streams restart from
        // a stream keyed by the checkpoint step.
        progress.episode = meta["episode"].as_u64().unwrap_or(0) + 1;
        let resumed = root.split_named("resume").split(progress.step as u64);
        agent.reseed(&resumed.split_named("agent"));
        explore = resumed.split_named("explore");
        let kept: Vec<RunRecord> = read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| r.step <= progress.step)
            .collect();
        metrics = MetricsWriter::create(&metrics_path)?;
        metrics.write(&kept)?;
        log::info!("resuming {} from step {}", out_dir.display(), progress.step);
    } else {
        fs::write(&config_path, cfg.to_json()).map_err(|e| Error::io(&config_path, e))?;
        let _ = fs::remove_file(out_dir.join(SUMMARY_FILE));
        metrics = MetricsWriter::create(&metrics_path)?;
    }

    let eval_all = |agent: &Agent, step: usize, metrics: &mut MetricsWriter| -> Result<()> {
        let mut rows = Vec::with_capacity(cfg.suites.len());
        for &suite in &cfg.suites {
            let res = evaluate(&agent.online, &ShiftSpec::suite(suite), cfg.eval_episodes, &eval_rng)?;
            rows.push(RunRecord {
                step,
                suite,
                seed: cfg.seed,
                variant: cfg.variant,
                mean_return: res.mean,
                std_return: res.std,
                episodes: cfg.eval_episodes,
            });
        }
        let line: Vec<String> = rows.iter().map(|r| format!("{} {:.3}", r.suite, r.mean_return)).collect();
        log::info!("[{} s{}] step {step}: {}", cfg.variant, cfg.seed, line.join(", "));
        metrics.write(&rows)
    };

    let outcome = (|| -> Result<()> {
        if progress.step == 0 {
            eval_all(&agent, 0, &mut metrics)?;
        }
        let train_spec = ShiftSpec::suite(Suite::Train);
        let (mut env, mut obs) = Env::reset(&train_spec, &env_root.split(progress.episode));
        let mut last_eval = progress.step;
        let (mut loss_sum, mut q_sum, mut window) = (0.0, 0.0, 0usize);
        while progress.step < cfg.total_steps {
            let step = progress.step + 1;
            let action = explore_action(&agent, &obs, cfg.agent.epsilon(step - 1), &mut explore)?;
            let out = env.step(action)?;
            agent.replay.push(Transition {
                obs,
                action,
                reward: out.reward as f32,
                next_obs: out.obs.clone(),
                terminal: out.terminal,
            });
            obs = out.obs;
            if out.done {
                progress.episode += 1;
                (env, obs) = Env::reset(&train_spec, &env_root.split(progress.episode));
            }
            if agent.ready(step) && step % cfg.agent.update_every == 0 {
                let stats = agent.td_update()?;
                loss_sum += stats.loss;
                q_sum += stats.mean_q;
                window += 1;
            }
            progress.step = step;
            if step % cfg.eval_interval == 0 || step == cfg.total_steps {
                eval_all(&agent, step, &mut metrics)?;
                if window > 0 {
                    let w = window as f64;
                    log::info!("[{} s{}] {window} updates: td loss {:.4}, target q {:.3}", cfg.variant, cfg.seed, loss_sum / w, q_sum / w);
                }
                (loss_sum, q_sum, window) = (0.0, 0.0, 0);
                last_eval = step;
            }
            if step % cfg.checkpoint_interval == 0 {
                save_checkpoint(&agent, out_dir, &progress)?;
            }
        }
        if last_eval != cfg.total_steps {
            eval_all(&agent, cfg.total_steps, &mut metrics)?;
        }
        if cfg.dump_frames {
            for &suite in &cfg.suites {
                let dir = out_dir.join("frames").join(suite.name());
                dump_episode_frames(&agent.online, &ShiftSpec::suite(suite), &eval_rng.split(0), &dir)?;
            }
        }
        Ok(())
    })();

    let (status, failure) = match outcome {
        Ok(()) => (RunStatus::Completed, None),
        Err(Error::Numeric(msg)) => {
            log::error!("run {} failed at step {}: {msg}", out_dir.display(), progress.step);
            (RunStatus::Failed, Some(format!("numeric error at step {}: {msg}", progress.step)))
        }
        Err(e) => return Err(e),
    };
    drop(metrics);
    let records = read_metrics(&metrics_path)?;
    let (final_step, final_returns, generalization_ratio) = final_results(&records)?;
    let summary = RunSummary {
        variant: cfg.variant,
        seed: cfg.seed,
        status,
        failure,
        steps_completed: progress.step,
        updates: agent.updates,
        final_step,
        final_returns,
        generalization_ratio,
        last_checkpoint: latest_checkpoint(out_dir)?.map(|p| p.file_name().unwrap().to_string_lossy().into_owned()),
    };
    let path = out_dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

fn explore_action(agent: &Agent, obs: &Observation, epsilon: f64, rng: &mut Prng) -> Result<Action> {
    if rng.uniform() < epsilon {
        return Action::from_index(rng.below(Action::COUNT as u64) as usize);
    }
    Ok(greedy_actions(&agent.online, &obs_batch(std::iter::once(obs)))?[0])
}

fn checkpoint_name(step: usize) -> String {
    format!("step_{step:07}")
}

/// Write a checkpoint for `progress.step` and delete older ones.
fn save_checkpoint(agent: &Agent, out_dir: &Path, progress: &Progress) -> Result<()> {
    let root = out_dir.join(CHECKPOINT_DIR);
    let name = checkpoint_name(progress.step);
    let meta = serde_json::json!({ "step": progress.step, "episode": progress.episode });
    agent.save_checkpoint(&root.join(&name), meta)?;
    for old in checkpoint_dirs(out_dir)? {
        if old.file_name().is_some_and(|n| n != name.as_str()) {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
    }
    Ok(())
}

fn checkpoint_dirs(out_dir: &Path) -> Result<Vec<PathBuf>> {
    let root = out_dir.join(CHECKPOINT_DIR);
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("step_")))
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn latest_checkpoint(out_dir: &Path) -> Result<Option<PathBuf>> {
    Ok(checkpoint_dirs(out_dir)?.pop())
}
