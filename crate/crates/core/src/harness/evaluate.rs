use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{greedy_actions, obs_batch, QNet};
use crate::error::{Error, Result};
use crate::numcore::Prng;
use crate::pixelworld::{reward_bound, write_frame_png, Action, Env, Observation, ShiftSpec, WorldState};

/// Chooses actions for a batch of running episodes.
pub trait Policy {
    fn actions(&mut self, envs: &[&Env], obs: &[&Observation]) -> Result<Vec<Action>>;
}

/// Greedy policy of a frozen network, evaluated in eval mode.
pub struct Greedy<'a>(pub &'a QNet<f32>);

impl Policy for Greedy<'_> {
    fn actions(&mut self, _envs: &[&Env], obs: &[&Observation]) -> Result<Vec<Action>> {
        let x = obs_batch(obs.iter().copied());
        greedy_actions(self.0, &x)
    }
}

/// Shortest-path policy that reads the true state: horizontal moves first.
pub struct ScriptedOptimal;

impl ScriptedOptimal {
    pub fn action(state: &WorldState) -> Action {
        let ((ax, ay), (tx, ty)) = (state.agent, state.target);
        if ax < tx {
            Action::Right
        } else if ax > tx {
            Action::Left
        } else if ay < ty {
            Action::Down
        } else if ay > ty {
            Action::Up
        } else {
            Action::Stay
        }
    }
}

impl Policy for ScriptedOptimal {
    fn actions(&mut self, envs: &[&Env], _obs: &[&Observation]) -> Result<Vec<Action>> {
        Ok(envs.iter().map(|e| Self::action(e.state())).collect())
    }
}

/// Uniformly random actions.
pub struct UniformRandom(pub Prng);

impl Policy for UniformRandom {
    fn actions(&mut self, envs: &[&Env], _obs: &[&Observation]) -> Result<Vec<Action>> {
        envs.iter()
            .map(|_| Action::from_index(self.0.below(Action::COUNT as u64) as usize))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over episodes.
    pub std: f64,
}

impl EvalResult {
    pub fn from_returns(returns: Vec<f64>) -> EvalResult {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        EvalResult {
            returns,
            mean,
            std: var.sqrt(),
        }
    }
}

/// Run `episodes` full episodes of `policy` under `spec`, all in lockstep.
/// Episode `i` is seeded by `rng.split(i)`, so the same `rng` replays the same
/// layouts under every suite and for every policy.
pub fn evaluate_policy(policy: &mut dyn Policy, spec: &ShiftSpec, episodes: usize, rng: &Prng) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::config("evaluation needs at least one episode"));
    }
    let (mut envs, mut obs): (Vec<Env>, Vec<Observation>) =
        (0..episodes).map(|i| Env::reset(spec, &rng.split(i as u64))).unzip();
    let mut returns = vec![0.0; episodes];
    let mut live: Vec<usize> = (0..episodes).collect();
    while !live.is_empty() {
        let env_refs: Vec<&Env> = live.iter().map(|&i| &envs[i]).collect();
        let obs_refs: Vec<&Observation> = live.iter().map(|&i| &obs[i]).collect();
        let actions = policy.actions(&env_refs, &obs_refs)?;
        if actions.len() != live.len() {
            return Err(Error::Protocol(format!(
                "policy returned {} actions for {} episodes",
                actions.len(),
                live.len()
            )));
        }
        for (&i, a) in live.iter().zip(actions) {
            let out = envs[i].step(a)?;
            returns[i] += out.reward;
            obs[i] = out.obs;
        }
        live.retain(|&i| !envs[i].is_done());
    }
    let (lo, hi) = reward_bound();
    if let Some(r) = returns.iter().find(|r| !(lo..=hi).contains(*r)) {
        return Err(Error::Verification(format!("episode return {r} outside [{lo}, {hi}]")));
    }
    Ok(EvalResult::from_returns(returns))
}

/// Greedy evaluation of a frozen snapshot.
pub fn evaluate(snapshot: &QNet<f32>, spec: &ShiftSpec, episodes: usize, rng: &Prng) -> Result<EvalResult> {
    evaluate_policy(&mut Greedy(snapshot), spec, episodes, rng)
}

/// Play one greedy episode and write its frames as `t00.png`, `t01.png`, ...
pub fn dump_episode_frames(snapshot: &QNet<f32>, spec: &ShiftSpec, rng: &Prng, dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (mut env, mut obs) = Env::reset(spec, rng);
    let mut t = 0;
    loop {
        write_frame_png(&dir.join(format!("t{t:02}.png")), obs.newest())?;
        if env.is_done() {
            return Ok(t + 1);
        }
        let action = Greedy(snapshot).actions(&[&env], &[&obs])?[0];
        obs = env.step(action)?.obs;
        t += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::pixelworld::{optimal_return, Suite};

    #[test]
    fn scripted_policy_earns_the_shortest_path_return() {
        let spec = ShiftSpec::suite(Suite::Train);
        let rng = Prng::new(4);
        let res = evaluate_policy(&mut ScriptedOptimal, &spec, 200, &rng).unwrap();
        // Independent oracle: each layout's return is 1 + 0.1 * initial distance.
        for (i, r) in res.returns.iter().enumerate() {
            let (env, _) = Env::reset(&spec, &rng.split(i as u64));
            let s = env.state();
            let d = s.agent.0.abs_diff(s.target.0) + s.agent.1.abs_diff(s.target.1);
            assert!((r - (1.0 + 0.1 * d as f64)).abs() < 1e-9);
            assert!((r - optimal_return(s)).abs() < 1e-9);
        }
    }

    #[test]
    fn random_policy_stays_in_bounds_and_replays() {
        let enc = EncoderConfig::default();
        let mut small = enc.clone();
        for l in &mut small.layers {
            l.out_channels = 4;
        }
        let net = QNet::<f32>::new(&small, &mut Prng::new(0)).unwrap();
        let spec = ShiftSpec::suite(Suite::Train);
        let a = evaluate(&net, &spec, 6, &Prng::new(1)).unwrap();
        let b = evaluate(&net, &spec, 6, &Prng::new(1)).unwrap();
        assert_eq!(a, b);
        let (lo, hi) = reward_bound();
        assert!(a.mean >= lo && a.mean <= hi);
        let single = evaluate(&net, &spec, 1, &Prng::new(1)).unwrap();
        assert_eq!(single.returns[0], a.returns[0]);
        let r = evaluate_policy(&mut UniformRandom(Prng::new(2)), &spec, 20, &Prng::new(3)).unwrap();
        assert!(r.mean >= lo && r.mean <= hi);
    }

    #[test]
    fn layouts_are_shared_across_suites() {
        let rng = Prng::new(9);
        let per_suite: Vec<EvalResult> = Suite::ALL
            .iter()
            .map(|&s| evaluate_policy(&mut ScriptedOptimal, &ShiftSpec::suite(s), 30, &rng).unwrap())
            .collect();
        for r in &per_suite[1..] {
            assert_eq!(r.returns, per_suite[0].returns);
        }
    }

    #[test]
    fn frames_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut small = EncoderConfig::default();
        for l in &mut small.layers {
            l.out_channels = 4;
        }
        let net = QNet::<f32>::new(&small, &mut Prng::new(0)).unwrap();
        let n = dump_episode_frames(&net, &ShiftSpec::suite(Suite::VideoEasy), &Prng::new(0), dir.path()).unwrap();
        assert!(n >= 2);
        assert!(dir.path().join("t00.png").exists());
    }
}
