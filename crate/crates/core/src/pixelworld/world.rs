use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::render::{render, Appearance, ShiftSpec, FRAME_LEN};
use crate::error::{Error, Result};
use crate::numcore::Prng;

pub const GRID: usize = 8;
pub const CELL: usize = 6;
pub const HORIZON: usize = 50;
pub const STACK: usize = 3;

const REACH_REWARD: f64 = 1.0;
const SHAPING: f64 = 0.1;

/// One rendered RGB frame, channel-major, shared between stacks and replay.
pub type Frame = Arc<[u8]>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldState {
    pub agent: (usize, usize),
    pub target: (usize, usize),
    pub t: usize,
}

impl WorldState {
    pub fn distance(&self) -> usize {
        self.agent.0.abs_diff(self.target.0) + self.agent.1.abs_diff(self.target.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::config(format!("action index {i} out of range")))
    }
}

/// Deterministic dynamics: moves clamp at walls, reaching the target ends the
/// episode, and so does the horizon.
pub fn transition(state: &WorldState, action: Action) -> Result<(WorldState, f64, bool)> {
    if state.t >= HORIZON {
        return Err(Error::Protocol(format!("step at t = {} past the horizon", state.t)));
    }
    if state.agent == state.target {
        return Err(Error::Protocol("step after the target was reached".into()));
    }
    let (x, y) = state.agent;
    let agent = match action {
        Action::Up => (x, y.saturating_sub(1)),
        Action::Down => (x, (y + 1).min(GRID - 1)),
        Action::Left => (x.saturating_sub(1), y),
        Action::Right => ((x + 1).min(GRID - 1), y),
        Action::Stay => (x, y),
    };
    let next = WorldState {
        agent,
        target: state.target,
        t: state.t + 1,
    };
    let reached = agent == state.target;
    let mut reward = SHAPING * (state.distance() as f64 - next.distance() as f64);
    if reached {
        reward += REACH_REWARD;
    }
    Ok((next, reward, reached || next.t == HORIZON))
}

/// Return of any policy that reaches the target before the horizon; the
/// shaping term telescopes to `0.1 * d0`.
pub fn optimal_return(initial: &WorldState) -> f64 {
    REACH_REWARD + SHAPING * initial.distance() as f64
}

/// Closed interval containing every episode return.
pub fn reward_bound() -> (f64, f64) {
    let max_dist = 2.0 * (GRID - 1) as f64;
    (SHAPING * (1.0 - max_dist), REACH_REWARD + SHAPING * max_dist)
}

/// Three stacked frames, oldest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub frames: [Frame; STACK],
}

impl Observation {
    /// Write `value / 255 + offset` for all nine channels into `out`.
    pub fn write_into(&self, out: &mut [f32], offset: f32) {
        assert_eq!(out.len(), STACK * FRAME_LEN);
        for (frame, chunk) in self.frames.iter().zip(out.chunks_mut(FRAME_LEN)) {
            for (o, &v) in chunk.iter_mut().zip(frame.iter()) {
                *o = v as f32 * (1.0 / 255.0) + offset;
            }
        }
    }

    pub fn newest(&self) -> &Frame {
        &self.frames[STACK - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    /// True when the episode ended by reaching the target.
    pub terminal: bool,
}

/// One episode of the task under a fixed visual suite.
#[derive(Clone, Debug)]
pub struct Env {
    spec: ShiftSpec,
    appearance: Appearance,
    state: WorldState,
    frames: VecDeque<Frame>,
    done: bool,
}

impl Env {
    /// Place agent and target at distinct uniform cells and draw the
    /// episode's appearance. Layout and appearance use separate streams, so the
    /// same `rng` gives the same layout under every suite.
    pub fn reset(spec: &ShiftSpec, rng: &Prng) -> (Env, Observation) {
        let mut layout = rng.split_named("layout");
        let cells = GRID * GRID;
        let a = layout.below(cells as u64) as usize;
        let mut b = layout.below(cells as u64 - 1) as usize;
        if b >= a {
            b += 1;
        }
        let state = WorldState {
            agent: (a % GRID, a / GRID),
            target: (b % GRID, b / GRID),
            t: 0,
        };
        Self::from_state(spec, state, rng)
    }

    /// Start from a given layout with appearance drawn from `rng`.
    pub fn from_state(spec: &ShiftSpec, state: WorldState, rng: &Prng) -> (Env, Observation) {
        let appearance = Appearance::sample(spec, &mut rng.split_named("appearance"));
        let first: Frame = render(&state, spec, &appearance).into();
        let frames: VecDeque<Frame> = std::iter::repeat_n(first, STACK).collect();
        let env = Env {
            spec: spec.clone(),
            appearance,
            state,
            frames,
            done: false,
        };
        let obs = env.observation();
        (env, obs)
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn spec(&self) -> &ShiftSpec {
        &self.spec
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn observation(&self) -> Observation {
        Observation {
            frames: std::array::from_fn(|i| self.frames[i].clone()),
        }
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Protocol("step called on a finished episode".into()));
        }
        let (next, reward, done) = transition(&self.state, action)?;
        self.state = next;
        self.done = done;
        self.frames.pop_front();
        self.frames.push_back(render(&self.state, &self.spec, &self.appearance).into());
        Ok(StepOutcome {
            obs: self.observation(),
            reward,
            done,
            terminal: next.agent == next.target,
        })
    }
}
