use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::world::{WorldState, CELL, GRID};
use crate::error::{Error, Result};
use crate::numcore::Prng;

pub const FRAME_SIDE: usize = GRID * CELL;
pub const FRAME_LEN: usize = 3 * FRAME_SIDE * FRAME_SIDE;

const TRAIN_OBJECT_HUE: f64 = 0.0;
const OBJECT_SAT: f64 = 0.85;
const OBJECT_VAL: f64 = 0.9;
const TRAIN_BACKGROUND: f64 = 0.12;
const GRID_GRAY: f64 = 0.55;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Train,
    ColorHard,
    VideoEasy,
    VideoHard,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Train, Suite::ColorHard, Suite::VideoEasy, Suite::VideoHard];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Train => "train",
            Suite::ColorHard => "color_hard",
            Suite::VideoEasy => "video_easy",
            Suite::VideoHard => "video_hard",
        }
    }

    pub fn parse(name: &str) -> Result<Suite> {
        Suite::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::config(format!("unknown suite {name:?}")))
    }
}

impl std::fmt::Display for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaletteSource {
    /// Training colors.
    Fixed,
    /// Per-episode object and background hues drawn from `[min_deg, max_deg]`.
    HeldOutHue { min_deg: f64, max_deg: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Static,
    /// Two-color sinusoidal plaid drifting with time.
    Plaid,
    /// Fresh uniform noise every step.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub suite: Suite,
    pub palette: PaletteSource,
    pub background: Background,
    pub grid_lines_visible: bool,
}

impl ShiftSpec {
    pub fn suite(suite: Suite) -> ShiftSpec {
        let (palette, background, grid_lines_visible) = match suite {
            Suite::Train => (PaletteSource::Fixed, Background::Static, true),
            Suite::ColorHard => (
                PaletteSource::HeldOutHue {
                    min_deg: 60.0,
                    max_deg: 300.0,
                },
                Background::Static,
                true,
            ),
            Suite::VideoEasy => (PaletteSource::Fixed, Background::Plaid, true),
            Suite::VideoHard => (PaletteSource::Fixed, Background::Noise, false),
        };
        ShiftSpec {
            suite,
            palette,
            background,
            grid_lines_visible,
        }
    }

    pub fn by_name(name: &str) -> Result<ShiftSpec> {
        Suite::parse(name).map(ShiftSpec::suite)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Plaid {
    colors: [[f64; 3]; 2],
    freq: [f64; 2],
    phase: [f64; 2],
    velocity: [f64; 2],
}

/// Per-episode rendering parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Appearance {
    pub agent: [f64; 3],
    pub target: [f64; 3],
    pub background: [f64; 3],
    pub grid: [f64; 3],
    plaid: Option<Plaid>,
    noise_seed: Option<u64>,
}

pub(crate) fn hsv(hue_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = hue_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl Appearance {
    pub fn sample(spec: &ShiftSpec, rng: &mut Prng) -> Appearance {
        let train_object = hsv(TRAIN_OBJECT_HUE, OBJECT_SAT, OBJECT_VAL);
        let mut app = Appearance {
            agent: train_object,
            target: train_object,
            background: [TRAIN_BACKGROUND; 3],
            grid: [GRID_GRAY; 3],
            plaid: None,
            noise_seed: None,
        };
        if let PaletteSource::HeldOutHue { min_deg, max_deg } = spec.palette {
            let object_hue = rng.uniform_range(min_deg, max_deg);
            app.agent = hsv(object_hue, OBJECT_SAT, OBJECT_VAL);
            app.target = app.agent;
            let bg_hue = rng.uniform_range(min_deg, max_deg);
            app.background = hsv(bg_hue, 0.6, 0.22);
        }
        match spec.background {
            Background::Static => {}
            Background::Plaid => {
                let mut color = || hsv(rng.uniform_range(0.0, 360.0), rng.uniform_range(0.3, 0.8), rng.uniform_range(0.1, 0.5));
                let colors = [color(), color()];
                let freq = [rng.uniform_range(1.0, 4.0), rng.uniform_range(1.0, 4.0)];
                let phase = [rng.uniform_range(0.0, TAU), rng.uniform_range(0.0, TAU)];
                let mut velocity = [rng.uniform_range(0.5, 2.0), rng.uniform_range(0.5, 2.0)];
                for v in &mut velocity {
                    if rng.bernoulli(0.5) {
                        *v = -*v;
                    }
                }
                app.plaid = Some(Plaid {
                    colors,
                    freq,
                    phase,
                    velocity,
                });
            }
            Background::Noise => app.noise_seed = Some(rng.next_u64()),
        }
        app
    }

    fn background_at(&self, x: usize, y: usize, t: usize, noise: &mut Option<Prng>) -> [f64; 3] {
        if let Some(p) = &self.plaid {
            let side = FRAME_SIDE as f64;
            let u = TAU * p.freq[0] * (x as f64 + p.velocity[0] * t as f64) / side + p.phase[0];
            let v = TAU * p.freq[1] * (y as f64 + p.velocity[1] * t as f64) / side + p.phase[1];
            let w = 0.5 + 0.25 * u.sin() + 0.25 * v.sin();
            return std::array::from_fn(|c| p.colors[0][c] * (1.0 - w) + p.colors[1][c] * w);
        }
        if let Some(rng) = noise {
            return std::array::from_fn(|_| rng.uniform_range(0.0, 0.6));
        }
        self.background
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// What occupies pixel `(x, y)` apart from the background.
fn overlay(state: &WorldState, app: &Appearance, grid: bool, x: usize, y: usize) -> Option<[f64; 3]> {
    let (cx, cy) = (x / CELL, y / CELL);
    let (px, py) = (x % CELL, y % CELL);
    let inside = px >= 1 && py >= 1;
    if inside && (cx, cy) == state.agent {
        return Some(app.agent);
    }
    if inside && (cx, cy) == state.target {
        let ring = px == 1 || py == 1 || px == CELL - 1 || py == CELL - 1;
        if ring {
            return Some(app.target);
        }
    }
    if grid && (px == 0 || py == 0) {
        return Some(app.grid);
    }
    None
}

/// Render the newest frame for `state` under `spec`, channel-major RGB bytes.
/// Animated backgrounds advance with `state.t`.
pub fn render(state: &WorldState, spec: &ShiftSpec, app: &Appearance) -> Vec<u8> {
    let plane = FRAME_SIDE * FRAME_SIDE;
    let mut out = vec![0u8; FRAME_LEN];
    let mut noise = app.noise_seed.map(|seed| Prng::new(seed).split(state.t as u64));
    for y in 0..FRAME_SIDE {
        for x in 0..FRAME_SIDE {
            let rgb = match overlay(state, app, spec.grid_lines_visible, x, y) {
                Some(c) => c,
                None => app.background_at(x, y, state.t, &mut noise),
            };
            for (c, v) in rgb.iter().enumerate() {
                out[c * plane + y * FRAME_SIDE + x] = to_byte(*v);
            }
        }
    }
    out
}
