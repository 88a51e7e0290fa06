//! Rendered 8x8 grid task with visually shifted evaluation suites.
//!
//! Dynamics and rewards are shared by every suite; only rendering differs.

mod render;
mod world;

pub use render::{render, Appearance, Background, PaletteSource, ShiftSpec, Suite, FRAME_LEN, FRAME_SIDE};
pub use world::{
    optimal_return, reward_bound, transition, Action, Env, Frame, Observation, StepOutcome, WorldState, CELL,
    GRID, HORIZON, STACK,
};

use std::path::Path;

use crate::error::{Error, Result};

/// Write one frame as an 8-bit RGB PNG.
pub fn write_frame_png(path: &Path, frame: &[u8]) -> Result<()> {
    if frame.len() != FRAME_LEN {
        return Err(Error::config(format!("frame has {} bytes, expected {FRAME_LEN}", frame.len())));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), FRAME_SIDE as u32, FRAME_SIDE as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let plane = FRAME_SIDE * FRAME_SIDE;
    let mut rgb = Vec::with_capacity(FRAME_LEN);
    for p in 0..plane {
        rgb.extend([frame[p], frame[plane + p], frame[2 * plane + p]]);
    }
    let to_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    enc.write_header().map_err(to_err)?.write_image_data(&rgb).map_err(to_err)?;
    Ok(())
}
