use serde::{Deserialize, Serialize};

use super::{CropRegion, CrossNormConfig};
use crate::error::{Error, Result};
use crate::numcore::Prng;

/// How CrossNorm chooses the instance whose statistics each instance receives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    /// Random perfect matching: partners exchange statistics mutually.
    #[default]
    Matching,
    /// Random permutation: instance `i` receives from `perm[i]`, not necessarily mutual.
    Permutation,
}

/// Source instance of the transplanted statistics, per instance.
///
/// Instances mapped to themselves pass through CrossNorm unchanged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pairing {
    partner: Vec<usize>,
}

impl Pairing {
    pub fn identity(n: usize) -> Self {
        Self {
            partner: (0..n).collect(),
        }
    }

    /// Wrap an explicit partner table; every entry must index into the batch.
    pub fn from_partners(partner: Vec<usize>) -> Result<Self> {
        let n = partner.len();
        if let Some(&bad) = partner.iter().find(|&&p| p >= n) {
            return Err(Error::config(format!("partner {bad} out of range for batch {n}")));
        }
        Ok(Self { partner })
    }

    pub fn partner(&self, i: usize) -> usize {
        self.partner[i]
    }

    pub fn partners(&self) -> &[usize] {
        &self.partner
    }

    pub fn len(&self) -> usize {
        self.partner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partner.is_empty()
    }

    pub fn is_involution(&self) -> bool {
        self.partner.iter().enumerate().all(|(i, &p)| self.partner[p] == i)
    }

    pub fn fixed_points(&self) -> usize {
        self.partner.iter().enumerate().filter(|(i, p)| i == *p).count()
    }

    /// Relabel the batch: instance `i` of the result is instance `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Self {
            partner: perm.iter().map(|&p| inverse[self.partner[p]]).collect(),
        }
    }
}

/// Uniform random perfect matching: shuffle, then pair consecutive entries.
/// With odd `n` the last shuffled index keeps itself.
pub fn sample_pairing(rng: &mut Prng, n: usize) -> Pairing {
    let order = rng.permutation(n);
    let mut partner: Vec<usize> = (0..n).collect();
    for pair in order.chunks_exact(2) {
        partner[pair[0]] = pair[1];
        partner[pair[1]] = pair[0];
    }
    Pairing { partner }
}

pub fn sample_partners(rng: &mut Prng, n: usize, mode: PairingMode) -> Pairing {
    match mode {
        PairingMode::Matching => sample_pairing(rng, n),
        PairingMode::Permutation => Pairing {
            partner: rng.permutation(n),
        },
    }
}

/// Random crop window of an `h x w` map; side lengths are drawn uniformly from
/// `ceil(lo*side)..=floor(hi*side)`, clamped to `2..=side`.
pub fn sample_crop(rng: &mut Prng, h: usize, w: usize, cfg: &CrossNormConfig) -> CropRegion {
    let [lo, hi] = cfg.crop_frac_range;
    let side = |rng: &mut Prng, len: usize| {
        let min = ((lo * len as f64).ceil() as usize).clamp(2.min(len), len);
        let max = ((hi * len as f64).floor() as usize).clamp(min, len);
        rng.int_inclusive(min, max)
    };
    let height = side(rng, h);
    let width = side(rng, w);
    let top = rng.int_inclusive(0, h - height);
    let left = rng.int_inclusive(0, w - width);
    CropRegion {
        top,
        left,
        height,
        width,
    }
}
