//! Feature-statistics normalization layers: CrossNorm, SelfNorm and a
//! BatchNorm baseline, each with an exact backward pass.

mod batchnorm;
mod crossnorm;
mod pairing;
mod selfnorm;
mod stats;

use serde::{Deserialize, Serialize};

pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormConfig, BatchNormState};
pub use crossnorm::{crossnorm_backward, crossnorm_forward, CrossNormCache, CrossNormConfig};
pub use pairing::{sample_crop, sample_pairing, sample_partners, Pairing, PairingMode};
pub use selfnorm::{
    selfnorm_backward, selfnorm_forward, selfnorm_forward_with, AttentionNet, Gates, SelfNormCache,
    SelfNormConfig, SelfNormParams,
};
pub use stats::{channel_stats, ChannelStats, CropRegion};

/// Whether a forward pass is part of training or evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    #[default]
    Eval,
}
