//! Convolutional encoder with optional normalization after every convolution.
//!
//! Each block computes `conv -> CrossNorm (train only, if active) -> SelfNorm
//! -> ReLU`; the final feature map is flattened and projected to
//! `feature_dim`. CrossNorm layers are switched on per training forward by an
//! [`ActivationMask`] of exactly `k_active` layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normlayers::{
    batchnorm_backward, batchnorm_forward, channel_stats, crossnorm_backward, crossnorm_forward, sample_crop,
    sample_partners, selfnorm_backward, selfnorm_forward, BatchNormCache, BatchNormConfig, BatchNormState,
    CropRegion, CrossNormCache, CrossNormConfig, Mode, Pairing, SelfNormCache, SelfNormConfig, SelfNormParams,
};
use crate::numcore::{
    conv2d_backward_cached, conv2d_forward, linear, linear_backward, relu, relu_backward, ConvCache, ConvGeometry,
    Prng, Real, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Normalization placed after a convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormVariant {
    #[default]
    None,
    Cnsn,
    CnOnly,
    SnOnly,
    Bn,
}

impl NormVariant {
    pub fn has_crossnorm(self) -> bool {
        matches!(self, NormVariant::Cnsn | NormVariant::CnOnly)
    }

    pub fn has_selfnorm(self) -> bool {
        matches!(self, NormVariant::Cnsn | NormVariant::SnOnly)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Observation shape `(C, H, W)`.
    pub input: [usize; 3],
    pub layers: Vec<ConvSpec>,
    /// One entry per layer.
    pub norms: Vec<NormVariant>,
    /// CrossNorm layers switched on per training forward.
    pub k_active: usize,
    pub feature_dim: usize,
    pub crossnorm: CrossNormConfig,
    pub selfnorm: SelfNormConfig,
    pub batchnorm: BatchNormConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let conv = |stride| ConvSpec {
            out_channels: 32,
            kernel: 3,
            stride,
            pad: 1,
        };
        Self {
            input: [9, 48, 48],
            layers: vec![conv(2), conv(2), conv(2), conv(1)],
            norms: vec![NormVariant::Cnsn; 4],
            k_active: 4,
            feature_dim: 128,
            crossnorm: CrossNormConfig::default(),
            selfnorm: SelfNormConfig::default(),
            batchnorm: BatchNormConfig::default(),
        }
    }
}

impl EncoderConfig {
    /// Same normalization after every layer; `k_active` is clamped to the
    /// resulting number of CrossNorm layers.
    pub fn with_norm(mut self, norm: NormVariant) -> Self {
        self.norms = vec![norm; self.layers.len()];
        self.k_active = self.k_active.min(self.crossnorm_layers());
        self
    }

    pub fn crossnorm_layers(&self) -> usize {
        self.norms.iter().filter(|n| n.has_crossnorm()).count()
    }

    /// Spatial size `(C, H, W)` after each block.
    pub fn block_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let [_, mut h, mut w] = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let g = ConvGeometry::new(spec.stride, spec.pad);
            h = g
                .output_size(h, spec.kernel)
                .map_err(|e| Error::config(format!("layer {i}: {e}")))?;
            w = g
                .output_size(w, spec.kernel)
                .map_err(|e| Error::config(format!("layer {i}: {e}")))?;
            out.push([spec.out_channels, h, w]);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("encoder needs at least one conv layer"));
        }
        if self.norms.len() != self.layers.len() {
            return Err(Error::config(format!(
                "{} norm entries for {} layers",
                self.norms.len(),
                self.layers.len()
            )));
        }
        if self.input.iter().any(|&d| d == 0) || self.feature_dim == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.layers.iter().any(|l| l.out_channels == 0) {
            return Err(Error::config("conv layers need at least one output channel"));
        }
        let cn = self.crossnorm_layers();
        if self.k_active > cn {
            return Err(Error::config(format!(
                "k_active = {} exceeds the {cn} CrossNorm layers",
                self.k_active
            )));
        }
        self.crossnorm.validate()?;
        if self.selfnorm.hidden == 0 {
            return Err(Error::config("selfnorm needs at least one hidden unit"));
        }
        for (i, ([_, h, w], norm)) in self.block_shapes()?.iter().zip(&self.norms).enumerate() {
            if (norm.has_crossnorm() || norm.has_selfnorm()) && h * w < 2 {
                return Err(Error::config(format!(
                    "layer {i}: a {h}x{w} map is too small for per-instance statistics"
                )));
            }
        }
        Ok(())
    }

    /// Warning when every CrossNorm layer is on and the batch is small.
    pub fn stability_warning(&self, batch: usize) -> Option<String> {
        let l = self.crossnorm_layers();
        (l > 0 && self.k_active == l && batch < 4).then(|| {
            format!("all {l} CrossNorm layers active with batch {batch}; training may diverge")
        })
    }
}

/// One flag per CrossNorm-bearing layer, in layer order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationMask(pub Vec<bool>);

impl ActivationMask {
    pub fn inactive(layers: usize) -> Self {
        Self(vec![false; layers])
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// Uniform `k_active`-subset of the CrossNorm layers.
pub fn sample_active_mask(rng: &mut Prng, cfg: &EncoderConfig) -> ActivationMask {
    let l = cfg.crossnorm_layers();
    let mut mask = vec![false; l];
    for i in rng.choose_k(l, cfg.k_active.min(l)) {
        mask[i] = true;
    }
    ActivationMask(mask)
}

#[derive(Clone, Debug, PartialEq)]
pub enum NormLayer<T> {
    None,
    CrossNorm,
    SelfNorm(SelfNormParams<T>),
    Cnsn(SelfNormParams<T>),
    Bn(BatchNormState<T>),
}

impl<T: Real> NormLayer<T> {
    fn selfnorm(&self) -> Option<&SelfNormParams<T>> {
        match self {
            NormLayer::SelfNorm(p) | NormLayer::Cnsn(p) => Some(p),
            _ => None,
        }
    }

    fn has_crossnorm(&self) -> bool {
        matches!(self, NormLayer::CrossNorm | NormLayer::Cnsn(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub geometry: ConvGeometry,
    pub norm: NormLayer<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState<T> {
    pub cfg: EncoderConfig,
    pub blocks: Vec<Block<T>>,
    /// `[flat, feature_dim]`
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

/// Random draws taken by one CrossNorm layer during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossNormDraw {
    pub layer: usize,
    pub pairing: Pairing,
    pub regions: Option<Vec<CropRegion>>,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    conv: ConvCache<T>,
    crossnorm: Option<CrossNormCache<T>>,
    selfnorm: Option<SelfNormCache<T>>,
    batchnorm: Option<BatchNormCache<T>>,
    /// ReLU output.
    activation: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct EncodeCache<T> {
    blocks: Vec<BlockCache<T>>,
    flat: Tensor<T>,
    /// Running statistics produced by train-mode BatchNorm, per block.
    bn_running: Vec<Option<(Tensor<T>, Tensor<T>)>>,
    pub draws: Vec<CrossNormDraw>,
}

impl<T: Real> EncodeCache<T> {
    /// Hash of the ReLU on/off pattern, for locating kinks.
    pub fn activation_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for b in &self.blocks {
            for v in b.activation.data() {
                (*v > T::ZERO).hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Gradients aligned with [`EncoderState::param_tensors`].
pub type Grads<T> = Vec<Tensor<T>>;

/// Build and initialize an encoder: He-uniform conv weights, zero biases,
/// near-identity SelfNorm gates, BatchNorm at unit scale.
pub fn build_encoder<T: Real>(cfg: &EncoderConfig, rng: &mut Prng) -> Result<EncoderState<T>> {
    cfg.validate()?;
    let shapes = cfg.block_shapes()?;
    let mut in_channels = cfg.input[0];
    let mut blocks = Vec::with_capacity(cfg.layers.len());
    for (i, spec) in cfg.layers.iter().enumerate() {
        let mut layer_rng = rng.split(i as u64);
        let fan_in = in_channels * spec.kernel * spec.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Tensor::from_fn(&[spec.out_channels, in_channels, spec.kernel, spec.kernel], |_| {
            T::from_f64(layer_rng.uniform_range(-bound, bound))
        });
        let c = spec.out_channels;
        let mut norm_rng = layer_rng.split_named("norm");
        let norm = match cfg.norms[i] {
            NormVariant::None => NormLayer::None,
            NormVariant::CnOnly => NormLayer::CrossNorm,
            NormVariant::SnOnly => NormLayer::SelfNorm(SelfNormParams::init(c, &cfg.selfnorm, &mut norm_rng)),
            NormVariant::Cnsn => NormLayer::Cnsn(SelfNormParams::init(c, &cfg.selfnorm, &mut norm_rng)),
            NormVariant::Bn => NormLayer::Bn(BatchNormState::new(c, &cfg.batchnorm)),
        };
        blocks.push(Block {
            weight,
            bias: Tensor::zeros(&[c]),
            geometry: ConvGeometry::new(spec.stride, spec.pad),
            norm,
        });
        in_channels = c;
    }
    let [c, h, w] = *shapes.last().expect("at least one layer");
    let flat = c * h * w;
    let bound = 1.0 / (flat as f64).sqrt();
    let mut head_rng = rng.split_named("head");
    let head_w = Tensor::from_fn(&[flat, cfg.feature_dim], |_| T::from_f64(head_rng.uniform_range(-bound, bound)));
    Ok(EncoderState {
        cfg: cfg.clone(),
        blocks,
        head_w,
        head_b: Tensor::zeros(&[cfg.feature_dim]),
    })
}

impl<T: Real> EncoderState<T> {
    /// Trainable tensors in a fixed order, with stable names.
    pub fn param_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.conv.w"), &b.weight));
            out.push((format!("block{i}.conv.b"), &b.bias));
            match &b.norm {
                NormLayer::SelfNorm(p) | NormLayer::Cnsn(p) => {
                    for (name, t) in p.tensors() {
                        out.push((format!("block{i}.sn.{name}"), t));
                    }
                }
                NormLayer::Bn(s) => {
                    out.push((format!("block{i}.bn.gamma"), &s.gamma));
                    out.push((format!("block{i}.bn.beta"), &s.beta));
                }
                NormLayer::None | NormLayer::CrossNorm => {}
            }
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            match &mut b.norm {
                NormLayer::SelfNorm(p) | NormLayer::Cnsn(p) => out.extend(p.tensors_mut()),
                NormLayer::Bn(s) => {
                    out.push(&mut s.gamma);
                    out.push(&mut s.beta);
                }
                NormLayer::None | NormLayer::CrossNorm => {}
            }
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Non-trainable state (BatchNorm running statistics).
    pub fn buffer_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            if let NormLayer::Bn(s) = &b.norm {
                out.push((format!("block{i}.bn.running_mean"), &s.running_mean));
                out.push((format!("block{i}.bn.running_var"), &s.running_var));
            }
        }
        out
    }

    pub fn buffer_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            if let NormLayer::Bn(s) = &mut b.norm {
                out.push(&mut s.running_mean);
                out.push(&mut s.running_var);
            }
        }
        out
    }

    /// Parameters then buffers, in the order of `param_tensors` followed by `buffer_tensors`.
    pub fn state_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for b in &mut self.blocks {
            params.push(&mut b.weight);
            params.push(&mut b.bias);
            match &mut b.norm {
                NormLayer::SelfNorm(p) | NormLayer::Cnsn(p) => params.extend(p.tensors_mut()),
                NormLayer::Bn(s) => {
                    params.push(&mut s.gamma);
                    params.push(&mut s.beta);
                    buffers.push(&mut s.running_mean);
                    buffers.push(&mut s.running_var);
                }
                NormLayer::None | NormLayer::CrossNorm => {}
            }
        }
        params.push(&mut self.head_w);
        params.push(&mut self.head_b);
        params.extend(buffers);
        params
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Copy with every CrossNorm removed and all other parameters shared.
    pub fn without_crossnorm(&self) -> Self {
        let mut out = self.clone();
        for (b, n) in out.blocks.iter_mut().zip(out.cfg.norms.iter_mut()) {
            b.norm = match std::mem::replace(&mut b.norm, NormLayer::None) {
                NormLayer::Cnsn(p) => {
                    *n = NormVariant::SnOnly;
                    NormLayer::SelfNorm(p)
                }
                NormLayer::CrossNorm => {
                    *n = NormVariant::None;
                    NormLayer::None
                }
                other => other,
            };
        }
        out.cfg.k_active = 0;
        out
    }

    /// Commit the running statistics a train-mode forward produced.
    pub fn apply_running_stats(&mut self, cache: &EncodeCache<T>) {
        for (b, update) in self.blocks.iter_mut().zip(&cache.bn_running) {
            if let (NormLayer::Bn(s), Some((m, v))) = (&mut b.norm, update) {
                s.running_mean = m.clone();
                s.running_var = v.clone();
            }
        }
    }

    /// Forward pass. `mask` must be all-false in eval mode; CrossNorm pairings
    /// and crop windows for active layers are drawn from `rng` in layer order.
    pub fn encode(
        &self,
        obs: &Tensor<T>,
        mask: &ActivationMask,
        mode: Mode,
        rng: &mut Prng,
    ) -> Result<(Tensor<T>, EncodeCache<T>)> {
        let (n, c, h, w) = obs.dims4()?;
        if [c, h, w] != self.cfg.input {
            return Err(Error::config(format!(
                "observation shape {:?} does not match encoder input {:?}",
                [c, h, w],
                self.cfg.input
            )));
        }
        let cn_layers = self.blocks.iter().filter(|b| b.norm.has_crossnorm()).count();
        if mask.0.len() != cn_layers {
            return Err(Error::config(format!(
                "activation mask has {} entries for {cn_layers} CrossNorm layers",
                mask.0.len()
            )));
        }
        if mode == Mode::Eval && mask.count() > 0 {
            return Err(Error::config("CrossNorm cannot be active in eval mode"));
        }
        let mut caches: Vec<BlockCache<T>> = Vec::with_capacity(self.blocks.len());
        let mut bn_running = Vec::with_capacity(self.blocks.len());
        let mut draws = Vec::new();
        let mut cn_index = 0;
        for (li, block) in self.blocks.iter().enumerate() {
            let input = caches.last().map_or(obs, |c| &c.activation);
            let (mut a, conv) = conv2d_forward(input, &block.weight, &block.bias, block.geometry)?;
            let mut crossnorm = None;
            if block.norm.has_crossnorm() {
                let active = mask.0[cn_index];
                cn_index += 1;
                if active {
                    let (_, _, fh, fw) = a.dims4()?;
                    let pairing = sample_partners(rng, n, self.cfg.crossnorm.pairing);
                    let regions = self
                        .cfg
                        .crossnorm
                        .crop_enabled
                        .then(|| (0..n).map(|_| sample_crop(rng, fh, fw, &self.cfg.crossnorm)).collect::<Vec<_>>());
                    let (y, cache) = crossnorm_forward(&a, &pairing, regions.as_deref(), &self.cfg.crossnorm)?;
                    draws.push(CrossNormDraw {
                        layer: li,
                        pairing,
                        regions,
                    });
                    a = y;
                    crossnorm = Some(cache);
                }
            }
            let mut selfnorm = None;
            if let Some(params) = block.norm.selfnorm() {
                let stats = channel_stats(&a, None)?;
                let (y, cache) = selfnorm_forward(&a, &stats, params)?;
                a = y;
                selfnorm = Some(cache);
            }
            let mut batchnorm = None;
            let mut running = None;
            if let NormLayer::Bn(state) = &block.norm {
                let mut state = state.clone();
                let (y, cache) = batchnorm_forward(&a, &mut state, mode)?;
                if mode == Mode::Train {
                    running = Some((state.running_mean, state.running_var));
                }
                a = y;
                batchnorm = Some(cache);
            }
            caches.push(BlockCache {
                conv,
                crossnorm,
                selfnorm,
                batchnorm,
                activation: relu(&a),
            });
            bn_running.push(running);
        }
        let last = caches.last().map_or(obs, |c| &c.activation);
        let flat = last.clone().reshape(&[n, last.len() / n])?;
        let features = linear(&flat, &self.head_w, &self.head_b)?;
        features.check_finite("encoder features")?;
        Ok((
            features,
            EncodeCache {
                blocks: caches,
                flat,
                bn_running,
                draws,
            },
        ))
    }

    /// Gradients of the exact realization recorded in `cache`. The observation
    /// gradient is computed only when `want_obs_grad` is set.
    pub fn encode_backward(
        &self,
        cache: &EncodeCache<T>,
        upstream: &Tensor<T>,
        want_obs_grad: bool,
    ) -> Result<(Option<Tensor<T>>, Grads<T>)> {
        let (g_flat, g_head_w, g_head_b) = linear_backward(&cache.flat, &self.head_w, upstream)?;
        let mut per_block: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.blocks.len()];
        let last = cache.blocks.last().expect("non-empty encoder");
        let mut g = g_flat.reshape(last.activation.shape())?;
        let mut grad_obs = None;
        for (li, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let mut ga = relu_backward(&bc.activation, &g);
            let mut norm_grads = Vec::new();
            if let Some(bn) = &bc.batchnorm {
                let (gx, gg, gb) = batchnorm_backward(bn, &ga)?;
                ga = gx;
                norm_grads.push(gg);
                norm_grads.push(gb);
            }
            if let Some(sn) = &bc.selfnorm {
                let (gx, gp) = selfnorm_backward(sn, &ga)?;
                ga = gx;
                let gp = gp.expect("learned gates");
                norm_grads.extend(gp.tensors().into_iter().map(|(_, t)| t.clone()));
            }
            if let Some(cn) = &bc.crossnorm {
                ga = crossnorm_backward(cn, &ga)?;
            }
            let need_input = li > 0 || want_obs_grad;
            let (gx, gw, gb) = conv2d_backward_cached(&bc.conv, &block.weight, &ga, need_input)?;
            let mut grads = vec![gw, gb];
            grads.extend(norm_grads);
            per_block[li] = grads;
            match gx {
                Some(gx) if li > 0 => g = gx,
                Some(gx) => grad_obs = Some(gx),
                None => {}
            }
        }
        let mut grads: Grads<T> = per_block.into_iter().flatten().collect();
        grads.push(g_head_w);
        grads.push(g_head_b);
        Ok((grad_obs, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(norm: NormVariant) -> EncoderConfig {
        let conv = |stride| ConvSpec {
            out_channels: 4,
            kernel: 3,
            stride,
            pad: 1,
        };
        EncoderConfig {
            input: [3, 12, 12],
            layers: vec![conv(2), conv(2), conv(1)],
            norms: vec![norm; 3],
            k_active: if norm.has_crossnorm() { 3 } else { 0 },
            feature_dim: 8,
            ..EncoderConfig::default()
        }
    }

    fn obs(n: usize, cfg: &EncoderConfig, seed: u64) -> Tensor<f64> {
        let mut rng = Prng::new(seed);
        let [c, h, w] = cfg.input;
        Tensor::from_fn(&[n, c, h, w], |_| rng.uniform())
    }

    #[test]
    fn default_encoder_shape_contract() {
        let cfg = EncoderConfig::default();
        let enc = build_encoder::<f32>(&cfg, &mut Prng::new(0)).unwrap();
        let x = Tensor::full(&[2, 9, 48, 48], 0.5f32);
        let mask = ActivationMask::inactive(4);
        let (f, _) = enc.encode(&x, &mask, Mode::Eval, &mut Prng::new(1)).unwrap();
        assert_eq!(f.shape(), &[2, 128]);
        assert_eq!(cfg.block_shapes().unwrap().last().unwrap(), &[32, 6, 6]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = EncoderConfig::default();
        let a = build_encoder::<f32>(&cfg, &mut Prng::new(5)).unwrap();
        let b = build_encoder::<f32>(&cfg, &mut Prng::new(5)).unwrap();
        assert_eq!(a, b);
        let c = build_encoder::<f32>(&cfg, &mut Prng::new(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn k_active_above_crossnorm_count_rejected() {
        let cfg = EncoderConfig {
            k_active: 5,
            ..EncoderConfig::default()
        };
        assert!(matches!(build_encoder::<f32>(&cfg, &mut Prng::new(0)), Err(Error::Config(_))));
        let cfg = EncoderConfig {
            norms: vec![NormVariant::SnOnly; 4],
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(EncoderConfig::default().with_norm(NormVariant::SnOnly).k_active, 0);
    }

    #[test]
    fn mask_extremes() {
        let mut rng = Prng::new(0);
        let cfg = EncoderConfig::default();
        assert_eq!(sample_active_mask(&mut rng, &cfg).0, vec![true; 4]);
        let cfg = EncoderConfig {
            k_active: 0,
            ..cfg
        };
        assert_eq!(sample_active_mask(&mut rng, &cfg).0, vec![false; 4]);
    }

    #[test]
    fn partial_activation_of_eleven_layers() {
        let conv = ConvSpec {
            out_channels: 2,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let cfg = EncoderConfig {
            input: [3, 6, 6],
            layers: vec![conv; 11],
            norms: vec![NormVariant::Cnsn; 11],
            k_active: 5,
            feature_dim: 4,
            ..EncoderConfig::default()
        };
        cfg.validate().unwrap();
        let mut rng = Prng::new(1);
        for _ in 0..50 {
            assert_eq!(sample_active_mask(&mut rng, &cfg).count(), 5);
        }
    }

    #[test]
    fn eval_mode_is_repeatable() {
        let cfg = small_cfg(NormVariant::Cnsn);
        let enc = build_encoder::<f64>(&cfg, &mut Prng::new(2)).unwrap();
        let x = obs(3, &cfg, 3);
        let mask = ActivationMask::inactive(3);
        let (a, _) = enc.encode(&x, &mask, Mode::Eval, &mut Prng::new(0)).unwrap();
        let (b, _) = enc.encode(&x, &mask, Mode::Eval, &mut Prng::new(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_with_empty_mask_equals_eval() {
        let cfg = small_cfg(NormVariant::Cnsn);
        let enc = build_encoder::<f64>(&cfg, &mut Prng::new(2)).unwrap();
        let x = obs(3, &cfg, 4);
        let mask = ActivationMask::inactive(3);
        let (a, _) = enc.encode(&x, &mask, Mode::Train, &mut Prng::new(0)).unwrap();
        let (b, _) = enc.encode(&x, &mask, Mode::Eval, &mut Prng::new(0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_rejects_active_mask() {
        let cfg = small_cfg(NormVariant::Cnsn);
        let enc = build_encoder::<f64>(&cfg, &mut Prng::new(2)).unwrap();
        let x = obs(2, &cfg, 4);
        let mask = ActivationMask(vec![true, false, false]);
        assert!(enc.encode(&x, &mask, Mode::Eval, &mut Prng::new(0)).is_err());
    }

    #[test]
    fn train_replay_is_bit_exact() {
        let cfg = small_cfg(NormVariant::Cnsn);
        let enc = build_encoder::<f32>(&cfg, &mut Prng::new(2)).unwrap();
        let x = obs(4, &cfg, 5).cast::<f32>();
        let mask = ActivationMask(vec![true; 3]);
        let (a, ca) = enc.encode(&x, &mask, Mode::Train, &mut Prng::new(8)).unwrap();
        let (b, cb) = enc.encode(&x, &mask, Mode::Train, &mut Prng::new(8)).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(ca.draws, cb.draws);
        assert_eq!(ca.draws.len(), 3);
        let (c, _) = enc.encode(&x, &mask, Mode::Train, &mut Prng::new(9)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_instance_crossnorm_is_identity() {
        let cfg = small_cfg(NormVariant::Cnsn);
        let enc = build_encoder::<f64>(&cfg, &mut Prng::new(2)).unwrap();
        let x = obs(1, &cfg, 6);
        let (a, _) = enc.encode(&x, &ActivationMask(vec![true; 3]), Mode::Train, &mut Prng::new(0)).unwrap();
        let (b, _) = enc.encode(&x, &ActivationMask::inactive(3), Mode::Eval, &mut Prng::new(0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let cfg = small_cfg(NormVariant::Cnsn);
        let enc = build_encoder::<f64>(&cfg, &mut Prng::new(2)).unwrap();
        let x = obs(2, &cfg, 6);
        let (f, cache) = enc.encode(&x, &ActivationMask(vec![true; 3]), Mode::Train, &mut Prng::new(0)).unwrap();
        let (gx, grads) = enc.encode_backward(&cache, &Tensor::zeros(f.shape()), true).unwrap();
        assert!(gx.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        assert_eq!(grads.len(), enc.param_tensors().len());
        for (g, (_, p)) in grads.iter().zip(enc.param_tensors()) {
            assert_eq!(g.shape(), p.shape());
        }
    }

    #[test]
    fn selfnorm_receives_gradient_in_eval_graph() {
        let cfg = small_cfg(NormVariant::Cnsn);
        let enc = build_encoder::<f64>(&cfg, &mut Prng::new(2)).unwrap();
        let x = obs(2, &cfg, 7);
        let (f, cache) = enc.encode(&x, &ActivationMask::inactive(3), Mode::Eval, &mut Prng::new(0)).unwrap();
        let (_, grads) = enc.encode_backward(&cache, &Tensor::full(f.shape(), 1.0), false).unwrap();
        let names = enc.param_tensors();
        let sn_grad: f64 = names
            .iter()
            .zip(&grads)
            .filter(|((n, _), _)| n.contains(".sn."))
            .map(|(_, g)| g.data().iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        assert!(sn_grad > 0.0);
    }

    #[test]
    fn stability_warning_for_small_batches() {
        let cfg = EncoderConfig::default();
        assert!(cfg.stability_warning(2).is_some());
        assert!(cfg.stability_warning(128).is_none());
        let partial = EncoderConfig {
            k_active: 2,
            ..EncoderConfig::default()
        };
        assert!(partial.stability_warning(2).is_none());
    }
}
