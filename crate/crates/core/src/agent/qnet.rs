use crate::encoder::{build_encoder, sample_active_mask, ActivationMask, EncodeCache, EncoderConfig, EncoderState, Grads};
use crate::error::{Error, Result};
use crate::normlayers::Mode;
use crate::numcore::{linear, linear_backward, relu, relu_backward, Prng, Real, Tensor};
use crate::pixelworld::Action;

/// Encoder followed by `ReLU -> linear` to one value per action.
#[derive(Clone, Debug, PartialEq)]
pub struct QNet<T> {
    pub encoder: EncoderState<T>,
    /// `[feature_dim, actions]`
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct QCache<T> {
    encoder: EncodeCache<T>,
    hidden: Tensor<T>,
}

impl<T: Real> QCache<T> {
    pub fn encoder(&self) -> &EncodeCache<T> {
        &self.encoder
    }

    /// Hash of every ReLU on/off bit in the network.
    pub fn activation_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.encoder.activation_signature().hash(&mut h);
        for v in self.hidden.data() {
            (*v > T::ZERO).hash(&mut h);
        }
        h.finish()
    }
}

impl<T: Real> QNet<T> {
    pub fn new(cfg: &EncoderConfig, rng: &mut Prng) -> Result<QNet<T>> {
        let encoder = build_encoder(cfg, &mut rng.split_named("encoder"))?;
        let mut head_rng = rng.split_named("q_head");
        let bound = 1.0 / (cfg.feature_dim as f64).sqrt();
        let head_w = Tensor::from_fn(&[cfg.feature_dim, Action::COUNT], |_| {
            T::from_f64(head_rng.uniform_range(-bound, bound))
        });
        Ok(QNet {
            encoder,
            head_w,
            head_b: Tensor::zeros(&[Action::COUNT]),
        })
    }

    pub fn forward(
        &self,
        obs: &Tensor<T>,
        mask: &ActivationMask,
        mode: Mode,
        rng: &mut Prng,
    ) -> Result<(Tensor<T>, QCache<T>)> {
        let (features, encoder) = self.encoder.encode(obs, mask, mode, rng)?;
        let hidden = relu(&features);
        let q = linear(&hidden, &self.head_w, &self.head_b)?;
        q.check_finite("q values")?;
        Ok((q, QCache { encoder, hidden }))
    }

    /// Eval-mode action values; CrossNorm is never sampled.
    pub fn q_values(&self, obs: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = ActivationMask::inactive(self.encoder.cfg.crossnorm_layers());
        Ok(self.forward(obs, &mask, Mode::Eval, &mut Prng::new(0))?.0)
    }

    /// Train-mode forward with a freshly sampled CrossNorm mask.
    pub fn forward_train(&self, obs: &Tensor<T>, rng: &mut Prng) -> Result<(Tensor<T>, QCache<T>)> {
        let mask = sample_active_mask(rng, &self.encoder.cfg);
        self.forward(obs, &mask, Mode::Train, rng)
    }

    /// Parameter gradients, aligned with [`QNet::param_tensors`].
    pub fn backward(&self, cache: &QCache<T>, upstream: &Tensor<T>) -> Result<Grads<T>> {
        let (g_hidden, g_w, g_b) = linear_backward(&cache.hidden, &self.head_w, upstream)?;
        let g_features = relu_backward(&cache.hidden, &g_hidden);
        let (_, mut grads) = self.encoder.encode_backward(&cache.encoder, &g_features, false)?;
        grads.push(g_w);
        grads.push(g_b);
        Ok(grads)
    }

    pub fn param_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .encoder
            .param_tensors()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        out.push(("q_head.w".into(), &self.head_w));
        out.push(("q_head.b".into(), &self.head_b));
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.encoder.param_tensors_mut();
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Parameters followed by non-trainable buffers, with names.
    pub fn state_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.param_tensors();
        out.extend(
            self.encoder
                .buffer_tensors()
                .into_iter()
                .map(|(n, t)| (format!("encoder.{n}"), t)),
        );
        out
    }

    pub fn state_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let n_params = self.encoder.param_tensors().len();
        let mut enc = self.encoder.state_tensors_mut();
        let buffers = enc.split_off(n_params);
        enc.push(&mut self.head_w);
        enc.push(&mut self.head_b);
        enc.extend(buffers);
        enc
    }

    /// Replace all parameters and buffers from tensors in [`QNet::state_tensors`] order.
    pub fn load_state(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        let slots = self.state_tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Schema(format!(
                "checkpoint has {} tensors, network expects {}",
                tensors.len(),
                slots.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Schema(format!(
                    "checkpoint tensor shape {:?}, network expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> QNet<U> {
        let mut out = QNet {
            encoder: cast_encoder(&self.encoder),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        };
        let src: Vec<Tensor<U>> = self.state_tensors().into_iter().map(|(_, t)| t.cast()).collect();
        out.load_state(src).expect("same architecture");
        out
    }
}

fn cast_encoder<T: Real, U: Real>(enc: &EncoderState<T>) -> EncoderState<U> {
    let mut out = build_encoder::<U>(&enc.cfg, &mut Prng::new(0)).expect("validated config");
    let src = enc.param_tensors().into_iter().chain(enc.buffer_tensors());
    for (slot, (_, t)) in out.state_tensors_mut().into_iter().zip(src) {
        *slot = t.cast();
    }
    out
}

/// Lowest index among the maxima.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `target <- (1 - tau) * target + tau * online`, over parameters and buffers.
pub fn soft_update<T: Real>(target: &mut QNet<T>, online: &QNet<T>, tau: f64) {
    let tau = T::from_f64(tau);
    let keep = T::ONE - tau;
    for (t, (_, o)) in target.state_tensors_mut().into_iter().zip(online.state_tensors()) {
        for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
            *a = keep * *a + tau * b;
        }
    }
}
