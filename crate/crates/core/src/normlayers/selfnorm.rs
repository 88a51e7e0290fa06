//! SelfNorm: restore each channel with recalibrated statistics.
//!
//! `y = g(mu, sigma) * sigma * (x - mu) / sigma + f(mu, sigma) * mu`
//!
//! Standardizing and restoring with the same deviation cancels, so the layer
//! is computed as `g * (x - mu) + f * mu`.
//!
//! `f` and `g` are per-channel two-layer maps `(mu, sigma) -> (0, 1)`:
//! affine(2 -> h), tanh, affine(h -> 1), sigmoid.

use serde::{Deserialize, Serialize};

use super::stats::{plane_stats_backward, ChannelStats, CropRegion};
use crate::error::{Error, Result};
use crate::numcore::{Prng, Real, Tensor};

/// Pre-sigmoid activations are clamped to this magnitude so gate values stay
/// strictly inside (0, 1) in single precision.
const GATE_LOGIT_LIMIT: f64 = 15.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfNormConfig {
    pub hidden: usize,
    /// Initial bias of the output unit; sigmoid(4) is about 0.982.
    pub init_output_bias: f64,
    /// Half-width of the uniform initialization of the remaining weights.
    pub init_scale: f64,
}

impl Default for SelfNormConfig {
    fn default() -> Self {
        Self {
            hidden: 2,
            init_output_bias: 4.0,
            init_scale: 0.1,
        }
    }
}

/// One attention map, with independent weights per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionNet<T> {
    /// `[C, h, 2]`, input order `(mu, sigma)`.
    pub w1: Tensor<T>,
    /// `[C, h]`
    pub b1: Tensor<T>,
    /// `[C, h]`
    pub w2: Tensor<T>,
    /// `[C]`
    pub b2: Tensor<T>,
}

struct GateEval<T> {
    out: T,
    hidden: Vec<T>,
    clamped: bool,
}

impl<T: Real> AttentionNet<T> {
    fn init(channels: usize, cfg: &SelfNormConfig, rng: &mut Prng) -> Self {
        let h = cfg.hidden;
        let mut draw = |shape: &[usize]| {
            Tensor::from_fn(shape, |_| T::from_f64(rng.uniform_range(-cfg.init_scale, cfg.init_scale)))
        };
        let w1 = draw(&[channels, h, 2]);
        let b1 = draw(&[channels, h]);
        let w2 = draw(&[channels, h]);
        Self {
            w1,
            b1,
            w2,
            b2: Tensor::full(&[channels], T::from_f64(cfg.init_output_bias)),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: Tensor::zeros(self.w1.shape()),
            b1: Tensor::zeros(self.b1.shape()),
            w2: Tensor::zeros(self.w2.shape()),
            b2: Tensor::zeros(self.b2.shape()),
        }
    }

    fn hidden_width(&self) -> usize {
        self.b1.shape()[1]
    }

    fn eval(&self, c: usize, mu: T, sigma: T) -> GateEval<T> {
        let h = self.hidden_width();
        let w1 = &self.w1.data()[c * h * 2..(c + 1) * h * 2];
        let b1 = &self.b1.data()[c * h..(c + 1) * h];
        let w2 = &self.w2.data()[c * h..(c + 1) * h];
        let mut hidden = Vec::with_capacity(h);
        let mut logit = self.b2.data()[c];
        for j in 0..h {
            let a = (w1[2 * j] * mu + w1[2 * j + 1] * sigma + b1[j]).tanh();
            logit += w2[j] * a;
            hidden.push(a);
        }
        let limit = T::from_f64(GATE_LOGIT_LIMIT);
        let clamped = logit > limit || logit < -limit;
        let logit = if logit > limit {
            limit
        } else if logit < -limit {
            -limit
        } else {
            logit
        };
        GateEval {
            out: T::ONE / (T::ONE + (-logit).exp()),
            hidden,
            clamped,
        }
    }

    /// Accumulate parameter gradients; returns `(d mu, d sigma)`.
    fn backward(&self, c: usize, mu: T, sigma: T, gate: &GateEval<T>, d_out: T, grads: &mut Self) -> (T, T) {
        if gate.clamped {
            return (T::ZERO, T::ZERO);
        }
        let h = self.hidden_width();
        let d_logit = d_out * gate.out * (T::ONE - gate.out);
        grads.b2.data_mut()[c] += d_logit;
        let (mut d_mu, mut d_sigma) = (T::ZERO, T::ZERO);
        for j in 0..h {
            let a = gate.hidden[j];
            grads.w2.data_mut()[c * h + j] += d_logit * a;
            let d_pre = d_logit * self.w2.data()[c * h + j] * (T::ONE - a * a);
            grads.b1.data_mut()[c * h + j] += d_pre;
            grads.w1.data_mut()[(c * h + j) * 2] += d_pre * mu;
            grads.w1.data_mut()[(c * h + j) * 2 + 1] += d_pre * sigma;
            d_mu += d_pre * self.w1.data()[(c * h + j) * 2];
            d_sigma += d_pre * self.w1.data()[(c * h + j) * 2 + 1];
        }
        (d_mu, d_sigma)
    }

    /// `(mu, sigma) -> gate` for channel `c`.
    pub fn value(&self, c: usize, mu: T, sigma: T) -> T {
        self.eval(c, mu, sigma).out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfNormParams<T> {
    /// Mean gate.
    pub f: AttentionNet<T>,
    /// Scale gate.
    pub g: AttentionNet<T>,
}

impl<T: Real> SelfNormParams<T> {
    /// Near-identity initialization.
    pub fn init(channels: usize, cfg: &SelfNormConfig, rng: &mut Prng) -> Self {
        let f = AttentionNet::init(channels, cfg, rng);
        let g = AttentionNet::init(channels, cfg, rng);
        Self { f, g }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            f: self.f.zeros_like(),
            g: self.g.zeros_like(),
        }
    }

    pub fn channels(&self) -> usize {
        self.f.b2.len()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("f.w1", &self.f.w1),
            ("f.b1", &self.f.b1),
            ("f.w2", &self.f.w2),
            ("f.b2", &self.f.b2),
            ("g.w1", &self.g.w1),
            ("g.b1", &self.g.b1),
            ("g.w2", &self.g.w2),
            ("g.b2", &self.g.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.f.w1,
            &mut self.f.b1,
            &mut self.f.w2,
            &mut self.f.b2,
            &mut self.g.w1,
            &mut self.g.b1,
            &mut self.g.w2,
            &mut self.g.b2,
        ]
    }
}

/// Where the gate values come from.
#[derive(Clone, Copy, Debug)]
pub enum Gates<'a, T> {
    Learned(&'a SelfNormParams<T>),
    /// Constant gates, for checking the closed form.
    Forced { f: T, g: T },
}

#[derive(Clone, Debug)]
pub struct SelfNormCache<T> {
    x: Tensor<T>,
    stats: ChannelStats<T>,
    f_gates: Vec<(T, Vec<T>, bool)>,
    g_gates: Vec<(T, Vec<T>, bool)>,
    params: Option<SelfNormParams<T>>,
}

pub fn selfnorm_forward<T: Real>(
    x: &Tensor<T>,
    stats: &ChannelStats<T>,
    params: &SelfNormParams<T>,
) -> Result<(Tensor<T>, SelfNormCache<T>)> {
    selfnorm_forward_with(x, stats, Gates::Learned(params))
}

pub fn selfnorm_forward_with<T: Real>(
    x: &Tensor<T>,
    stats: &ChannelStats<T>,
    gates: Gates<'_, T>,
) -> Result<(Tensor<T>, SelfNormCache<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if stats.mu.shape() != [n, c] || stats.sigma.shape() != [n, c] {
        return Err(Error::config("selfnorm statistics do not match the input batch"));
    }
    if let Gates::Learned(p) = gates {
        if p.channels() != c {
            return Err(Error::config(format!(
                "selfnorm has {} channels, input has {c}",
                p.channels()
            )));
        }
    }
    let hw = h * w;
    let mut y = x.clone();
    let mut f_gates = Vec::with_capacity(n * c);
    let mut g_gates = Vec::with_capacity(n * c);
    for i in 0..n {
        for ch in 0..c {
            let (mu, sigma) = stats.get(i, ch);
            let (fv, gv) = match gates {
                Gates::Learned(p) => {
                    let fe = p.f.eval(ch, mu, sigma);
                    let ge = p.g.eval(ch, mu, sigma);
                    let vals = (fe.out, ge.out);
                    f_gates.push((fe.out, fe.hidden, fe.clamped));
                    g_gates.push((ge.out, ge.hidden, ge.clamped));
                    vals
                }
                Gates::Forced { f, g } => {
                    f_gates.push((f, Vec::new(), true));
                    g_gates.push((g, Vec::new(), true));
                    (f, g)
                }
            };
            let scale = gv;
            let shift = fv * mu;
            for v in &mut y.data_mut()[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                *v = scale * (*v - mu) + shift;
            }
        }
    }
    y.check_finite("selfnorm output")?;
    let params = match gates {
        Gates::Learned(p) => Some(p.clone()),
        Gates::Forced { .. } => None,
    };
    Ok((
        y,
        SelfNormCache {
            x: x.clone(),
            stats: stats.clone(),
            f_gates,
            g_gates,
            params,
        },
    ))
}

/// Gradients with respect to the input (through the statistics) and the gate parameters.
/// Parameter gradients are `None` for forced gates.
pub fn selfnorm_backward<T: Real>(
    cache: &SelfNormCache<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Option<SelfNormParams<T>>)> {
    let x = &cache.x;
    let (n, c, h, w) = x.dims4()?;
    if upstream.shape() != x.shape() {
        return Err(Error::config("selfnorm upstream shape mismatch"));
    }
    let hw = h * w;
    let full = CropRegion::full(h, w);
    let mut grad = Tensor::zeros(x.shape());
    let mut pgrads = cache.params.as_ref().map(SelfNormParams::zeros_like);
    for i in 0..n {
        for ch in 0..c {
            let k = i * c + ch;
            let (mu, sigma) = cache.stats.get(i, ch);
            let (fv, gv) = (cache.f_gates[k].0, cache.g_gates[k].0);
            let range = k * hw..(k + 1) * hw;
            let plane = &x.data()[range.clone()];
            let g = &upstream.data()[range.clone()];
            let mut sum_g = T::ZERO;
            let mut sum_gd = T::ZERO;
            for (&gv_, &xv) in g.iter().zip(plane) {
                sum_g += gv_;
                sum_gd += gv_ * (xv - mu);
            }
            let mut d_mu = (fv - gv) * sum_g;
            let mut d_sigma = T::ZERO;
            if let (Some(params), Some(pg)) = (cache.params.as_ref(), pgrads.as_mut()) {
                let fe = GateEval {
                    out: fv,
                    hidden: cache.f_gates[k].1.clone(),
                    clamped: cache.f_gates[k].2,
                };
                let ge = GateEval {
                    out: gv,
                    hidden: cache.g_gates[k].1.clone(),
                    clamped: cache.g_gates[k].2,
                };
                let (fm, fs) = params.f.backward(ch, mu, sigma, &fe, sum_g * mu, &mut pg.f);
                let (gm, gs) = params.g.backward(ch, mu, sigma, &ge, sum_gd, &mut pg.g);
                d_mu += fm + gm;
                d_sigma += fs + gs;
            }
            let gplane = &mut grad.data_mut()[range];
            for (gx, &gv_) in gplane.iter_mut().zip(g) {
                *gx += gv * gv_;
            }
            plane_stats_backward(plane, w, &full, mu, sigma, d_mu, d_sigma, gplane);
        }
    }
    Ok((grad, pgrads))
}
