//! Batch normalization over `(N, H, W)` per channel, with running statistics.

use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    /// Unbiased batch variance, averaged with `momentum`.
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize, cfg: &BatchNormConfig) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::ONE),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::ONE),
            momentum: T::from_f64(cfg.momentum),
            eps: T::from_f64(cfg.eps),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
    mode: Mode,
}

/// Train mode normalizes with batch statistics and updates the running
/// averages; eval mode uses the running averages (initially mean 0, var 1).
pub fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if state.channels() != c {
        return Err(Error::config(format!(
            "batchnorm has {} channels, input has {c}",
            state.channels()
        )));
    }
    let hw = h * w;
    let m = n * hw;
    let mut means = vec![T::ZERO; c];
    let mut vars = vec![T::ZERO; c];
    match mode {
        Mode::Train => {
            if m < 2 {
                return Err(Error::config("batchnorm training needs at least two values per channel"));
            }
            let count = T::from_usize(m);
            for ch in 0..c {
                let mut sum = T::ZERO;
                for i in 0..n {
                    sum += x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
                let mean = sum / count;
                let mut var = T::ZERO;
                for i in 0..n {
                    for &v in &x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                        var += (v - mean) * (v - mean);
                    }
                }
                means[ch] = mean;
                vars[ch] = var / count;
                let unbiased = var / T::from_usize(m - 1);
                let mom = state.momentum;
                let rm = &mut state.running_mean.data_mut()[ch];
                *rm = (T::ONE - mom) * *rm + mom * mean;
                let rv = &mut state.running_var.data_mut()[ch];
                *rv = (T::ONE - mom) * *rv + mom * unbiased;
            }
        }
        Mode::Eval => {
            means.copy_from_slice(state.running_mean.data());
            vars.copy_from_slice(state.running_var.data());
        }
    }
    let inv_std: Vec<T> = vars.iter().map(|&v| T::ONE / (v + state.eps).sqrt()).collect();
    let mut x_hat = x.clone();
    let mut y = x.clone();
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            let (g, b) = (state.gamma.data()[ch], state.beta.data()[ch]);
            for (xh, yv) in x_hat.data_mut()[range.clone()].iter_mut().zip(&mut y.data_mut()[range]) {
                *xh = (*xh - means[ch]) * inv_std[ch];
                *yv = g * *xh + b;
            }
        }
    }
    y.check_finite("batchnorm output")?;
    Ok((
        y,
        BatchNormCache {
            x_hat,
            inv_std,
            gamma: state.gamma.data().to_vec(),
            mode,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = cache.x_hat.dims4()?;
    if upstream.shape() != cache.x_hat.shape() {
        return Err(Error::config("batchnorm upstream shape mismatch"));
    }
    let hw = h * w;
    let m = T::from_usize(n * hw);
    let mut gx = Tensor::zeros(upstream.shape());
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut sum_g = T::ZERO;
        let mut sum_gx = T::ZERO;
        for i in 0..n {
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for (&g, &xh) in upstream.data()[range.clone()].iter().zip(&cache.x_hat.data()[range]) {
                sum_g += g;
                sum_gx += g * xh;
            }
        }
        gg.data_mut()[ch] = sum_gx;
        gb.data_mut()[ch] = sum_g;
        let k = cache.gamma[ch] * cache.inv_std[ch];
        for i in 0..n {
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for ((out, &g), &xh) in gx.data_mut()[range.clone()]
                .iter_mut()
                .zip(&upstream.data()[range.clone()])
                .zip(&cache.x_hat.data()[range])
            {
                *out = match cache.mode {
                    Mode::Train => k * (g - sum_g / m - xh * sum_gx / m),
                    Mode::Eval => k * g,
                };
            }
        }
    }
    Ok((gx, gg, gb))
}
