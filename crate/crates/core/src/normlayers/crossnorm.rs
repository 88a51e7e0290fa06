//! CrossNorm: transplant per-channel statistics between instances of a batch.
//!
//! For instance `n` with partner `p`, every channel is re-standardized with its
//! own full-map statistics and re-styled with the partner's statistics:
//!
//! `y = s_p * (x - mu_n) / s_n + mu_p`, with `s = sqrt(sigma^2 + eps)`
//!
//! With cropping enabled, `(mu_p, sigma_p)` are measured over the partner's crop
//! window while `(mu_n, sigma_n)` always cover the full map. Gradients flow
//! through both sets of statistics.

use serde::{Deserialize, Serialize};

use super::stats::{plane_stats, plane_stats_backward, soft_sigma};
use super::{CropRegion, Pairing, PairingMode};
use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossNormConfig {
    pub crop_enabled: bool,
    /// Crop side length as a fraction of each spatial dimension, `[lo, hi]`.
    pub crop_frac_range: [f64; 2],
    /// Smoothing term; deviations are taken as `sqrt(sigma^2 + eps)`.
    pub eps: f64,
    pub pairing: PairingMode,
}

impl Default for CrossNormConfig {
    fn default() -> Self {
        Self {
            crop_enabled: true,
            crop_frac_range: [0.5, 1.0],
            eps: 1e-5,
            pairing: PairingMode::Matching,
        }
    }
}

impl CrossNormConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_frac_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!(
                "crop_frac_range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("crossnorm eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CrossNormCache<T> {
    x: Tensor<T>,
    pairing: Pairing,
    /// Window each instance's statistics are read from when it acts as a source.
    source_regions: Vec<CropRegion>,
    own_mu: Vec<T>,
    own_sigma: Vec<T>,
    source_mu: Vec<T>,
    source_sigma: Vec<T>,
    eps: T,
}

impl<T> CrossNormCache<T> {
    pub fn pairing(&self) -> &Pairing {
        &self.pairing
    }
}

pub fn crossnorm_forward<T: Real>(
    x: &Tensor<T>,
    pairing: &Pairing,
    regions: Option<&[CropRegion]>,
    cfg: &CrossNormConfig,
) -> Result<(Tensor<T>, CrossNormCache<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if pairing.len() != n {
        return Err(Error::config(format!(
            "pairing covers {} instances, batch has {n}",
            pairing.len()
        )));
    }
    let full = CropRegion::full(h, w);
    let source_regions: Vec<CropRegion> = match (cfg.crop_enabled, regions) {
        (true, Some(r)) => {
            if r.len() != n {
                return Err(Error::config(format!("{} crop regions for batch {n}", r.len())));
            }
            for region in r {
                region.validate(h, w)?;
            }
            r.to_vec()
        }
        (true, None) => return Err(Error::config("crop-enabled CrossNorm needs crop regions")),
        (false, _) => vec![full; n],
    };
    let hw = h * w;
    let eps = T::from_f64(cfg.eps);
    let mut own_mu = vec![T::ZERO; n * c];
    let mut own_sigma = vec![T::ZERO; n * c];
    let mut source_mu = vec![T::ZERO; n * c];
    let mut source_sigma = vec![T::ZERO; n * c];
    for i in 0..n {
        for ch in 0..c {
            let plane = &x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            let (m, s) = plane_stats(plane, w, &full);
            own_mu[i * c + ch] = m;
            own_sigma[i * c + ch] = s;
            let (m, s) = if source_regions[i] == full {
                (m, s)
            } else {
                plane_stats(plane, w, &source_regions[i])
            };
            source_mu[i * c + ch] = m;
            source_sigma[i * c + ch] = s;
        }
    }

    let mut y = x.clone();
    for i in 0..n {
        let p = pairing.partner(i);
        if p == i {
            continue;
        }
        for ch in 0..c {
            let (mu, s) = (own_mu[i * c + ch], soft_sigma(own_sigma[i * c + ch], eps));
            let (pm, ps) = (source_mu[p * c + ch], soft_sigma(source_sigma[p * c + ch], eps));
            let scale = ps / s;
            for v in &mut y.data_mut()[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                *v = scale * (*v - mu) + pm;
            }
        }
    }
    y.check_finite("crossnorm output")?;
    let cache = CrossNormCache {
        x: x.clone(),
        pairing: pairing.clone(),
        source_regions,
        own_mu,
        own_sigma,
        source_mu,
        source_sigma,
        eps,
    };
    Ok((y, cache))
}

pub fn crossnorm_backward<T: Real>(cache: &CrossNormCache<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let x = &cache.x;
    let (n, c, h, w) = x.dims4()?;
    if upstream.shape() != x.shape() {
        return Err(Error::config("crossnorm upstream shape mismatch"));
    }
    let hw = h * w;
    let full = CropRegion::full(h, w);
    let mut grad = Tensor::zeros(x.shape());
    let mut d_source_mu = vec![T::ZERO; n * c];
    let mut d_source_sigma = vec![T::ZERO; n * c];
    for i in 0..n {
        let p = cache.pairing.partner(i);
        for ch in 0..c {
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            let g = &upstream.data()[range.clone()];
            if p == i {
                grad.data_mut()[range].copy_from_slice(g);
                continue;
            }
            let plane = &x.data()[range.clone()];
            let mu = cache.own_mu[i * c + ch];
            let sigma = cache.own_sigma[i * c + ch];
            let s = soft_sigma(sigma, cache.eps);
            let ps = soft_sigma(cache.source_sigma[p * c + ch], cache.eps);
            let mut sum_g = T::ZERO;
            let mut sum_gz = T::ZERO;
            for (&gv, &xv) in g.iter().zip(plane) {
                sum_g += gv;
                sum_gz += gv * (xv - mu) / s;
            }
            d_source_mu[p * c + ch] += sum_g;
            d_source_sigma[p * c + ch] += sum_gz * cache.source_sigma[p * c + ch] / ps;
            // dz = ps * g, with z = (x - mu) / s and ds/dsigma = sigma / s
            let d_mu = -ps * sum_g / s;
            let d_sigma = -ps * sum_gz / s * sigma / s;
            let gplane = &mut grad.data_mut()[range];
            let scale = ps / s;
            for (gx, &gv) in gplane.iter_mut().zip(g) {
                *gx += scale * gv;
            }
            plane_stats_backward(plane, w, &full, mu, sigma, d_mu, d_sigma, gplane);
        }
    }
    for q in 0..n {
        for ch in 0..c {
            let (dm, ds) = (d_source_mu[q * c + ch], d_source_sigma[q * c + ch]);
            if dm == T::ZERO && ds == T::ZERO {
                continue;
            }
            let range = (q * c + ch) * hw..(q * c + ch + 1) * hw;
            plane_stats_backward(
                &x.data()[range.clone()],
                w,
                &cache.source_regions[q],
                cache.source_mu[q * c + ch],
                cache.source_sigma[q * c + ch],
                dm,
                ds,
                &mut grad.data_mut()[range],
            );
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normlayers::{channel_stats, sample_crop, sample_pairing};
    use crate::numcore::Prng;

    fn plain() -> CrossNormConfig {
        CrossNormConfig {
            crop_enabled: false,
            ..CrossNormConfig::default()
        }
    }

    #[test]
    fn self_partner_is_identity() {
        let mut rng = Prng::new(0);
        let x = Tensor::<f64>::from_fn(&[3, 2, 4, 4], |_| rng.normal());
        let (y, cache) = crossnorm_forward(&x, &Pairing::identity(3), None, &plain()).unwrap();
        assert_eq!(y, x);
        let up = Tensor::from_fn(x.shape(), |i| i as f64);
        assert_eq!(crossnorm_backward(&cache, &up).unwrap(), up);
    }

    #[test]
    fn swap_transplants_known_statistics() {
        // Instance 0 standardized per channel; instance 1 has mean 10, std 2.
        let mut rng = Prng::new(1);
        let raw = Tensor::<f64>::from_fn(&[2, 3, 8, 8], |_| rng.normal());
        let stats = channel_stats(&raw, None).unwrap();
        let mut x = raw.clone();
        for i in 0..2 {
            for c in 0..3 {
                let (m, s) = stats.get(i, c);
                let (tm, ts) = if i == 0 { (0.0, 1.0) } else { (10.0, 2.0) };
                for v in &mut x.data_mut()[(i * 3 + c) * 64..(i * 3 + c + 1) * 64] {
                    *v = (*v - m) / s * ts + tm;
                }
            }
        }
        let pairing = Pairing::from_partners(vec![1, 0]).unwrap();
        let (y, _) = crossnorm_forward(&x, &pairing, None, &plain()).unwrap();
        let out = channel_stats(&y, None).unwrap();
        for c in 0..3 {
            let (m, s) = out.get(0, c);
            assert!((m - 10.0).abs() < 1e-4);
            assert!((s - 2.0).abs() < 1e-3);
            let (m, s) = out.get(1, c);
            assert!(m.abs() < 1e-4);
            assert!((s - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn identical_statistics_leave_input_unchanged() {
        let mut rng = Prng::new(2);
        let a = Tensor::<f64>::from_fn(&[1, 2, 5, 5], |_| rng.normal());
        // Second instance: spatially reversed copy, so per-channel stats agree.
        let mut data = a.data().to_vec();
        for c in 0..2 {
            let mut plane = a.data()[c * 25..(c + 1) * 25].to_vec();
            plane.reverse();
            data.extend(plane);
        }
        let x = Tensor::from_vec(&[2, 2, 5, 5], data).unwrap();
        let pairing = Pairing::from_partners(vec![1, 0]).unwrap();
        let (y, _) = crossnorm_forward(&x, &pairing, None, &plain()).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn crop_variant_uses_partner_window() {
        let mut rng = Prng::new(3);
        let x = Tensor::<f64>::from_fn(&[4, 2, 8, 8], |_| rng.normal() * 3.0 + 1.0);
        let cfg = CrossNormConfig::default();
        let pairing = sample_pairing(&mut rng, 4);
        let regions: Vec<_> = (0..4).map(|_| sample_crop(&mut rng, 8, 8, &cfg)).collect();
        let (y, _) = crossnorm_forward(&x, &pairing, Some(&regions), &cfg).unwrap();
        let crop_stats = channel_stats(&x, Some(&regions)).unwrap();
        let out = channel_stats(&y, None).unwrap();
        for i in 0..4 {
            let p = pairing.partner(i);
            for c in 0..2 {
                let (m, s) = out.get(i, c);
                let (pm, ps) = crop_stats.get(p, c);
                assert!((m - pm).abs() < 1e-4);
                assert!(((s - ps) / ps).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn zero_upstream_zero_grad() {
        let mut rng = Prng::new(4);
        let x = Tensor::<f64>::from_fn(&[4, 3, 6, 6], |_| rng.normal());
        let cfg = CrossNormConfig::default();
        let pairing = sample_pairing(&mut rng, 4);
        let regions: Vec<_> = (0..4).map(|_| sample_crop(&mut rng, 6, 6, &cfg)).collect();
        let (_, cache) = crossnorm_forward(&x, &pairing, Some(&regions), &cfg).unwrap();
        let g = crossnorm_backward(&cache, &Tensor::zeros(x.shape())).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_channels_stay_finite() {
        let x = Tensor::<f32>::full(&[2, 1, 4, 4], 3.0);
        let pairing = Pairing::from_partners(vec![1, 0]).unwrap();
        let (y, cache) = crossnorm_forward(&x, &pairing, None, &plain()).unwrap();
        assert!(y.data().iter().all(|v| (*v - 3.0).abs() < 1e-6));
        let g = crossnorm_backward(&cache, &Tensor::full(x.shape(), 1.0)).unwrap();
        g.check_finite("grad").unwrap();
    }

    #[test]
    fn crop_without_regions_is_config_error() {
        let x = Tensor::<f32>::zeros(&[2, 1, 4, 4]);
        let pairing = Pairing::identity(2);
        assert!(crossnorm_forward(&x, &pairing, None, &CrossNormConfig::default()).is_err());
        assert!(crossnorm_forward(&x, &Pairing::identity(3), None, &plain()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CrossNormConfig::default().validate().is_ok());
        let bad = CrossNormConfig {
            crop_frac_range: [0.0, 1.0],
            ..CrossNormConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = CrossNormConfig {
            crop_frac_range: [0.8, 0.6],
            ..CrossNormConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
