use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

/// Rectangular spatial window of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRegion {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropRegion {
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height: h,
            width: w,
        }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// Errors unless the window lies inside an `h x w` map and covers at least two pixels.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.top + self.height > h || self.left + self.width > w {
            return Err(Error::config(format!("crop {self:?} exceeds a {h}x{w} map")));
        }
        if self.area() < 2 {
            return Err(Error::config(format!(
                "crop {self:?} covers fewer than two pixels"
            )));
        }
        Ok(())
    }

    /// Flat index ranges of the window's rows in a row-major map of width `w`.
    pub(crate) fn rows(&self, w: usize) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (self.top..self.top + self.height).map(move |r| r * w + self.left..r * w + self.left + self.width)
    }
}

/// Per-(instance, channel) spatial mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<T> {
    /// `[N, C]`
    pub mu: Tensor<T>,
    /// `[N, C]`, always `>= 0`.
    pub sigma: Tensor<T>,
}

impl<T: Real> ChannelStats<T> {
    pub fn get(&self, n: usize, c: usize) -> (T, T) {
        let channels = self.mu.shape()[1];
        (self.mu.data()[n * channels + c], self.sigma.data()[n * channels + c])
    }
}

pub(crate) fn plane_stats<T: Real>(plane: &[T], w: usize, region: &CropRegion) -> (T, T) {
    let m = T::from_usize(region.area());
    let mut sum = T::ZERO;
    for r in region.rows(w) {
        sum += plane[r].iter().copied().sum::<T>();
    }
    let mu = sum / m;
    let mut var = T::ZERO;
    for r in region.rows(w) {
        var += plane[r].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
    }
    (mu, (var / m).sqrt())
}

/// `sqrt(sigma^2 + eps)`, the smoothed deviation used for normalization.
pub(crate) fn soft_sigma<T: Real>(sigma: T, eps: T) -> T {
    (sigma * sigma + eps).sqrt()
}

/// Accumulate `d mu * dmu/dx + d sigma * dsigma/dx` into `grad` over `region`.
///
/// The sigma derivative is taken as zero on a constant region.
#[allow(clippy::too_many_arguments)]
pub(crate) fn plane_stats_backward<T: Real>(
    plane: &[T],
    w: usize,
    region: &CropRegion,
    mu: T,
    sigma: T,
    d_mu: T,
    d_sigma: T,
    grad: &mut [T],
) {
    let m = T::from_usize(region.area());
    let mean_part = d_mu / m;
    let spread_part = if sigma > T::ZERO {
        d_sigma / (m * sigma)
    } else {
        T::ZERO
    };
    for r in region.rows(w) {
        for (g, &v) in grad[r.clone()].iter_mut().zip(&plane[r]) {
            *g += mean_part + spread_part * (v - mu);
        }
    }
}

/// Channel statistics of `x: [N,C,H,W]`, optionally over one crop window per instance.
pub fn channel_stats<T: Real>(x: &Tensor<T>, regions: Option<&[CropRegion]>) -> Result<ChannelStats<T>> {
    let (n, c, h, w) = x.dims4()?;
    if let Some(regions) = regions {
        if regions.len() != n {
            return Err(Error::config(format!(
                "{} crop regions for a batch of {n}",
                regions.len()
            )));
        }
        for r in regions {
            r.validate(h, w)?;
        }
    } else if h * w < 2 {
        return Err(Error::config("channel stats need at least two pixels"));
    }
    let full = CropRegion::full(h, w);
    let mut mu = Tensor::zeros(&[n, c]);
    let mut sigma = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let region = regions.map_or(&full, |r| &r[i]);
        for ch in 0..c {
            let plane = &x.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            let (m, s) = plane_stats(plane, w, region);
            mu.data_mut()[i * c + ch] = m;
            sigma.data_mut()[i * c + ch] = s;
        }
    }
    Ok(ChannelStats { mu, sigma })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 5.0);
        let s = channel_stats(&x, None).unwrap();
        assert_eq!(s.get(0, 0), (5.0, 0.0));
    }

    #[test]
    fn two_by_two_channel() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 3.0, 1.0, 3.0]).unwrap();
        let s = channel_stats(&x, None).unwrap();
        assert_eq!(s.get(0, 0), (2.0, 1.0));
    }

    #[test]
    fn full_region_matches_no_region() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 5], |i| ((i * 37) % 11) as f64);
        let a = channel_stats(&x, None).unwrap();
        let regions = [CropRegion::full(4, 5); 2];
        let b = channel_stats(&x, Some(&regions)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_region_stats() {
        // Rows 1..3, cols 1..3 of a 4x4 ramp.
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let r = [CropRegion {
            top: 1,
            left: 1,
            height: 2,
            width: 2,
        }];
        let s = channel_stats(&x, Some(&r)).unwrap();
        let vals = [5.0, 6.0, 9.0, 10.0];
        let mean = 7.5;
        let var = vals.iter().map(|v: &f64| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert_eq!(s.get(0, 0), (mean, var.sqrt()));
    }

    #[test]
    fn degenerate_regions_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let one_pixel = [CropRegion {
            top: 0,
            left: 0,
            height: 1,
            width: 1,
        }];
        assert!(matches!(channel_stats(&x, Some(&one_pixel)), Err(Error::Config(_))));
        let outside = [CropRegion {
            top: 3,
            left: 0,
            height: 2,
            width: 2,
        }];
        assert!(channel_stats(&x, Some(&outside)).is_err());
    }
}
