use crate::error::{Error, Result};
use crate::numcore::{Prng, Real, Tensor};

/// Edge-replicate pad by `pad` and crop back to the original size at the
/// offset `(dy, dx)`, each in `0..=2 * pad`. All channels share the window.
pub fn shift_with_offset<T: Real>(obs: &Tensor<T>, index: usize, pad: usize, dy: usize, dx: usize, out: &mut [T]) {
    let (_, c, h, w) = obs.dims4().expect("4-d observation");
    let plane = h * w;
    let src = &obs.data()[index * c * plane..(index + 1) * c * plane];
    for ch in 0..c {
        let sp = &src[ch * plane..(ch + 1) * plane];
        let dp = &mut out[ch * plane..(ch + 1) * plane];
        for y in 0..h {
            let sy = (y + dy).saturating_sub(pad).min(h - 1);
            let row = &sp[sy * w..(sy + 1) * w];
            let dst = &mut dp[y * w..(y + 1) * w];
            // Columns x with x + dx < pad read column 0; past w + pad - dx they read w - 1.
            let lo = pad.saturating_sub(dx).min(w);
            let hi = (w + pad).saturating_sub(dx).clamp(lo, w);
            dst[..lo].fill(row[0]);
            dst[lo..hi].copy_from_slice(&row[lo + dx - pad..hi + dx - pad]);
            dst[hi..].fill(row[w - 1]);
        }
    }
}

/// Random shift augmentation, one window per observation.
pub fn random_shift<T: Real>(obs: &Tensor<T>, pad: usize, rng: &mut Prng) -> Result<Tensor<T>> {
    let (n, c, h, w) = obs.dims4()?;
    if pad == 0 {
        return Ok(obs.clone());
    }
    if pad >= h.min(w) {
        return Err(Error::config(format!("shift pad {pad} too large for {h}x{w} frames")));
    }
    let mut out = Tensor::zeros(obs.shape());
    let per = c * h * w;
    for i in 0..n {
        let dy = rng.int_inclusive(0, 2 * pad);
        let dx = rng.int_inclusive(0, 2 * pad);
        shift_with_offset(obs, i, pad, dy, dx, &mut out.data_mut()[i * per..(i + 1) * per]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(rng: &mut Prng) -> Tensor<f32> {
        Tensor::from_fn(&[2, 3, 12, 12], |_| rng.uniform() as f32)
    }

    #[test]
    fn centered_window_is_identity() {
        let x = obs(&mut Prng::new(0));
        let mut out = vec![0.0; 3 * 144];
        shift_with_offset(&x, 1, 4, 4, 4, &mut out);
        assert_eq!(&out[..], &x.data()[3 * 144..]);
    }

    #[test]
    fn shape_is_preserved() {
        let mut rng = Prng::new(1);
        let x = obs(&mut rng);
        assert_eq!(random_shift(&x, 4, &mut rng).unwrap().shape(), x.shape());
        assert!(random_shift(&x, 12, &mut rng).is_err());
    }

    #[test]
    fn interior_content_survives() {
        let mut rng = Prng::new(2);
        let x = obs(&mut rng);
        for _ in 0..20 {
            let (dy, dx) = (rng.int_inclusive(0, 8), rng.int_inclusive(0, 8));
            let mut out = vec![0.0; 3 * 144];
            shift_with_offset(&x, 0, 4, dy, dx, &mut out);
            // Pixel (y, x) of the output comes from (y + dy - 4, x + dx - 4) when in range.
            for ch in 0..3 {
                for y in 0..12 {
                    for xx in 0..12 {
                        let (sy, sx) = (y as i64 + dy as i64 - 4, xx as i64 + dx as i64 - 4);
                        if (0..12).contains(&sy) && (0..12).contains(&sx) {
                            assert_eq!(
                                out[ch * 144 + y * 12 + xx],
                                x.data()[ch * 144 + sy as usize * 12 + sx as usize]
                            );
                        }
                    }
                }
            }
        }
    }
}
