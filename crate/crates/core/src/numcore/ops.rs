//! Forward and backward kernels for the convolutional encoder and heads.

use super::real::{row_major, transposed};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Stride and padding of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }

    /// Output spatial size for a given input size and kernel.
    pub fn output_size(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::config("conv stride must be >= 1"));
        }
        let padded = input + 2 * self.pad;
        if kernel == 0 || kernel > padded {
            return Err(Error::config(format!(
                "kernel {kernel} does not fit input {input} with pad {}",
                self.pad
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

/// Saved forward state of [`conv2d_forward`].
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    input_dims: (usize, usize, usize, usize),
    kernel: usize,
    geometry: ConvGeometry,
    out_hw: (usize, usize),
    /// Unfolded input, one `[C*k*k, B*Ho*Wo]` block per chunk of samples.
    cols: Vec<T>,
}

struct ConvShape {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

impl ConvShape {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn conv_shape<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    geometry: ConvGeometry,
) -> Result<ConvShape> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, wc, kh, kw) = w.dims4()?;
    if wc != c {
        return Err(Error::config(format!(
            "conv weight expects {wc} input channels, input has {c}"
        )));
    }
    if kh != kw {
        return Err(Error::config("only square kernels are supported"));
    }
    if b.shape() != [o] {
        return Err(Error::config(format!(
            "conv bias shape {:?} does not match {o} output channels",
            b.shape()
        )));
    }
    let ho = geometry.output_size(h, kh)?;
    let wo = geometry.output_size(wd, kw)?;
    Ok(ConvShape {
        n,
        c,
        h,
        w: wd,
        o,
        k: kh,
        ho,
        wo,
    })
}

/// Unfold one sample into columns `offset..offset + Ho*Wo` of a row-major
/// matrix with leading dimension `ld`.
///
/// Strided rows are first split into `stride` phase rows (`scratch`), so every
/// tap reads a contiguous run.
fn im2col<T: Real>(
    x: &[T],
    s: &ConvShape,
    g: ConvGeometry,
    cols: &mut [T],
    ld: usize,
    offset: usize,
    scratch: &mut Vec<T>,
) {
    let p = s.positions();
    let st = g.stride;
    let pw = s.w.div_ceil(st);
    let row_len = st * pw;
    let phased = if st == 1 {
        x
    } else {
        scratch.clear();
        scratch.resize(s.c * s.h * row_len, T::ZERO);
        for (src, dst) in x.chunks_exact(s.w).zip(scratch.chunks_exact_mut(row_len)) {
            for (m, group) in src.chunks(st).enumerate() {
                for (phase, &v) in group.iter().enumerate() {
                    dst[phase * pw + m] = v;
                }
            }
        }
        &scratch[..]
    };
    for c in 0..s.c {
        for ki in 0..s.k {
            for kj in 0..s.k {
                let row = (c * s.k + ki) * s.k + kj;
                let dst = &mut cols[row * ld + offset..row * ld + offset + p];
                let (lo, hi) = valid_span(s.wo, s.w, g, kj);
                // Input column of output column ow is st * ow + d.
                let d = kj as isize - g.pad as isize;
                let base = d.rem_euclid(st as isize) as usize * pw;
                let first = (lo as isize + d.div_euclid(st as isize)) as usize;
                for oh in 0..s.ho {
                    let ih = (oh * st + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oh * s.wo..(oh + 1) * s.wo];
                    if ih < 0 || ih >= s.h as isize {
                        seg.fill(T::ZERO);
                        continue;
                    }
                    let src = &phased[(c * s.h + ih as usize) * row_len + base..];
                    seg[..lo].fill(T::ZERO);
                    seg[hi..].fill(T::ZERO);
                    seg[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose tap `kj` lands inside a row of width `w`.
fn valid_span(wo: usize, w: usize, g: ConvGeometry, kj: usize) -> (usize, usize) {
    // iw = ow * stride + kj - pad must satisfy 0 <= iw < w.
    let lo = if kj >= g.pad { 0 } else { (g.pad - kj).div_ceil(g.stride) };
    let hi = if w + g.pad > kj { ((w + g.pad - kj - 1) / g.stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

fn col2im<T: Real>(cols: &[T], s: &ConvShape, g: ConvGeometry, x: &mut [T], ld: usize, offset: usize) {
    let p = s.positions();
    for c in 0..s.c {
        let plane = &mut x[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ki in 0..s.k {
            for kj in 0..s.k {
                let row = (c * s.k + ki) * s.k + kj;
                let src = &cols[row * ld + offset..row * ld + offset + p];
                for oh in 0..s.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * s.w..(ih as usize + 1) * s.w];
                    let (lo, hi) = valid_span(s.wo, s.w, g, kj);
                    let seg = &src[oh * s.wo + lo..oh * s.wo + hi];
                    let first = lo * g.stride + kj - g.pad;
                    for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(seg) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [N,C,H,W]` with `w: [O,C,k,k]` plus bias `b: [O]`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    conv2d_forward(x, w, b, ConvGeometry::new(stride, pad)).map(|(y, _)| y)
}

/// Samples per unfolded block, sized so one block stays cache resident.
fn chunk_len(s: &ConvShape) -> usize {
    const BLOCK_ELEMS: usize = 1 << 16;
    (BLOCK_ELEMS / (s.rows() * s.positions()).max(1)).clamp(1, s.n.max(1))
}

/// Forward pass. Samples are unfolded in blocks of [`chunk_len`], each block
/// a `[C*k*k, B*Ho*Wo]` matrix multiplied in one product.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    geometry: ConvGeometry,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let s = conv_shape(x, w, b, geometry)?;
    x.check_finite("conv2d input")?;
    let (rows, p) = (s.rows(), s.positions());
    let in_plane = s.c * s.h * s.w;
    let chunk = chunk_len(&s);
    let mut cols = vec![T::ZERO; rows * s.n * p];
    let mut wide = vec![T::ZERO; s.o * chunk * p];
    let mut y = vec![T::ZERO; s.n * s.o * p];
    let mut scratch = Vec::new();
    for start in (0..s.n).step_by(chunk) {
        let cn = chunk.min(s.n - start);
        let ld = cn * p;
        let block = &mut cols[rows * start * p..rows * (start + cn) * p];
        for j in 0..cn {
            let n = start + j;
            let sample = &x.data()[n * in_plane..(n + 1) * in_plane];
            im2col(sample, &s, geometry, block, ld, j * p, &mut scratch);
        }
        T::gemm(
            s.o,
            rows,
            ld,
            T::ONE,
            w.data(),
            row_major(rows),
            block,
            row_major(ld),
            T::ZERO,
            &mut wide[..s.o * ld],
            row_major(ld),
        );
        for (o, row) in wide[..s.o * ld].chunks(ld).enumerate() {
            let bias = b.data()[o];
            for j in 0..cn {
                let n = start + j;
                let dst = &mut y[(n * s.o + o) * p..(n * s.o + o + 1) * p];
                for (d, &v) in dst.iter_mut().zip(&row[j * p..(j + 1) * p]) {
                    *d = v + bias;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[s.n, s.o, s.ho, s.wo], y)?;
    let cache = ConvCache {
        input_dims: (s.n, s.c, s.h, s.w),
        kernel: s.k,
        geometry,
        out_hw: (s.ho, s.wo),
        cols,
    };
    Ok((out, cache))
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    upstream: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let o = w.shape().first().copied().unwrap_or(0);
    let b = Tensor::zeros(&[o]);
    let (_, cache) = conv2d_forward(x, w, &b, ConvGeometry::new(stride, pad))?;
    let (gx, gw, gb) = conv2d_backward_cached(&cache, w, upstream, true)?;
    Ok((gx.expect("input gradient requested"), gw, gb))
}

/// Backward pass from a saved cache. The input gradient is skipped when
/// `want_input_grad` is false (first layer of the encoder during training).
pub fn conv2d_backward_cached<T: Real>(
    cache: &ConvCache<T>,
    w: &Tensor<T>,
    upstream: &Tensor<T>,
    want_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, wd) = cache.input_dims;
    let (ho, wo) = cache.out_hw;
    let o = w.shape()[0];
    if upstream.shape() != [n, o, ho, wo] {
        return Err(Error::config(format!(
            "conv upstream shape {:?} does not match forward output {:?}",
            upstream.shape(),
            [n, o, ho, wo]
        )));
    }
    let s = ConvShape {
        n,
        c,
        h,
        w: wd,
        o,
        k: cache.kernel,
        ho,
        wo,
    };
    let (rows, p) = (s.rows(), s.positions());
    let chunk = chunk_len(&s);
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[o]);
    let mut gx = want_input_grad.then(|| Tensor::zeros(&[n, c, h, wd]));
    let mut wide = vec![T::ZERO; o * chunk * p];
    let mut gcols = vec![T::ZERO; if want_input_grad { rows * chunk * p } else { 0 }];
    let plane = c * h * wd;
    for start in (0..n).step_by(chunk) {
        let cn = chunk.min(n - start);
        let ld = cn * p;
        // Regroup the upstream block as [O, B*P].
        let wide = &mut wide[..o * ld];
        for (oc, row) in wide.chunks_mut(ld).enumerate() {
            let mut acc = T::ZERO;
            for j in 0..cn {
                let i = start + j;
                let src = &upstream.data()[(i * o + oc) * p..(i * o + oc + 1) * p];
                row[j * p..(j + 1) * p].copy_from_slice(src);
                acc += src.iter().copied().sum::<T>();
            }
            gb.data_mut()[oc] += acc;
        }
        let block = &cache.cols[rows * start * p..rows * (start + cn) * p];
        // gw[O, rows] += wide[O, BP] * block^T[BP, rows]
        T::gemm(
            o,
            ld,
            rows,
            T::ONE,
            wide,
            row_major(ld),
            block,
            transposed(ld),
            T::ONE,
            gw.data_mut(),
            row_major(rows),
        );
        if let Some(gx) = gx.as_mut() {
            // gcols[rows, BP] = w^T[rows, O] * wide[O, BP]
            let gcols = &mut gcols[..rows * ld];
            T::gemm(
                rows,
                o,
                ld,
                T::ONE,
                w.data(),
                transposed(rows),
                wide,
                row_major(ld),
                T::ZERO,
                gcols,
                row_major(ld),
            );
            for j in 0..cn {
                let i = start + j;
                col2im(gcols, &s, cache.geometry, &mut gx.data_mut()[i * plane..(i + 1) * plane], ld, j * p);
            }
        }
    }
    Ok((gx, gw, gb))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Gradient of [`relu`]; the subgradient at exactly zero is zero.
pub fn relu_backward<T: Real>(x: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.shape(), upstream.shape(), "relu_backward: shape mismatch");
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// `x [N,D] @ w [D,M] + b [M]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    let (wd, m) = w.dims2()?;
    if wd != d {
        return Err(Error::config(format!(
            "linear: input has {d} features, weight expects {wd}"
        )));
    }
    if b.shape() != [m] {
        return Err(Error::config(format!(
            "linear: bias shape {:?}, expected [{m}]",
            b.shape()
        )));
    }
    let mut y = Vec::with_capacity(n * m);
    for _ in 0..n {
        y.extend_from_slice(b.data());
    }
    T::gemm(
        n,
        d,
        m,
        T::ONE,
        x.data(),
        row_major(d),
        w.data(),
        row_major(m),
        T::ONE,
        &mut y,
        row_major(m),
    );
    Tensor::from_vec(&[n, m], y)
}

/// Returns `(grad_x, grad_w, grad_b)` for [`linear`].
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, d) = x.dims2()?;
    let (_, m) = w.dims2()?;
    if upstream.shape() != [n, m] {
        return Err(Error::config(format!(
            "linear upstream shape {:?}, expected [{n}, {m}]",
            upstream.shape()
        )));
    }
    let mut gx = Tensor::zeros(&[n, d]);
    T::gemm(
        n,
        m,
        d,
        T::ONE,
        upstream.data(),
        row_major(m),
        w.data(),
        transposed(m),
        T::ZERO,
        gx.data_mut(),
        row_major(d),
    );
    let mut gw = Tensor::zeros(&[d, m]);
    T::gemm(
        d,
        n,
        m,
        T::ONE,
        x.data(),
        transposed(d),
        upstream.data(),
        row_major(m),
        T::ZERO,
        gw.data_mut(),
        row_major(m),
    );
    let mut gb = Tensor::zeros(&[m]);
    for row in upstream.data().chunks(m) {
        for (acc, &g) in gb.data_mut().iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok((gx, gw, gb))
}

/// Huber loss with unit threshold, and its derivative.
pub fn huber<T: Real>(d: T) -> (T, T) {
    let half = T::from_f64(0.5);
    if d.abs() <= T::ONE {
        (half * d * d, d)
    } else if d > T::ZERO {
        (d - half, T::ONE)
    } else {
        (-d - half, -T::ONE)
    }
}
