//! Per-sample layer kernels with explicit backward passes.
//!
//! Feature maps are `[channels, height, width]` row-major buffers. Every
//! forward returns whatever the matching backward needs; backward functions
//! accumulate parameter gradients into caller-owned buffers.

use super::tensor::{gemm, MatRef, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    /// "Same"-style padding for odd kernels: `pad = dilation * (kernel - 1) / 2`.
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, dilation: usize, h: usize, w: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride,
            dilation,
            pad: dilation * (kernel - 1) / 2,
            h,
            w,
        }
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride + offset - pad` lies
/// inside `0..w`.
fn valid_range(out: usize, w: usize, stride: usize, offset: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
    // largest ox with ox * stride + offset - pad <= w - 1
    let limit = w + pad;
    let hi = if offset >= limit { 0 } else { ((limit - offset - 1) / stride + 1).min(out) };
    lo.min(hi)..hi
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    if g.is_pointwise() {
        return x.to_vec();
    }
    let (ho, wo) = (g.out_h(), g.out_w());
    let n = ho * wo;
    let mut cols = vec![T::zero(); g.patch_len() * n];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kernel {
            let ys = valid_range(ho, g.h, g.stride, ky * g.dilation, g.pad);
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let xs = valid_range(wo, g.w, g.stride, kx * g.dilation, g.pad);
                if xs.is_empty() {
                    continue;
                }
                let ix0 = xs.start * g.stride + kx * g.dilation - g.pad;
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky * g.dilation - g.pad;
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    let out = &mut dst[oy * wo + xs.start..oy * wo + xs.end];
                    if g.stride == 1 {
                        out.copy_from_slice(&src_row[ix0..ix0 + out.len()]);
                    } else {
                        for (o, v) in out.iter_mut().zip(src_row[ix0..].iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    if g.is_pointwise() {
        return cols.to_vec();
    }
    let (ho, wo) = (g.out_h(), g.out_w());
    let n = ho * wo;
    let mut x = vec![T::zero(); g.cin * g.h * g.w];
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kernel {
            let ys = valid_range(ho, g.h, g.stride, ky * g.dilation, g.pad);
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * n..(row + 1) * n];
                let xs = valid_range(wo, g.w, g.stride, kx * g.dilation, g.pad);
                if xs.is_empty() {
                    continue;
                }
                let ix0 = xs.start * g.stride + kx * g.dilation - g.pad;
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky * g.dilation - g.pad;
                    let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let s = &src[oy * wo + xs.start..oy * wo + xs.end];
                    for (d, v) in dst_row[ix0..].iter_mut().step_by(g.stride).zip(s) {
                        *d += *v;
                    }
                }
            }
        }
    }
    x
}

pub(crate) struct ConvCache<T> {
    cols: Vec<T>,
}

/// `y = W * x (+ b)`; `weight` is `[cout, cin, k, k]`.
pub(crate) fn conv_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> (Vec<T>, ConvCache<T>) {
    debug_assert_eq!(x.len(), g.cin * g.h * g.w);
    let cols = im2col(x, g);
    let n = g.out_h() * g.out_w();
    let k = g.patch_len();
    let mut y = vec![T::zero(); g.cout * n];
    if let Some(b) = bias {
        for (o, row) in y.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v = b[o]);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    gemm(
        T::one(),
        MatRef::row_major(weight, g.cout, k),
        MatRef::row_major(&cols, k, n),
        beta,
        &mut y,
    );
    (y, ConvCache { cols })
}

/// Accumulates weight/bias gradients and returns the input gradient when asked.
pub(crate) fn conv_backward<T: Scalar>(
    dy: &[T],
    weight: &[T],
    cache: &ConvCache<T>,
    g: &ConvGeom,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
    need_input_grad: bool,
) -> Option<Vec<T>> {
    let n = g.out_h() * g.out_w();
    let k = g.patch_len();
    gemm(
        T::one(),
        MatRef::row_major(dy, g.cout, n),
        MatRef::transposed(&cache.cols, k, n),
        T::one(),
        dweight,
    );
    if let Some(db) = dbias {
        for (o, row) in dy.chunks(n).enumerate() {
            db[o] += row.iter().copied().sum();
        }
    }
    if !need_input_grad {
        return None;
    }
    let mut dcols = vec![T::zero(); k * n];
    gemm(
        T::one(),
        MatRef::transposed(weight, g.cout, k),
        MatRef::row_major(dy, g.cout, n),
        T::zero(),
        &mut dcols,
    );
    Some(col2im(&dcols, g))
}

pub(crate) struct GroupNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Group normalization over `[c, hw]` with per-channel scale and shift.
pub(crate) fn group_norm_forward<T: Scalar>(
    x: &[T],
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, GroupNormCache<T>) {
    let per = c / groups;
    let n = per * hw;
    let nf = T::of(n as f64);
    let eps = T::of(NORM_EPS);
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    let mut y = vec![T::zero(); x.len()];
    for gi in 0..groups {
        let range = gi * n..(gi + 1) * n;
        let xs = &x[range.clone()];
        let mean = xs.iter().copied().sum::<T>() / nf;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for ch in gi * per..(gi + 1) * per {
            let r = ch * hw..(ch + 1) * hw;
            let (gm, bt) = (gamma[ch], beta[ch]);
            for ((&v, xh), o) in x[r.clone()].iter().zip(&mut xhat[r.clone()]).zip(&mut y[r]) {
                *xh = (v - mean) * is;
                *o = gm * *xh + bt;
            }
        }
    }
    (y, GroupNormCache { xhat, inv_std })
}

pub(crate) fn group_norm_backward<T: Scalar>(
    dy: &[T],
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[T],
    cache: &GroupNormCache<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let per = c / groups;
    let n = per * hw;
    let nf = T::of(n as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for ch in 0..c {
        let r = ch * hw..(ch + 1) * hw;
        let mut dg = T::zero();
        let mut db = T::zero();
        for (&d, &xh) in dy[r.clone()].iter().zip(&cache.xhat[r]) {
            dg += d * xh;
            db += d;
        }
        dgamma[ch] += dg;
        dbeta[ch] += db;
    }
    for gi in 0..groups {
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for ch in gi * per..(gi + 1) * per {
            let r = ch * hw..(ch + 1) * hw;
            let (mut sd, mut sdx) = (T::zero(), T::zero());
            for (&d, &xh) in dy[r.clone()].iter().zip(&cache.xhat[r]) {
                sd += d;
                sdx += d * xh;
            }
            sum_d += sd * gamma[ch];
            sum_dx += sdx * gamma[ch];
        }
        let is = cache.inv_std[gi];
        let (a, b, cst) = (is, is * sum_dx / nf, is * sum_d / nf);
        for ch in gi * per..(gi + 1) * per {
            let r = ch * hw..(ch + 1) * hw;
            let ag = a * gamma[ch];
            for ((&d, &xh), o) in dy[r.clone()].iter().zip(&cache.xhat[r.clone()]).zip(&mut dx[r]) {
                *o = ag * d - cst - b * xh;
            }
        }
    }
    dx
}

pub(crate) fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `d` where the activation `y = relu(.)` was not positive.
pub(crate) fn relu_backward_inplace<T: Scalar>(d: &mut [T], y: &[T]) {
    for (g, &v) in d.iter_mut().zip(y) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// `y = W x + b` with `W` row-major `[out, in]`.
pub(crate) fn linear_forward<T: Scalar>(x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            w[o * n_in..(o + 1) * n_in]
                .iter()
                .zip(x)
                .map(|(&a, &v)| a * v)
                .sum::<T>()
                + bias
        })
        .collect()
}

pub(crate) fn linear_backward<T: Scalar>(dy: &[T], x: &[T], w: &[T], dw: &mut [T], db: &mut [T]) -> Vec<T> {
    let n_in = x.len();
    let mut dx = vec![T::zero(); n_in];
    for (o, &d) in dy.iter().enumerate() {
        db[o] += d;
        let row = &w[o * n_in..(o + 1) * n_in];
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            drow[i] += d * x[i];
            dx[i] += d * row[i];
        }
    }
    dx
}

pub(crate) struct SeCache<T> {
    x: Vec<T>,
    squeezed: Vec<T>,
    hidden: Vec<T>,
    gate: Vec<T>,
}

pub(crate) struct SeParams<'a, T> {
    pub w1: &'a [T],
    pub b1: &'a [T],
    pub w2: &'a [T],
    pub b2: &'a [T],
}

/// Squeeze-and-excitation: channel gates from globally pooled features.
pub(crate) fn se_forward<T: Scalar>(x: &[T], c: usize, hw: usize, p: &SeParams<'_, T>) -> (Vec<T>, SeCache<T>) {
    let hwf = T::of(hw as f64);
    let squeezed: Vec<T> = x.chunks(hw).map(|ch| ch.iter().copied().sum::<T>() / hwf).collect();
    let mut hidden = linear_forward(&squeezed, p.w1, p.b1);
    relu_inplace(&mut hidden);
    let gate: Vec<T> = linear_forward(&hidden, p.w2, p.b2).into_iter().map(sigmoid).collect();
    let mut y = x.to_vec();
    for (ch, &g) in y.chunks_mut(hw).zip(&gate) {
        ch.iter_mut().for_each(|v| *v *= g);
    }
    debug_assert_eq!(gate.len(), c);
    (
        y,
        SeCache {
            x: x.to_vec(),
            squeezed,
            hidden,
            gate,
        },
    )
}

pub(crate) struct SeGrads<'a, T> {
    pub w1: &'a mut [T],
    pub b1: &'a mut [T],
    pub w2: &'a mut [T],
    pub b2: &'a mut [T],
}

pub(crate) fn se_backward<T: Scalar>(
    dy: &[T],
    hw: usize,
    p: &SeParams<'_, T>,
    cache: &SeCache<T>,
    grads: SeGrads<'_, T>,
) -> Vec<T> {
    let hwf = T::of(hw as f64);
    let mut dx = Vec::with_capacity(dy.len());
    let mut dpre_gate = Vec::with_capacity(cache.gate.len());
    for ((dch, xch), &g) in dy.chunks(hw).zip(cache.x.chunks(hw)).zip(&cache.gate) {
        let dgate: T = dch.iter().zip(xch).map(|(&d, &v)| d * v).sum();
        dpre_gate.push(dgate * g * (T::one() - g));
        dx.extend(dch.iter().map(|&d| d * g));
    }
    let mut dhidden = linear_backward(&dpre_gate, &cache.hidden, p.w2, grads.w2, grads.b2);
    relu_backward_inplace(&mut dhidden, &cache.hidden);
    let dsqueezed = linear_backward(&dhidden, &cache.squeezed, p.w1, grads.w1, grads.b1);
    for (ch, &ds) in dx.chunks_mut(hw).zip(&dsqueezed) {
        let add = ds / hwf;
        ch.iter_mut().for_each(|v| *v += add);
    }
    dx
}

/// Sparse bilinear interpolation weights (pixel-centre aligned, edge
/// clamped) from an `sh x sw` map to `dh x dw`.
pub(crate) struct Upsampler {
    taps: Vec<[(usize, f64); 4]>,
    src_len: usize,
}

impl Upsampler {
    pub fn new(sh: usize, sw: usize, dh: usize, dw: usize) -> Self {
        let ry = sh as f64 / dh as f64;
        let rx = sw as f64 / dw as f64;
        let mut taps = Vec::with_capacity(dh * dw);
        for y in 0..dh {
            let fy = ((y as f64 + 0.5) * ry - 0.5).clamp(0.0, (sh - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(sh - 1);
            let wy = fy - y0 as f64;
            for x in 0..dw {
                let fx = ((x as f64 + 0.5) * rx - 0.5).clamp(0.0, (sw - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(sw - 1);
                let wx = fx - x0 as f64;
                taps.push([
                    (y0 * sw + x0, (1.0 - wy) * (1.0 - wx)),
                    (y0 * sw + x1, (1.0 - wy) * wx),
                    (y1 * sw + x0, wy * (1.0 - wx)),
                    (y1 * sw + x1, wy * wx),
                ]);
            }
        }
        Self {
            taps,
            src_len: sh * sw,
        }
    }

    pub fn forward<T: Scalar>(&self, src: &[T]) -> Vec<T> {
        self.taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| src[i] * T::of(w)).sum())
            .collect()
    }

    pub fn backward<T: Scalar>(&self, dy: &[T]) -> Vec<T> {
        let mut dx = vec![T::zero(); self.src_len];
        for (t, &d) in self.taps.iter().zip(dy) {
            for &(i, w) in t {
                dx[i] += d * T::of(w);
            }
        }
        dx
    }
}

pub fn log_softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = z.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
    z.iter().map(|&v| v - lse).collect()
}

pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    log_softmax(z).into_iter().map(T::exp).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = (g.out_h(), g.out_w());
        let mut y = vec![0.0; g.cout * ho * wo];
        for o in 0..g.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for c in 0..g.cin {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    s += x[(c * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((o * g.cin + c) * g.kernel + ky) * g.kernel + kx];
                                }
                            }
                        }
                    }
                    y[(o * ho + oy) * wo + ox] = s;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_sum() {
        for (stride, dilation, kernel) in [(1, 1, 3), (2, 1, 3), (1, 2, 3), (1, 4, 3), (2, 1, 1), (1, 1, 1)] {
            let g = ConvGeom::new(3, 5, kernel, stride, dilation, 9, 7);
            let x: Vec<f64> = (0..3 * 9 * 7).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
            let w: Vec<f64> = (0..5 * g.patch_len()).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
            let (y, _) = conv_forward(&x, &w, None, &g);
            let want = naive_conv(&x, &w, &g);
            assert_eq!(y.len(), want.len());
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dilated_geometry_keeps_size() {
        let g = ConvGeom::new(4, 4, 3, 1, 4, 16, 16);
        assert_eq!((g.out_h(), g.out_w()), (16, 16));
        let g = ConvGeom::new(4, 4, 3, 2, 1, 64, 64);
        assert_eq!((g.out_h(), g.out_w()), (32, 32));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 1, 3, 2, 2, 7, 6);
        let x: Vec<f64> = (0..2 * 7 * 6).map(|i| (i as f64 * 0.31).sin()).collect();
        let cols = im2col(&x, &g);
        let r: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.17).cos()).collect();
        let lhs: f64 = cols.iter().zip(&r).map(|(a, b)| a * b).sum();
        let back = col2im(&r, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn upsample_constant_and_adjoint() {
        let up = Upsampler::new(4, 4, 16, 16);
        let out = up.forward(&[2.0f64; 16]);
        assert!(out.iter().all(|v| (v - 2.0).abs() < 1e-12));
        let src: Vec<f64> = (0..16).map(|i| (i as f64).sqrt()).collect();
        let r: Vec<f64> = (0..256).map(|i| (i as f64 * 0.07).sin()).collect();
        let lhs: f64 = up.forward(&src).iter().zip(&r).map(|(a, b)| a * b).sum();
        let rhs: f64 = src.iter().zip(up.backward(&r)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0f64, 999.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[1] && p[1] > p[2]);
    }
}
