//! Forward and backward kernels over NHWC activations.

use crate::scalar::{lit, Scalar};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Activation batch in NHWC layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Act<T> {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Act<T> {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            n,
            h,
            w,
            c,
            data: vec![T::zero(); n * h * w * c],
        }
    }

    pub fn same_shape_zeros(&self) -> Self {
        Self::zeros(self.n, self.h, self.w, self.c)
    }

    /// Rows of length `c`, one per (n, y, x).
    pub fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// Kernel geometry of a convolution weight `(kw, kh, cin, cout)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kw: usize,
    pub kh: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn from_dims(dims: &[usize], stride: usize) -> Self {
        let (kw, kh) = (dims[0], dims[1]);
        Self {
            kw,
            kh,
            cin: dims[2],
            cout: dims[3],
            stride,
            pad: kh / 2,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    #[inline]
    fn wrow(&self, kx: usize, ky: usize, ci: usize) -> usize {
        ((kx * self.kh + ky) * self.cin + ci) * self.cout
    }

    /// Input coordinate hit by output `o` and kernel tap `k`, if in bounds.
    #[inline]
    fn tap(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.pad).filter(|&i| i < extent)
    }
}

pub fn conv2d_forward<T: Scalar>(x: &Act<T>, weight: &[T], g: ConvGeom) -> Act<T> {
    debug_assert_eq!(x.c, g.cin);
    let (oh, ow) = g.out_hw(x.h, x.w);
    let mut out = Act::zeros(x.n, oh, ow, g.cout);
    for n in 0..x.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o0 = ((n * oh + oy) * ow + ox) * g.cout;
                let dst = &mut out.data[o0..o0 + g.cout];
                for ky in 0..g.kh {
                    let Some(iy) = g.tap(oy, ky, x.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.tap(ox, kx, x.w) else { continue };
                        let i0 = ((n * x.h + iy) * x.w + ix) * x.c;
                        for (ci, &a) in x.data[i0..i0 + x.c].iter().enumerate() {
                            if a == T::zero() {
                                continue;
                            }
                            let w0 = g.wrow(kx, ky, ci);
                            for (d, &wv) in dst.iter_mut().zip(&weight[w0..w0 + g.cout]) {
                                *d += a * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad wrt input, grad wrt weight). The input gradient is skipped
/// when `need_dx` is false.
pub fn conv2d_backward<T: Scalar>(
    x: &Act<T>,
    weight: &[T],
    g: ConvGeom,
    dy: &Act<T>,
    need_dx: bool,
) -> (Option<Act<T>>, Vec<T>) {
    let mut dw = vec![T::zero(); weight.len()];
    let mut dx = need_dx.then(|| x.same_shape_zeros());
    let (oh, ow) = (dy.h, dy.w);
    for n in 0..x.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o0 = ((n * oh + oy) * ow + ox) * g.cout;
                let grad = &dy.data[o0..o0 + g.cout];
                for ky in 0..g.kh {
                    let Some(iy) = g.tap(oy, ky, x.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.tap(ox, kx, x.w) else { continue };
                        let i0 = ((n * x.h + iy) * x.w + ix) * x.c;
                        for ci in 0..x.c {
                            let w0 = g.wrow(kx, ky, ci);
                            let a = x.data[i0 + ci];
                            if a != T::zero() {
                                for (d, &gv) in dw[w0..w0 + g.cout].iter_mut().zip(grad) {
                                    *d += a * gv;
                                }
                            }
                            if let Some(dx) = dx.as_mut() {
                                let s: T = weight[w0..w0 + g.cout]
                                    .iter()
                                    .zip(grad)
                                    .map(|(&wv, &gv)| wv * gv)
                                    .sum();
                                dx.data[i0 + ci] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Batch,
    /// Normalize with running statistics.
    Running,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub mode: BnMode,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Batch normalization over (n, y, x) per channel.
pub fn bn_forward<T: Scalar>(
    x: &Act<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    mode: BnMode,
) -> (Act<T>, BnCache<T>) {
    let c = x.c;
    let m = x.pixels();
    let eps: T = lit(BN_EPS);
    let (mean, var) = match mode {
        BnMode::Batch => {
            let mut mean = vec![T::zero(); c];
            for row in x.data.chunks_exact(c) {
                for (s, &v) in mean.iter_mut().zip(row) {
                    *s += v;
                }
            }
            let inv_m = T::one() / T::from_usize(m).unwrap();
            mean.iter_mut().for_each(|s| *s *= inv_m);
            let mut var = vec![T::zero(); c];
            for row in x.data.chunks_exact(c) {
                for ((s, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - mu;
                    *s += d * d;
                }
            }
            var.iter_mut().for_each(|s| *s *= inv_m);
            (mean, var)
        }
        BnMode::Running => (running_mean.to_vec(), running_var.to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut out = x.same_shape_zeros();
    for ((xr, hr), or) in x
        .data
        .chunks_exact(c)
        .zip(xhat.chunks_exact_mut(c))
        .zip(out.data.chunks_exact_mut(c))
    {
        for ch in 0..c {
            let h = (xr[ch] - mean[ch]) * inv_std[ch];
            hr[ch] = h;
            or[ch] = gamma[ch] * h + beta[ch];
        }
    }
    let cache = BnCache {
        mode,
        xhat,
        inv_std,
        batch_mean: mean,
        batch_var: var,
    };
    (out, cache)
}

/// Exponential moving update of running statistics from a batch-mode cache,
/// using the unbiased batch variance.
pub fn bn_update_running<T: Scalar>(
    cache: &BnCache<T>,
    pixels: usize,
    running_mean: &mut [T],
    running_var: &mut [T],
) {
    let mom: T = lit(BN_MOMENTUM);
    let keep = T::one() - mom;
    let correction = if pixels > 1 {
        T::from_usize(pixels).unwrap() / T::from_usize(pixels - 1).unwrap()
    } else {
        T::one()
    };
    for ch in 0..running_mean.len() {
        running_mean[ch] = keep * running_mean[ch] + mom * cache.batch_mean[ch];
        running_var[ch] = keep * running_var[ch] + mom * cache.batch_var[ch] * correction;
    }
}

/// Returns (dx, dgamma, dbeta).
pub fn bn_backward<T: Scalar>(
    dy: &Act<T>,
    gamma: &[T],
    cache: &BnCache<T>,
) -> (Act<T>, Vec<T>, Vec<T>) {
    let c = dy.c;
    let m = dy.pixels();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (gr, hr) in dy.data.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] += gr[ch];
            dgamma[ch] += gr[ch] * hr[ch];
        }
    }
    let mut dx = dy.same_shape_zeros();
    match cache.mode {
        BnMode::Running => {
            for (dr, gr) in dx.data.chunks_exact_mut(c).zip(dy.data.chunks_exact(c)) {
                for ch in 0..c {
                    dr[ch] = gr[ch] * gamma[ch] * cache.inv_std[ch];
                }
            }
        }
        BnMode::Batch => {
            let mf = T::from_usize(m).unwrap();
            let scale: Vec<T> = (0..c).map(|ch| gamma[ch] * cache.inv_std[ch] / mf).collect();
            for ((dr, gr), hr) in dx
                .data
                .chunks_exact_mut(c)
                .zip(dy.data.chunks_exact(c))
                .zip(cache.xhat.chunks_exact(c))
            {
                for ch in 0..c {
                    dr[ch] = scale[ch] * (mf * gr[ch] - dbeta[ch] - hr[ch] * dgamma[ch]);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_inplace<T: Scalar>(x: &mut Act<T>) {
    x.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero();
        }
    });
}

/// Zeroes `grad` where the ReLU output was not positive.
pub fn relu_backward_inplace<T: Scalar>(out: &Act<T>, grad: &mut Act<T>) {
    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Global average pooling to `n x c` features.
pub fn gap_forward<T: Scalar>(x: &Act<T>) -> Vec<T> {
    let mut out = vec![T::zero(); x.n * x.c];
    let hw = x.h * x.w;
    let inv: T = T::one() / T::from_usize(hw).unwrap();
    for n in 0..x.n {
        let dst = &mut out[n * x.c..(n + 1) * x.c];
        for row in x.data[n * hw * x.c..(n + 1) * hw * x.c].chunks_exact(x.c) {
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

pub fn gap_backward<T: Scalar>(dfeat: &[T], n: usize, h: usize, w: usize, c: usize) -> Act<T> {
    let mut dx = Act::zeros(n, h, w, c);
    let inv: T = T::one() / T::from_usize(h * w).unwrap();
    for b in 0..n {
        let g = &dfeat[b * c..(b + 1) * c];
        for row in dx.data[b * h * w * c..(b + 1) * h * w * c].chunks_exact_mut(c) {
            for (d, &gv) in row.iter_mut().zip(g) {
                *d = gv * inv;
            }
        }
    }
    dx
}

/// `y = x Wᵀ + b` with `W` of shape (out, in).
pub fn linear_forward<T: Scalar>(x: &[T], n: usize, weight: &[T], bias: &[T]) -> Vec<T> {
    let outs = bias.len();
    let ins = weight.len() / outs;
    let mut y = vec![T::zero(); n * outs];
    for b in 0..n {
        let xr = &x[b * ins..(b + 1) * ins];
        for j in 0..outs {
            let wr = &weight[j * ins..(j + 1) * ins];
            y[b * outs + j] = bias[j] + wr.iter().zip(xr).map(|(&w, &v)| w * v).sum::<T>();
        }
    }
    y
}

/// Returns (dx, dW, db).
pub fn linear_backward<T: Scalar>(
    x: &[T],
    n: usize,
    weight: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let outs = dy.len() / n;
    let ins = weight.len() / outs;
    let mut dx = vec![T::zero(); n * ins];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); outs];
    for b in 0..n {
        let xr = &x[b * ins..(b + 1) * ins];
        let dxr = &mut dx[b * ins..(b + 1) * ins];
        for j in 0..outs {
            let g = dy[b * outs + j];
            db[j] += g;
            let wr = &weight[j * ins..(j + 1) * ins];
            for ((dwv, &xv), (dxv, &wv)) in dw[j * ins..(j + 1) * ins]
                .iter_mut()
                .zip(xr)
                .zip(dxr.iter_mut().zip(wr))
            {
                *dwv += g * xv;
                *dxv += g * wv;
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn rand_act(n: usize, h: usize, w: usize, c: usize, seed: u64) -> Act<f64> {
        let mut s = Stream::new(seed, &[]);
        let mut a = Act::zeros(n, h, w, c);
        a.data.iter_mut().for_each(|v| *v = s.normal());
        a
    }

    fn rand_vec(len: usize, seed: u64) -> Vec<f64> {
        let mut s = Stream::new(seed, &[1]);
        (0..len).map(|_| s.normal()).collect()
    }

    /// Direct-definition convolution used as an oracle.
    fn conv_naive(x: &Act<f64>, w: &[f64], g: ConvGeom) -> Act<f64> {
        let (oh, ow) = g.out_hw(x.h, x.w);
        let mut out = Act::zeros(x.n, oh, ow, g.cout);
        for n in 0..x.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..g.cout {
                        let mut s = 0.0;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                for ci in 0..g.cin {
                                    let xi = ((n * x.h + iy as usize) * x.w + ix as usize) * x.c + ci;
                                    let wi = ((kx * g.kh + ky) * g.cin + ci) * g.cout + co;
                                    s += x.data[xi] * w[wi];
                                }
                            }
                        }
                        out.data[((n * oh + oy) * ow + ox) * g.cout + co] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_definition() {
        for (stride, k) in [(1, 3), (2, 3), (2, 1), (1, 1)] {
            let x = rand_act(2, 5, 6, 3, 1);
            let g = ConvGeom::from_dims(&[k, k, 3, 4], stride);
            let w = rand_vec(k * k * 12, 2);
            let fast = conv2d_forward(&x, &w, g);
            let slow = conv_naive(&x, &w, g);
            assert_eq!((fast.h, fast.w), (slow.h, slow.w));
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_sizes() {
        let g = ConvGeom::from_dims(&[3, 3, 1, 1], 2);
        assert_eq!(g.out_hw(16, 15), (8, 8));
        let p = ConvGeom::from_dims(&[1, 1, 1, 1], 2);
        assert_eq!(p.out_hw(16, 15), (8, 8));
    }

    #[test]
    fn batch_norm_normalizes() {
        let x = rand_act(3, 2, 2, 4, 9);
        let ones = vec![1.0; 4];
        let zeros = vec![0.0; 4];
        let (y, cache) = bn_forward(&x, &ones, &zeros, &zeros, &ones, BnMode::Batch);
        for ch in 0..4 {
            let vals: Vec<f64> = y.data.iter().skip(ch).step_by(4).copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        let mut rm = vec![0.0; 4];
        let mut rv = vec![1.0; 4];
        bn_update_running(&cache, 12, &mut rm, &mut rv);
        assert!((rm[0] - 0.1 * cache.batch_mean[0]).abs() < 1e-15);
        assert!((rv[0] - (0.9 + 0.1 * cache.batch_var[0] * 12.0 / 11.0)).abs() < 1e-15);
    }

    #[test]
    fn gap_and_linear_shapes() {
        let x = rand_act(2, 3, 3, 5, 4);
        let f = gap_forward(&x);
        assert_eq!(f.len(), 10);
        let w = rand_vec(15, 5);
        let y = linear_forward(&f, 2, &w, &[0.0, 0.5, 1.0]);
        assert_eq!(y.len(), 6);
        let back = gap_backward(&[1.0; 10], 2, 3, 3, 5);
        assert!(back.data.iter().all(|&v: &f64| (v - 1.0 / 9.0).abs() < 1e-15));
    }
}
