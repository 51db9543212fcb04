//! Convolution kernels: im2col + GEMM forward, col2im backward.

use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
        Self {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            hout: (h + 2 * pad - kh) / stride + 1,
            wout: (w + 2 * pad - kw) / stride + 1,
        }
    }

    /// Rows of the column matrix.
    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Output positions.
    pub fn p(&self) -> usize {
        self.hout * self.wout
    }

    /// 1x1, stride 1, no padding: the input already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + kj - pad` is in range.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kj >= self.pad { 0 } else { (self.pad - kj).div_ceil(s) };
        // ox * s + kj - pad <= w - 1  <=>  ox <= (w - 1 + pad - kj) / s
        let hi = if self.w + self.pad > kj { ((self.w - 1 + self.pad - kj) / s + 1).min(self.wout) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Unfolds one image (`cin x h x w`) into `k x p` columns.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.hout {
                    let out = &mut dst[oy * g.wout..(oy + 1) * g.wout];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if hi > lo {
                        let ix0 = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            out[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (o, ox) in out[lo..hi].iter_mut().zip(0..) {
                                *o = src[ix0 + ox * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub(crate) fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_cols(kj);
                if hi <= lo {
                    continue;
                }
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let ix0 = lo * g.stride + kj - g.pad;
                    let s = &src[oy * g.wout + lo..oy * g.wout + hi];
                    for (i, &v) in s.iter().enumerate() {
                        dst[ix0 + i * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// `y = conv(x, w) + b`; `w` is `cout x cin x kh x kw`, `b` has `cout` elements.
pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, kh, kw] = w.shape();
    assert_eq!(cin, wcin, "conv input has {cin} channels, weight expects {wcin}");
    let g = ConvGeom::new(cin, h, wd, kh, kw, stride, pad);
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::zero(); n * cout * p];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for i in 0..n {
        let xi = x.item(i);
        let cols: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, &g, &mut col);
            &col
        };
        let yi = &mut out[i * cout * p..(i + 1) * cout * p];
        if let Some(b) = b {
            for (c, chunk) in yi.chunks_exact_mut(p).enumerate() {
                chunk.fill(b.data()[c]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(cout, k, p, w.data(), (k, 1), cols, (p, 1), beta, yi, p);
    }
    Tensor::new([n, cout, g.hout, g.wout], out)
}

/// Gradients of [`conv2d_forward`] with respect to the requested operands.
pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> ConvGrads<T> {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, kh, kw] = w.shape();
    let g = ConvGeom::new(cin, h, wd, kh, kw, stride, pad);
    let (k, p) = (g.k(), g.p());
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = want_db.then(|| vec![T::zero(); cout]);
    let mut col = if g.is_pointwise() || !want_dw { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcol = if want_dx && !g.is_pointwise() { vec![T::zero(); k * p] } else { Vec::new() };
    for i in 0..n {
        let dyi = dy.item(i);
        if let Some(db) = db.as_mut() {
            for (c, chunk) in dyi.chunks_exact(p).enumerate() {
                db[c] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let cols: &[T] = if g.is_pointwise() {
                x.item(i)
            } else {
                im2col(x.item(i), &g, &mut col);
                &col
            };
            // dW (cout x k) += dY (cout x p) * cols^T (p x k)
            T::gemm(cout, p, k, dyi, (p, 1), cols, (1, p), T::one(), dw, k);
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd];
            // dcol (k x p) = W^T (k x cout) * dY (cout x p)
            if g.is_pointwise() {
                T::gemm(k, cout, p, w.data(), (1, k), dyi, (p, 1), T::one(), dxi, p);
            } else {
                T::gemm(k, cout, p, w.data(), (1, k), dyi, (p, 1), T::zero(), &mut dcol, p);
                col2im(&dcol, &g, dxi);
            }
        }
    }
    ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape(), d)),
        dw: dw.map(|d| Tensor::new(w.shape(), d)),
        db: db.map(|d| Tensor::new([1, cout, 1, 1], d)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut r = SeededRng::new(seed);
        Tensor::new(shape, (0..shape.iter().product()).map(|_| r.normal()).collect())
    }

    /// Direct seven-loop convolution.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape();
        let [cout, _, kh, kw] = w.shape();
        let g = ConvGeom::new(cin, h, wd, kh, kw, stride, pad);
        let mut out = vec![0.0; n * cout * g.p()];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..g.hout {
                    for ox in 0..g.wout {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.data()[((b * cin + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((co * cin + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out[((b * cout + co) * g.hout + oy) * g.wout + ox] = s;
                    }
                }
            }
        }
        Tensor::new([n, cout, g.hout, g.wout], out)
    }

    #[test]
    fn matches_naive_convolution() {
        for &(h, w, k, s, p) in
            &[(7, 6, 3, 1, 1), (8, 8, 3, 2, 1), (9, 7, 4, 2, 1), (5, 5, 1, 1, 0), (6, 6, 7, 1, 3), (4, 4, 3, 1, 0)]
        {
            let x = rand_tensor([2, 3, h, w], 1);
            let wt = rand_tensor([4, 3, k, k], 2);
            let fast = conv2d_forward(&x, &wt, None, s, p);
            let slow = naive(&x, &wt, s, p);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-10, "{h}x{w} k{k} s{s} p{p}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        for &(h, w, k, s, p) in &[(7, 6, 3, 1, 1), (8, 8, 3, 2, 1), (9, 7, 4, 2, 1), (6, 6, 7, 1, 3)] {
            let g = ConvGeom::new(2, h, w, k, k, s, p);
            let x = rand_tensor([1, 2, h, w], 3);
            let c = rand_tensor([1, 1, g.k(), g.p()], 4);
            let mut col = vec![0.0; g.k() * g.p()];
            im2col(x.data(), &g, &mut col);
            let lhs: f64 = col.iter().zip(c.data()).map(|(a, b)| a * b).sum();
            let mut dx = vec![0.0; x.len()];
            col2im(c.data(), &g, &mut dx);
            let rhs: f64 = dx.iter().zip(x.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
