//! Convolution kernels: im2col + GEMM for dense convolutions and a direct
//! loop for per-sample depthwise filters.

use crate::real::gemm;
use crate::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1 && k >= 1);
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        Self {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_px(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kj - pad` is in range.
fn valid_span(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let off = kj as isize - g.pad as isize;
    let s = g.stride as isize;
    // smallest ox with ox*s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    // largest ox with ox*s + off <= w - 1
    let last = g.w as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(g.wo as isize) };
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let px = g.out_px();
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * px;
                let (lo, hi) = valid_span(g, kj);
                for oy in 0..g.ho {
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    let ix0 = (lo * g.stride + kj) - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let px = g.out_px();
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * px;
                let (lo, hi) = valid_span(g, kj);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.wo + lo..row + oy * g.wo + hi];
                    let base = (c * g.h + iy as usize) * g.w + (lo * g.stride + kj) - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in dx[base..base + (hi - lo)].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in src.iter().enumerate() {
                            dx[base + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn geom_for<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> ConvGeom {
    let (_, cin, h, wd) = x.dims4();
    let (cout, wcin, k, k2) = w.dims4();
    assert_eq!(k, k2, "only square kernels are supported");
    assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
    ConvGeom::new(cin, h, wd, cout, k, stride, pad)
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let g = geom_for(x, w, stride, pad);
    let n = x.shape()[0];
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * g.out_px();
    let mut out = Tensor::zeros(&[n, g.cout, g.ho, g.wo]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.kdim() * g.out_px()]
    };
    for s in 0..n {
        let xs = &x.data()[s * in_sz..(s + 1) * in_sz];
        let ys = &mut out.data_mut()[s * out_sz..(s + 1) * out_sz];
        let colref: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        gemm(false, false, g.cout, g.out_px(), g.kdim(), T::one(), w.data(), colref, T::zero(), ys);
        if let Some(b) = b {
            for (co, plane) in ys.chunks_mut(g.out_px()).enumerate() {
                let bv = b.data()[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let g = geom_for(x, w, stride, pad);
    let n = x.shape()[0];
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * g.out_px();
    let (need_dx, need_dw, need_db) = need;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[g.cout]));
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { g.kdim() * g.out_px() }];
    let mut dcols = vec![T::zero(); if need_dx && !g.is_pointwise() { g.kdim() * g.out_px() } else { 0 }];
    for s in 0..n {
        let xs = &x.data()[s * in_sz..(s + 1) * in_sz];
        let dys = &dy.data()[s * out_sz..(s + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            let colref: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            gemm(false, true, g.cout, g.kdim(), g.out_px(), T::one(), dys, colref, T::one(), dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[s * in_sz..(s + 1) * in_sz];
            if g.is_pointwise() {
                gemm(true, false, g.kdim(), g.out_px(), g.cout, T::one(), w.data(), dys, T::one(), dxs);
            } else {
                gemm(true, false, g.kdim(), g.out_px(), g.cout, T::one(), w.data(), dys, T::zero(), &mut dcols);
                col2im(&dcols, &g, dxs);
            }
        }
        if let Some(db) = db.as_mut() {
            for (co, plane) in dys.chunks(g.out_px()).enumerate() {
                db.data_mut()[co] += plane.iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Per-sample depthwise convolution, stride 1, "same" zero padding.
/// `x`: `(N, C, H, W)`, `kern`: `(N, C, k, k)` with odd `k`.
pub fn depthwise_forward<T: Real>(x: &Tensor<T>, kern: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (kn, kc, k, _) = kern.dims4();
    assert_eq!((kn, kc), (n, c), "depthwise kernel must be (N, C, k, k)");
    assert!(k % 2 == 1, "depthwise kernel size must be odd");
    let p = (k / 2) as isize;
    let mut out = Tensor::zeros(x.shape());
    let plane = h * w;
    for nc in 0..n * c {
        let xs = &x.data()[nc * plane..(nc + 1) * plane];
        let ks = &kern.data()[nc * k * k..(nc + 1) * k * k];
        let ys = &mut out.data_mut()[nc * plane..(nc + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let kv = ks[ki * k + kj];
                if kv == T::zero() {
                    continue;
                }
                let dy = ki as isize - p;
                let dx = kj as isize - p;
                for y in 0..h {
                    let iy = y as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let ix = xx as isize + dx;
                        if ix >= 0 && ix < w as isize {
                            ys[y * w + xx] += kv * xs[iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward<T: Real>(
    x: &Tensor<T>,
    kern: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = x.dims4();
    let k = kern.shape()[2];
    let p = (k / 2) as isize;
    let plane = h * w;
    let mut dx = Tensor::zeros(x.shape());
    let mut dk = Tensor::zeros(kern.shape());
    for nc in 0..n * c {
        let xs = &x.data()[nc * plane..(nc + 1) * plane];
        let ks = &kern.data()[nc * k * k..(nc + 1) * k * k];
        let gs = &dy.data()[nc * plane..(nc + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let kv = ks[ki * k + kj];
                let oy = ki as isize - p;
                let ox = kj as isize - p;
                let mut acc = T::zero();
                for y in 0..h {
                    let iy = y as isize + oy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let ix = xx as isize + ox;
                        if ix >= 0 && ix < w as isize {
                            let src = iy as usize * w + ix as usize;
                            acc += gs[y * w + xx] * xs[src];
                            dx.data_mut()[nc * plane + src] += kv * gs[y * w + xx];
                        }
                    }
                }
                dk.data_mut()[nc * k * k + ki * k + kj] = acc;
            }
        }
    }
    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4();
        let (cout, _, k, _) = w.dims4();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for s in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at4(s, ci, iy as usize, ix as usize) * w.at4(co, ci, ki, kj);
                                    }
                                }
                            }
                        }
                        out.set4(s, co, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let x = Tensor::from_fn(&[2, 3, 7, 6], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4);
        for &(k, stride, pad) in &[(3, 1, 1), (5, 2, 2), (1, 1, 0), (3, 2, 0)] {
            let w = Tensor::from_fn(&[4, 3, k, k], |i| ((i * 104729) % 17) as f64 / 17.0 - 0.5);
            let got = conv2d_forward(&x, &w, None, stride, pad);
            let want = naive_conv(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "k={k} s={stride} p={pad}");
        }
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let x = Tensor::from_fn(&[1, 2, 5, 5], |i| i as f64);
        let mut k = Tensor::zeros(&[1, 2, 3, 3]);
        k.set4(0, 0, 1, 1, 1.0);
        k.set4(0, 1, 1, 1, 1.0);
        assert_eq!(depthwise_forward(&x, &k), x);
    }
}
