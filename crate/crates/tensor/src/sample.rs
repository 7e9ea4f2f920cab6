//! Bilinear resampling: separable resize (half-pixel centers) and dense
//! backward warping with border clamping.

use crate::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w1: f64,
}

/// Source taps for resizing an axis of length `n_in` to `n_out` with
/// half-pixel centers (negative source coordinates clamp to 0).
fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            Tap {
                i0,
                i1,
                w1: src - i0 as f64,
            }
        })
        .collect()
}

pub fn resize_forward<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    for nc in 0..n * c {
        let xs = &x.data()[nc * h * w..(nc + 1) * h * w];
        let ys = &mut out.data_mut()[nc * out_h * out_w..(nc + 1) * out_h * out_w];
        for (oy, a) in ty.iter().enumerate() {
            let wy1 = T::lit(a.w1);
            let wy0 = T::one() - wy1;
            for (ox, b) in tx.iter().enumerate() {
                let wx1 = T::lit(b.w1);
                let wx0 = T::one() - wx1;
                let top = xs[a.i0 * w + b.i0] * wx0 + xs[a.i0 * w + b.i1] * wx1;
                let bot = xs[a.i1 * w + b.i0] * wx0 + xs[a.i1 * w + b.i1] * wx1;
                ys[oy * out_w + ox] = top * wy0 + bot * wy1;
            }
        }
    }
    out
}

pub fn resize_backward<T: Real>(in_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (_, _, out_h, out_w) = dy.dims4();
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut dx = Tensor::zeros(in_shape);
    for nc in 0..n * c {
        let gs = &dy.data()[nc * out_h * out_w..(nc + 1) * out_h * out_w];
        let ds = &mut dx.data_mut()[nc * h * w..(nc + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            let wy1 = T::lit(a.w1);
            let wy0 = T::one() - wy1;
            for (ox, b) in tx.iter().enumerate() {
                let wx1 = T::lit(b.w1);
                let wx0 = T::one() - wx1;
                let g = gs[oy * out_w + ox];
                ds[a.i0 * w + b.i0] += g * wy0 * wx0;
                ds[a.i0 * w + b.i1] += g * wy0 * wx1;
                ds[a.i1 * w + b.i0] += g * wy1 * wx0;
                ds[a.i1 * w + b.i1] += g * wy1 * wx1;
            }
        }
    }
    dx
}

/// Corner indices and weights of one warped sample.
#[derive(Clone, Copy)]
struct Bilerp<T> {
    idx: [usize; 4],
    wt: [T; 4],
}

fn warp_taps<T: Real>(flow: &Tensor<T>, n: usize, h: usize, w: usize, y: usize, x: usize) -> Bilerp<T> {
    let plane = h * w;
    let fx = flow.data()[(n * 2) * plane + y * w + x];
    let fy = flow.data()[(n * 2 + 1) * plane + y * w + x];
    let max_x = T::lit((w - 1) as f64);
    let max_y = T::lit((h - 1) as f64);
    let sx = (T::lit(x as f64) + fx).max(T::zero()).min(max_x);
    let sy = (T::lit(y as f64) + fy).max(T::zero()).min(max_y);
    let x0 = sx.floor();
    let y0 = sy.floor();
    let ax = sx - x0;
    let ay = sy - y0;
    let x0u = x0.as_f64() as usize;
    let y0u = y0.as_f64() as usize;
    let x1u = (x0u + 1).min(w - 1);
    let y1u = (y0u + 1).min(h - 1);
    let one = T::one();
    Bilerp {
        idx: [y0u * w + x0u, y0u * w + x1u, y1u * w + x0u, y1u * w + x1u],
        wt: [(one - ay) * (one - ax), (one - ay) * ax, ay * (one - ax), ay * ax],
    }
}

/// Backward warp: `out(x) = img(x + flow(x))`, bilinear, coordinates
/// clamped to the image border. `flow` is `(N, 2, H, W)` holding (dx, dy).
pub fn warp_forward<T: Real>(img: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = img.dims4();
    assert_eq!(flow.shape(), &[n, 2, h, w], "warp: flow must be (N, 2, H, W)");
    let plane = h * w;
    let mut out = Tensor::zeros(img.shape());
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                let b = warp_taps(flow, s, h, w, y, x);
                for ch in 0..c {
                    let base = (s * c + ch) * plane;
                    let src = &img.data()[base..base + plane];
                    let mut v = T::zero();
                    for q in 0..4 {
                        if b.wt[q] != T::zero() {
                            v += b.wt[q] * src[b.idx[q]];
                        }
                    }
                    out.data_mut()[base + y * w + x] = v;
                }
            }
        }
    }
    out
}

pub fn warp_backward<T: Real>(img_shape: &[usize], flow: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (img_shape[0], img_shape[1], img_shape[2], img_shape[3]);
    let plane = h * w;
    let mut dx = Tensor::zeros(img_shape);
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                let b = warp_taps(flow, s, h, w, y, x);
                for ch in 0..c {
                    let base = (s * c + ch) * plane;
                    let g = dy.data()[base + y * w + x];
                    for q in 0..4 {
                        dx.data_mut()[base + b.idx[q]] += b.wt[q] * g;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = Tensor::<f64>::full(&[1, 2, 4, 3], 0.37);
        let y = resize_forward(&x, 8, 6);
        assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn upsample_2x_matches_quarter_weights() {
        let x = Tensor::from_vec(&[1, 1, 1, 3], vec![0.0, 4.0, 8.0]);
        let y = resize_forward(&x, 1, 6);
        assert_eq!(y.data(), &[0.0, 1.0, 3.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn integer_flow_shifts_image() {
        let img = Tensor::from_fn(&[1, 1, 4, 5], |i| i as f64);
        let mut flow = Tensor::zeros(&[1, 2, 4, 5]);
        for y in 0..4 {
            for x in 0..5 {
                flow.set4(0, 0, y, x, -1.0);
            }
        }
        let out = warp_forward(&img, &flow);
        for y in 0..4 {
            for x in 1..5 {
                assert_eq!(out.at4(0, 0, y, x), img.at4(0, 0, y, x - 1));
            }
            assert_eq!(out.at4(0, 0, y, 0), img.at4(0, 0, y, 0));
        }
    }
}
