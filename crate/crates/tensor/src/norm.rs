//! Normalization kernels with their hand-derived backward passes.

use crate::{Real, Tensor};

/// Normalized output plus one inverse standard deviation per group.
pub struct NormOut<T> {
    pub y: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Zero-mean, unit-variance normalization of each `(n, c)` plane.
pub fn instance_norm_forward<T: Real>(x: &Tensor<T>, eps: T) -> NormOut<T> {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let inv_len = T::one() / T::lit(plane as f64);
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(n * c);
    for g in 0..n * c {
        let xs = &x.data()[g * plane..(g + 1) * plane];
        let mean = xs.iter().copied().sum::<T>() * inv_len;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_len;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in y.data_mut()[g * plane..(g + 1) * plane].iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    NormOut { y, inv_std }
}

/// `dx = inv_std * (dy - mean(dy) - y * mean(dy * y))` per plane.
pub fn instance_norm_backward<T: Real>(y: &Tensor<T>, inv_std: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = y.dims4();
    let plane = h * w;
    let inv_len = T::one() / T::lit(plane as f64);
    let mut dx = Tensor::zeros(y.shape());
    for g in 0..n * c {
        let ys = &y.data()[g * plane..(g + 1) * plane];
        let gs = &dy.data()[g * plane..(g + 1) * plane];
        let mean_g = gs.iter().copied().sum::<T>() * inv_len;
        let mean_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() * inv_len;
        for ((o, &gv), &yv) in dx.data_mut()[g * plane..(g + 1) * plane].iter_mut().zip(gs).zip(ys) {
            *o = inv_std[g] * (gv - mean_g - yv * mean_gy);
        }
    }
    dx
}

fn channel_elems(n: usize, c: usize, plane: usize, ch: usize) -> impl Iterator<Item = usize> {
    (0..n).flat_map(move |s| {
        let base = (s * c + ch) * plane;
        base..base + plane
    })
}

/// Batch statistics per channel over `(N, H, W)`; with `N = 1` this is
/// per-instance normalization. Returns the batch means and biased variances
/// alongside the normalized output.
pub fn batch_norm_forward<T: Real>(x: &Tensor<T>, eps: T) -> (NormOut<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let inv_len = T::one() / T::lit((n * plane) as f64);
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(c);
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    for ch in 0..c {
        let mean = channel_elems(n, c, plane, ch).map(|i| x.data()[i]).sum::<T>() * inv_len;
        let var = channel_elems(n, c, plane, ch)
            .map(|i| (x.data()[i] - mean) * (x.data()[i] - mean))
            .sum::<T>()
            * inv_len;
        let is = T::one() / (var + eps).sqrt();
        for i in channel_elems(n, c, plane, ch) {
            y.data_mut()[i] = (x.data()[i] - mean) * is;
        }
        inv_std.push(is);
        means.push(mean);
        vars.push(var);
    }
    (NormOut { y, inv_std }, means, vars)
}

pub fn batch_norm_backward<T: Real>(y: &Tensor<T>, inv_std: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = y.dims4();
    let plane = h * w;
    let inv_len = T::one() / T::lit((n * plane) as f64);
    let mut dx = Tensor::zeros(y.shape());
    for ch in 0..c {
        let mean_g = channel_elems(n, c, plane, ch).map(|i| dy.data()[i]).sum::<T>() * inv_len;
        let mean_gy = channel_elems(n, c, plane, ch)
            .map(|i| dy.data()[i] * y.data()[i])
            .sum::<T>()
            * inv_len;
        for i in channel_elems(n, c, plane, ch) {
            dx.data_mut()[i] = inv_std[ch] * (dy.data()[i] - mean_g - y.data()[i] * mean_gy);
        }
    }
    dx
}

/// Unit L2 norm of the channel vector at every `(n, y, x)`:
/// `y = x / sqrt(|x|^2 + eps)`. Returns the per-position denominators.
pub fn channel_l2_forward<T: Real>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut y = Tensor::zeros(x.shape());
    let mut norms = vec![T::zero(); n * plane];
    for s in 0..n {
        for p in 0..plane {
            let mut ss = T::zero();
            for ch in 0..c {
                let v = x.data()[(s * c + ch) * plane + p];
                ss += v * v;
            }
            let nrm = (ss + eps).sqrt();
            norms[s * plane + p] = nrm;
            for ch in 0..c {
                let i = (s * c + ch) * plane + p;
                y.data_mut()[i] = x.data()[i] / nrm;
            }
        }
    }
    (y, norms)
}

/// `dx = dy / n - y * <dy, y> / n`.
pub fn channel_l2_backward<T: Real>(y: &Tensor<T>, norms: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = y.dims4();
    let plane = h * w;
    let mut dx = Tensor::zeros(y.shape());
    for s in 0..n {
        for p in 0..plane {
            let mut dot = T::zero();
            for ch in 0..c {
                let i = (s * c + ch) * plane + p;
                dot += dy.data()[i] * y.data()[i];
            }
            let nrm = norms[s * plane + p];
            for ch in 0..c {
                let i = (s * c + ch) * plane + p;
                dx.data_mut()[i] = (dy.data()[i] - y.data()[i] * dot) / nrm;
            }
        }
    }
    dx
}

/// Softmax over the last axis.
pub fn softmax_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let last = *x.shape().last().expect("softmax of a scalar");
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(last) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    y
}

pub fn softmax_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let last = *y.shape().last().unwrap();
    let mut dx = Tensor::zeros(y.shape());
    for ((o, ys), gs) in dx
        .data_mut()
        .chunks_mut(last)
        .zip(y.data().chunks(last))
        .zip(dy.data().chunks(last))
    {
        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
        for ((ov, &yv), &gv) in o.iter_mut().zip(ys).zip(gs) {
            *ov = yv * (gv - dot);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_norm_moments() {
        let x = Tensor::from_fn(&[2, 3, 4, 4], |i| ((i * 37) % 11) as f64 * 0.3 - 1.0);
        let out = instance_norm_forward(&x, 1e-5);
        for plane in out.y.data().chunks(16) {
            let m: f64 = plane.iter().sum::<f64>() / 16.0;
            let v: f64 = plane.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_plane_normalizes_to_zero() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 3], 4.2);
        let out = instance_norm_forward(&x, 1e-5);
        assert!(out.y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_fn(&[3, 5], |i| i as f64 * 0.7 - 2.0);
        let y = softmax_forward(&x);
        for row in y.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
