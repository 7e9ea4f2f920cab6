use crate::error::{invalid, Result};
use crate::frame::Frame;
use crate::losses::PerceptualExtractor;
use e2v_tensor::Graph;

fn check_same(a: &Frame, b: &Frame) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(invalid(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(rec: &Frame, gt: &Frame) -> Result<f64> {
    check_same(rec, gt)?;
    let s: f64 = rec.data.iter().zip(&gt.data).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum();
    Ok(s / rec.data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

fn gaussian_1d(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filter.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over all full window positions, for images
/// with unit dynamic range.
pub fn ssim_with(rec: &Frame, gt: &Frame, p: &SsimParams) -> Result<f64> {
    check_same(rec, gt)?;
    if rec.width < p.window || rec.height < p.window {
        return Err(invalid(format!(
            "{}x{} image is smaller than the {}-pixel window",
            rec.width, rec.height, p.window
        )));
    }
    let (w, h) = (rec.width, rec.height);
    let a: Vec<f64> = rec.data.iter().map(|&v| f64::from(v)).collect();
    let b: Vec<f64> = gt.data.iter().map(|&v| f64::from(v)).collect();
    let k = gaussian_1d(p.window, p.sigma);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(u, v)| u * v).collect() };
    let mu_a = filter_valid(&a, w, h, &k);
    let mu_b = filter_valid(&b, w, h, &k);
    let e_aa = filter_valid(&prod(&a, &a), w, h, &k);
    let e_bb = filter_valid(&prod(&b, &b), w, h, &k);
    let e_ab = filter_valid(&prod(&a, &b), w, h, &k);
    let (c1, c2) = ((p.k1).powi(2), (p.k2).powi(2));
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

pub fn ssim(rec: &Frame, gt: &Frame) -> Result<f64> {
    ssim_with(rec, gt, &SsimParams::default())
}

/// Label used wherever the perceptual distance is reported; it is computed
/// with a random frozen extractor and is not comparable to published LPIPS.
pub const PROXY_LPIPS: &str = "proxy_lpips";

/// Channel-normalised features of every extractor stage, as `(C, HW)` rows.
pub fn perceptual_features(phi: &PerceptualExtractor<f32>, img: &Frame) -> Vec<(usize, Vec<f64>)> {
    let mut g = Graph::new();
    let x = g.input(img.to_tensor());
    phi.features(&mut g, x)
        .into_iter()
        .map(|f| {
            let t = g.value(f);
            let (_, c, h, w) = t.dims4();
            let hw = h * w;
            let mut out = vec![0.0; c * hw];
            for p in 0..hw {
                let norm = (0..c).map(|ch| f64::from(t.data()[ch * hw + p]).powi(2)).sum::<f64>().sqrt() + 1e-10;
                for ch in 0..c {
                    out[ch * hw + p] = f64::from(t.data()[ch * hw + p]) / norm;
                }
            }
            (hw, out)
        })
        .collect()
}

/// Sum over stages of the root-mean (over positions) squared distance
/// between normalised feature vectors. Each stage term is a scaled L2 norm,
/// so the sum is a pseudometric.
pub fn feature_distance(a: &[(usize, Vec<f64>)], b: &[(usize, Vec<f64>)]) -> f64 {
    a.iter()
        .zip(b)
        .map(|((hw, fa), (_, fb))| {
            let s: f64 = fa.iter().zip(fb).map(|(x, y)| (x - y).powi(2)).sum();
            (s / *hw as f64).sqrt()
        })
        .sum()
}

pub fn perceptual_distance(rec: &Frame, gt: &Frame, phi: &PerceptualExtractor<f32>) -> Result<f64> {
    check_same(rec, gt)?;
    Ok(feature_distance(&perceptual_features(phi, rec), &perceptual_features(phi, gt)))
}

/// Nearest ground-truth index within `tolerance` seconds; equidistant
/// neighbours resolve to the earlier frame. `gt_times` must be sorted.
pub fn match_nearest_frame(time: f64, gt_times: &[f64], tolerance: f64) -> Option<usize> {
    let i = gt_times.partition_point(|&t| t < time);
    let mut best: Option<(usize, f64)> = None;
    for j in [i.checked_sub(1), Some(i)].into_iter().flatten().filter(|&j| j < gt_times.len()) {
        let d = (gt_times[j] - time).abs();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    best.filter(|&(_, d)| d <= tolerance).map(|(j, _)| j)
}

/// Matching tolerance in seconds.
pub const MATCH_TOLERANCE: f64 = 1e-3;
