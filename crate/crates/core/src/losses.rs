//! Training objectives: mask-weighted perceptual loss, relational (Gram)
//! distillation, flow-warped temporal consistency, and their weighted sum.

use crate::error::{invalid, Result};
use crate::net::Conv;
use e2v_tensor::{Graph, ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Frozen random convolutional stages standing in for a pretrained
/// perceptual network. Each stage is a k3 stride-2 convolution and ReLU, so
/// stage 0 runs at half the input resolution.
pub struct PerceptualExtractor<T> {
    pub params: ParamStore<T>,
    stages: Vec<Conv>,
}

pub const PERCEPTUAL_CHANNELS: [usize; 3] = [16, 32, 64];
/// Seed of the extractor shared by training and evaluation.
pub const PERCEPTUAL_SEED: u64 = 0x5eed_9e12;

impl<T: Real> PerceptualExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut cin = 1;
        let mut stages = Vec::new();
        for (i, &c) in PERCEPTUAL_CHANNELS.iter().enumerate() {
            let conv = Conv::new(&mut params, &mut rng, &format!("phi{i}"), cin, c, 3, 2, true);
            stages.push(conv);
            cin = c;
        }
        // frozen: rebuild the store with every entry non-trainable
        let mut frozen = ParamStore::new();
        for id in params.ids() {
            frozen.add(params.name(id), params.get(id).clone(), false);
        }
        Self { params: frozen, stages }
    }

    /// The extractor every training run and evaluation uses.
    pub fn standard() -> Self {
        Self::new(PERCEPTUAL_SEED)
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Spatial size of stage 0 for an `h x w` image, which is also the mask size.
    pub fn stage0_size(h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(2), w.div_ceil(2))
    }

    /// Features of an `(N, 1, H, W)` image in [0, 1], rescaled to [-1, 1] first.
    pub fn features(&self, g: &mut Graph<T>, img: Var) -> Vec<Var> {
        let x = g.scale(img, T::lit(2.0));
        let mut x = g.shift(x, T::lit(-1.0));
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let y = s.forward(g, &self.params, x);
            x = g.relu(y);
            out.push(x);
        }
        out
    }
}

/// Occlusion sharpness and distillation weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 1.8, alpha: 50.0 }
    }
}

/// Pixelwise union of `(N, K, h, w)` binary masks as `(N, 1, h, w)`.
pub fn mask_union<T: Real>(masks: &Tensor<T>) -> Tensor<T> {
    let (n, k, h, w) = masks.dims4();
    let mut out = Tensor::zeros(&[n, 1, h, w]);
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                if (0..k).any(|c| masks.at4(s, c, y, x) > T::zero()) {
                    out.set4(s, 0, y, x, T::one());
                }
            }
        }
    }
    out
}

fn mean_sq_diff<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.sqr(d);
    g.mean(d)
}

/// Stage 0 compared under the union mask `(N, 1, h, w)`, later stages
/// unmasked; each stage contributes its mean squared feature difference.
/// `mask = None` compares every stage unmasked.
pub fn semantic_perceptual_loss<T: Real>(
    g: &mut Graph<T>,
    phi: &PerceptualExtractor<T>,
    rec: Var,
    gt: Var,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    if g.shape(rec) != g.shape(gt) {
        return Err(invalid(format!("image shapes differ: {:?} vs {:?}", g.shape(rec), g.shape(gt))));
    }
    let fr = phi.features(g, rec);
    let fg = phi.features(g, gt);
    let mut total = None;
    for (l, (&a, &b)) in fr.iter().zip(&fg).enumerate() {
        let term = match (l, mask) {
            (0, Some(m)) => {
                let fs = g.shape(a);
                let ms = m.shape();
                if ms.len() != 4 || ms[1] != 1 || ms[2] != fs[2] || ms[3] != fs[3] || (ms[0] != fs[0] && ms[0] != 1) {
                    return Err(invalid(format!("mask {ms:?} does not match stage-0 features {fs:?}")));
                }
                let mv = g.input(m.clone());
                let d = g.sub(a, b);
                let d = g.mul(d, mv);
                let d = g.sqr(d);
                g.mean(d)
            }
            _ => mean_sq_diff(g, a, b),
        };
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term),
        });
    }
    Ok(total.expect("extractor has stages"))
}

pub const GRAM_EPS: f64 = 1e-12;

/// Mean absolute difference of the spatial cosine-similarity matrices of two
/// `(N, C, H, W)` features. Each position's channel vector is normalised to
/// unit length first, so positive per-position scaling is invisible.
pub fn relational_distillation_loss<T: Real>(g: &mut Graph<T>, student: Var, teacher: Var) -> Result<Var> {
    if g.shape(student) != g.shape(teacher) {
        return Err(invalid(format!(
            "feature shapes differ: {:?} vs {:?}",
            g.shape(student),
            g.shape(teacher)
        )));
    }
    let gram = |g: &mut Graph<T>, f: Var| {
        let s = g.shape(f).to_vec();
        let v = g.channel_l2_normalize(f, T::lit(GRAM_EPS));
        let v = g.reshape(v, &[s[0], s[1], s[2] * s[3]]);
        g.matmul(v, v, true, false)
    };
    let gs = gram(g, student);
    let gt = gram(g, teacher);
    let d = g.sub(gs, gt);
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// `exp(-alpha (I_k - W(I_{k-1}))^2)` per pixel, from ground truth only.
pub fn occlusion_weight<T: Real>(gt_k: &Tensor<T>, gt_km1: &Tensor<T>, flow: &Tensor<T>, alpha: f64) -> Tensor<T> {
    let warped = e2v_tensor::sample::warp_forward(gt_km1, flow);
    gt_k.zip_map(&warped, |a, b| {
        let e = a - b;
        (-T::lit(alpha) * e * e).exp()
    })
}

/// Occlusion-weighted L1 between the current reconstruction and the
/// previous one warped by the backward flow, averaged over pixels.
pub fn temporal_consistency_loss<T: Real>(
    g: &mut Graph<T>,
    rec_k: Var,
    rec_km1: Var,
    gt_k: &Tensor<T>,
    gt_km1: &Tensor<T>,
    flow: &Tensor<T>,
    alpha: f64,
) -> Result<Var> {
    let s = g.shape(rec_k).to_vec();
    if g.shape(rec_km1) != s.as_slice() || gt_k.shape() != s.as_slice() || gt_km1.shape() != s.as_slice() {
        return Err(invalid("temporal loss inputs differ in shape"));
    }
    let w = g.input(occlusion_weight(gt_k, gt_km1, flow, alpha));
    let warped = g.warp(rec_km1, flow);
    let d = g.sub(rec_k, warped);
    let d = g.abs(d);
    let d = g.mul(d, w);
    Ok(g.mean(d))
}

/// The three parts of one step's objective; `temporal` is absent on the first
/// step of a window.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub semantic: Var,
    pub temporal: Option<Var>,
    pub distill: Option<Var>,
}

/// `semantic + temporal + lambda * distill`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, parts: LossParts, weights: &LossWeights) -> Var {
    let mut total = parts.semantic;
    if let Some(t) = parts.temporal {
        total = g.add(total, t);
    }
    if let Some(d) = parts.distill {
        let d = g.scale(d, T::lit(weights.lambda));
        total = g.add(total, d);
    }
    total
}
