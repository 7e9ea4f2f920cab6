//! Feature alignment and fusion blocks operating at the bottleneck.

use crate::error::{invalid, Result};
use crate::net::layers::{BatchNorm, Conv};
use e2v_tensor::{Graph, ParamStore, Real, Var};
use rand::Rng;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Conv -> GELU -> Conv -> GELU -> instance norm. Maps event features into
/// the teacher's feature space.
#[derive(Clone, Debug)]
pub struct Cfa {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl Cfa {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, c_in: usize, c_out: usize) -> Self {
        Self {
            conv1: Conv::new(store, rng, "cfa.conv1", c_in, c_out, 3, 1, true),
            conv2: Conv::new(store, rng, "cfa.conv2", c_out, c_out, 3, 1, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f_e: Var) -> Var {
        let x = self.conv1.forward(g, store, f_e);
        let x = g.gelu(x);
        let x = self.conv2.forward(g, store, x);
        let x = g.gelu(x);
        g.instance_norm(x, T::lit(INSTANCE_NORM_EPS))
    }
}

/// Spatial attention map and channel gate:
/// `A = GELU(BN(conv3x3([f_sem, f_e])))` with one channel,
/// `g = sigmoid(conv1x1(GAP(f_e)))`, output `f_e + g * A * f_sem`.
#[derive(Clone, Debug)]
pub struct Sff {
    pub attn: Conv,
    pub bn: BatchNorm,
    pub gate: Conv,
}

/// Intermediate values of [`Sff::forward`], exposed for inspection.
pub struct SffOut<T> {
    pub fused: Var,
    pub attention: Var,
    pub gate: Var,
    pub bn_stats: Option<crate::net::BnStats<T>>,
}

impl Sff {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, channels: usize) -> Self {
        Self {
            attn: Conv::new(store, rng, "sff.attn", 2 * channels, 1, 3, 1, true),
            bn: BatchNorm::new(store, "sff.bn", 1),
            gate: Conv::new(store, rng, "sff.gate", channels, channels, 1, 1, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f_sem: Var, f_e: Var, training: bool) -> Result<SffOut<T>> {
        check_same(g, f_sem, f_e)?;
        let cat = g.concat(&[f_sem, f_e], 1);
        let a = self.attn.forward(g, store, cat);
        let (a, bn_stats) = self.bn.forward(g, store, a, training);
        let attention = g.gelu(a);
        let pooled = g.global_avg_pool(f_e);
        let logits = self.gate.forward(g, store, pooled);
        let gate = g.sigmoid(logits);
        let weighted = g.mul(f_sem, attention);
        let weighted = g.mul(weighted, gate);
        Ok(SffOut {
            fused: g.add(f_e, weighted),
            attention,
            gate,
            bn_stats,
        })
    }
}

/// Single-head cross attention with queries from `f_e` and keys/values from
/// `f_sem`, added back onto `f_e`.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Conv,
    pub k: Conv,
    pub v: Conv,
    pub dim: usize,
}

impl CrossAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, channels: usize) -> Self {
        let dim = (channels / 2).max(1);
        Self {
            q: Conv::new(store, rng, "xattn.q", channels, dim, 1, 1, false),
            k: Conv::new(store, rng, "xattn.k", channels, dim, 1, 1, false),
            v: Conv::new(store, rng, "xattn.v", channels, channels, 1, 1, false),
            dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f_sem: Var, f_e: Var) -> Result<Var> {
        check_same(g, f_sem, f_e)?;
        let (n, c, h, w) = dims(g, f_e);
        let q = self.q.forward(g, store, f_e);
        let q = g.reshape(q, &[n, self.dim, h * w]);
        let k = self.k.forward(g, store, f_sem);
        let k = g.reshape(k, &[n, self.dim, h * w]);
        let v = self.v.forward(g, store, f_sem);
        let v = g.reshape(v, &[n, c, h * w]);
        // scores[n, i, j] = q_i . k_j / sqrt(d)
        let scores = g.matmul(q, k, true, false);
        let scores = g.scale(scores, T::lit(1.0 / (self.dim as f64).sqrt()));
        let attn = g.softmax(scores);
        // out[n, c, i] = sum_j v[c, j] attn[i, j]
        let out = g.matmul(v, attn, false, true);
        let out = g.reshape(out, &[n, c, h, w]);
        Ok(g.add(f_e, out))
    }
}

fn dims<T: Real>(g: &Graph<T>, v: Var) -> (usize, usize, usize, usize) {
    let s = g.shape(v);
    (s[0], s[1], s[2], s[3])
}

fn check_same<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(invalid(format!(
            "feature shapes differ: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}
