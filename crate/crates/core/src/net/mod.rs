//! Recurrent U-Net: a stride-2 convolution plus ConvLSTM per encoder level,
//! residual blocks at the bottleneck, the semantic alignment/fusion stage,
//! and bilinear-upsampling decoders whose outputs can be refined by
//! per-sample filters from a small hypernetwork.

mod checkpoint;
pub(crate) mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_TAG};
pub use layers::{BatchNorm, BnStats, Conv};

use crate::error::{invalid, Result};
use crate::semantics::{Cfa, CrossAttention, Sff};
use e2v_tensor::{Graph, ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Network and objective variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Alignment block, attention-gated fusion, mask-weighted perceptual loss.
    Full,
    /// No alignment block: distillation acts on the encoder features and the
    /// decoder sees them unfused.
    DirectDistill,
    FuseAdd,
    FuseMean,
    FuseXattn,
    /// Full network with an unmasked perceptual loss.
    PlainPerceptual,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::DirectDistill,
        Ablation::FuseAdd,
        Ablation::FuseMean,
        Ablation::FuseXattn,
        Ablation::PlainPerceptual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::DirectDistill => "direct_distill",
            Ablation::FuseAdd => "fuse_add",
            Ablation::FuseMean => "fuse_mean",
            Ablation::FuseXattn => "fuse_xattn",
            Ablation::PlainPerceptual => "plain_perceptual",
        }
    }

    pub fn uses_cfa(self) -> bool {
        self != Ablation::DirectDistill
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| invalid(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub num_encoders: usize,
    pub num_residual_blocks: usize,
    pub bins: usize,
    pub use_cfhm: bool,
    /// Channels of the bottleneck feature and of the teacher feature.
    pub bottleneck_channels: usize,
    pub variant: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            num_encoders: 2,
            num_residual_blocks: 2,
            bins: 5,
            use_cfhm: true,
            bottleneck_channels: 64,
            variant: Ablation::Full,
        }
    }
}

impl ModelConfig {
    /// One encoder level into a 256-channel half-resolution bottleneck.
    pub fn full_scale() -> Self {
        Self {
            base_channels: 32,
            num_encoders: 1,
            bottleneck_channels: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_encoders == 0 || self.bins == 0 || self.base_channels == 0 || self.bottleneck_channels == 0 {
            return Err(invalid("encoder count, bins and channel widths must be positive"));
        }
        Ok(())
    }

    /// Output channels of encoder level `l`; the last level is the bottleneck.
    pub fn level_channels(&self, l: usize) -> usize {
        if l + 1 == self.num_encoders {
            self.bottleneck_channels
        } else {
            self.base_channels << (l + 1)
        }
    }

    /// Bottleneck feature shape `(C, H, W)` for a `width x height` input.
    pub fn feature_shape(&self, width: usize, height: usize) -> (usize, usize, usize) {
        let f = 1 << self.num_encoders;
        (self.bottleneck_channels, height / f, width / f)
    }

    pub fn check_resolution(&self, width: usize, height: usize) -> Result<()> {
        let f = 1 << self.num_encoders;
        if !width.is_multiple_of(f) || !height.is_multiple_of(f) || width == 0 || height == 0 {
            return Err(invalid(format!(
                "{width}x{height} input is not divisible by {f} ({} encoder levels)",
                self.num_encoders
            )));
        }
        Ok(())
    }
}

/// Hidden and cell maps per encoder level, outside any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T> {
    pub hidden: Vec<Tensor<T>>,
    pub cell: Vec<Tensor<T>>,
}

impl<T: Real> RecurrentState<T> {
    pub fn zeros(cfg: &ModelConfig, batch: usize, width: usize, height: usize) -> Self {
        let shapes: Vec<[usize; 4]> = (0..cfg.num_encoders)
            .map(|l| [batch, cfg.level_channels(l), height >> (l + 1), width >> (l + 1)])
            .collect();
        Self {
            hidden: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            cell: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// Enters the state as constants; gradients stop here.
    pub fn bind(&self, g: &mut Graph<T>) -> GraphState {
        GraphState {
            hidden: self.hidden.iter().map(|t| g.input(t.clone())).collect(),
            cell: self.cell.iter().map(|t| g.input(t.clone())).collect(),
        }
    }

    pub fn read(g: &Graph<T>, s: &GraphState) -> Self {
        Self {
            hidden: s.hidden.iter().map(|&v| g.value(v).clone()).collect(),
            cell: s.cell.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }
}

/// Recurrent state as graph nodes, so gradients flow through time.
#[derive(Clone, Debug)]
pub struct GraphState {
    pub hidden: Vec<Var>,
    pub cell: Vec<Var>,
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    down: Conv,
    gates: Conv,
    channels: usize,
}

#[derive(Clone, Debug)]
enum Fusion {
    Sff(Sff),
    Add,
    Mean,
    CrossAttention(CrossAttention),
    Bypass,
}

const CFHM_WIDTH: usize = 16;
/// Dynamic kernels are `delta + CFHM_SCALE * generated`.
const CFHM_SCALE: f64 = 0.1;

#[derive(Clone, Debug)]
struct Cfhm {
    conv1: Conv,
    conv2: Conv,
    heads: Vec<Conv>,
}

/// Encoder outputs: the full-resolution head, each level's hidden map, and
/// the bottleneck feature after the residual blocks.
pub struct Encoded {
    pub head: Var,
    pub levels: Vec<Var>,
    pub f_e: Var,
}

/// Everything one recurrent step produces.
pub struct StepOut<T> {
    pub frame: Var,
    pub f_e: Var,
    pub f_semantic: Option<Var>,
    pub fused: Var,
    pub bn_stats: Option<BnStats<T>>,
}

pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    head: Conv,
    encoders: Vec<EncoderLevel>,
    residuals: Vec<(Conv, Conv)>,
    cfa: Option<Cfa>,
    fusion: Fusion,
    cfhm: Option<Cfhm>,
    decoders: Vec<Conv>,
    pred: Conv,
}

impl<T: Real> Model<T> {
    /// He-initialised network; parameter creation order is fixed, so equal
    /// seeds give equal weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = &config;
        let head = Conv::new(&mut p, &mut rng, "head", c.bins, c.base_channels, 5, 1, true);
        let mut encoders = Vec::new();
        let mut cin = c.base_channels;
        for l in 0..c.num_encoders {
            let ch = c.level_channels(l);
            encoders.push(EncoderLevel {
                down: Conv::new(&mut p, &mut rng, &format!("enc{l}.down"), cin, ch, 5, 2, true),
                gates: Conv::new(&mut p, &mut rng, &format!("enc{l}.lstm"), 2 * ch, 4 * ch, 3, 1, true),
                channels: ch,
            });
            cin = ch;
        }
        let ce = c.bottleneck_channels;
        let residuals = (0..c.num_residual_blocks)
            .map(|r| {
                (
                    Conv::new(&mut p, &mut rng, &format!("res{r}.conv1"), ce, ce, 3, 1, true),
                    Conv::new(&mut p, &mut rng, &format!("res{r}.conv2"), ce, ce, 3, 1, true),
                )
            })
            .collect();
        let cfa = c.variant.uses_cfa().then(|| Cfa::new(&mut p, &mut rng, ce, ce));
        let fusion = match c.variant {
            Ablation::Full | Ablation::PlainPerceptual => Fusion::Sff(Sff::new(&mut p, &mut rng, ce)),
            Ablation::FuseAdd => Fusion::Add,
            Ablation::FuseMean => Fusion::Mean,
            Ablation::FuseXattn => Fusion::CrossAttention(CrossAttention::new(&mut p, &mut rng, ce)),
            Ablation::DirectDistill => Fusion::Bypass,
        };
        // decoder d upsamples level L-1-d and merges the skip one level up
        let mut decoders = Vec::new();
        let mut dec_out = Vec::new();
        let mut cin = ce;
        for d in 0..c.num_encoders {
            let skip = Self::skip_channels(c, d);
            decoders.push(Conv::new(&mut p, &mut rng, &format!("dec{d}"), cin + skip, skip, 3, 1, true));
            dec_out.push(skip);
            cin = skip;
        }
        let cfhm = c.use_cfhm.then(|| Cfhm {
            conv1: Conv::new(&mut p, &mut rng, "cfhm.conv1", c.bins + 1, CFHM_WIDTH, 3, 2, true),
            conv2: Conv::new(&mut p, &mut rng, "cfhm.conv2", CFHM_WIDTH, CFHM_WIDTH, 3, 2, true),
            heads: dec_out
                .iter()
                .enumerate()
                .map(|(d, &ch)| Conv::new(&mut p, &mut rng, &format!("cfhm.head{d}"), CFHM_WIDTH, ch * 9, 1, 1, true))
                .collect(),
        });
        let pred = Conv::new(&mut p, &mut rng, "pred", c.base_channels, 1, 1, 1, true);
        Ok(Self {
            config,
            params: p,
            head,
            encoders,
            residuals,
            cfa,
            fusion,
            cfhm,
            decoders,
            pred,
        })
    }

    fn skip_channels(c: &ModelConfig, d: usize) -> usize {
        let l = c.num_encoders - 1 - d;
        if l == 0 {
            c.base_channels
        } else {
            c.level_channels(l - 1)
        }
    }

    /// Channel count of each decoder's output, top (coarsest) first.
    pub fn decoder_channels(&self) -> Vec<usize> {
        (0..self.config.num_encoders).map(|d| Self::skip_channels(&self.config, d)).collect()
    }

    pub fn fresh_state(&self, batch: usize, width: usize, height: usize) -> RecurrentState<T> {
        RecurrentState::zeros(&self.config, batch, width, height)
    }

    fn check_voxel(&self, g: &Graph<T>, voxel: Var) -> Result<()> {
        let s = g.shape(voxel);
        if s.len() != 4 || s[1] != self.config.bins {
            return Err(invalid(format!("voxel input {s:?} does not have {} bins", self.config.bins)));
        }
        self.config.check_resolution(s[3], s[2])
    }

    /// Head, then per level a stride-2 k5 convolution and a k3 ConvLSTM, then
    /// the residual blocks. Updates `state` in place.
    pub fn encode(&self, g: &mut Graph<T>, voxel: Var, state: &mut GraphState) -> Result<Encoded> {
        self.check_voxel(g, voxel)?;
        let p = &self.params;
        let x = self.head.forward(g, p, voxel);
        let head = g.relu(x);
        let mut x = head;
        let mut levels = Vec::with_capacity(self.encoders.len());
        for (l, enc) in self.encoders.iter().enumerate() {
            let d = enc.down.forward(g, p, x);
            let d = g.relu(d);
            let (h, c) = convlstm(g, p, &enc.gates, enc.channels, d, state.hidden[l], state.cell[l]);
            state.hidden[l] = h;
            state.cell[l] = c;
            levels.push(h);
            x = h;
        }
        for (c1, c2) in &self.residuals {
            x = residual(g, p, c1, c2, x);
        }
        Ok(Encoded { head, levels, f_e: x })
    }

    /// Alignment into the teacher's feature space, when the variant has it.
    pub fn align(&self, g: &mut Graph<T>, f_e: Var) -> Option<Var> {
        self.cfa.as_ref().map(|cfa| cfa.forward(g, &self.params, f_e))
    }

    /// Fuses aligned semantics into the event feature.
    pub fn fuse(&self, g: &mut Graph<T>, f_e: Var, f_sem: Option<Var>, training: bool) -> Result<(Var, Option<BnStats<T>>)> {
        let Some(s) = f_sem else {
            return Ok((f_e, None));
        };
        Ok(match &self.fusion {
            Fusion::Sff(sff) => {
                let out = sff.forward(g, &self.params, s, f_e, training)?;
                (out.fused, out.bn_stats)
            }
            Fusion::Add => (g.add(f_e, s), None),
            Fusion::Mean => {
                let sum = g.add(f_e, s);
                (g.scale(sum, T::lit(0.5)), None)
            }
            Fusion::CrossAttention(xa) => (xa.forward(g, &self.params, s, f_e)?, None),
            Fusion::Bypass => (f_e, None),
        })
    }

    /// Per-decoder dynamic depthwise kernels `(N, C_d, 3, 3)` from the voxel
    /// grid and the previous reconstruction. `None` when the hypernetwork is off.
    pub fn cfhm_generate(&self, g: &mut Graph<T>, voxel: Var, prev_frame: Var) -> Option<Vec<Var>> {
        let cf = self.cfhm.as_ref()?;
        let p = &self.params;
        let x = g.concat(&[voxel, prev_frame], 1);
        let x = cf.conv1.forward(g, p, x);
        let x = g.relu(x);
        let x = cf.conv2.forward(g, p, x);
        let x = g.relu(x);
        let ctx = g.global_avg_pool(x);
        let n = g.shape(voxel)[0];
        let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
        delta.set4(0, 0, 1, 1, T::one());
        let delta = g.input(delta);
        Some(
            cf.heads
                .iter()
                .zip(self.decoder_channels())
                .map(|(head, ch)| {
                    let k = head.forward(g, p, ctx);
                    let k = g.reshape(k, &[n, ch, 3, 3]);
                    let k = g.scale(k, T::lit(CFHM_SCALE));
                    g.add(k, delta)
                })
                .collect(),
        )
    }

    /// One decoder: bilinear 2x upsample, concatenate the skip, k3 conv,
    /// optional per-sample depthwise filter, ReLU.
    pub fn decoder_forward(&self, g: &mut Graph<T>, d: usize, f: Var, skip: Var, kernel: Option<Var>) -> Result<Var> {
        let (fs, ss) = (g.shape(f).to_vec(), g.shape(skip).to_vec());
        if ss[2] != 2 * fs[2] || ss[3] != 2 * fs[3] || ss[0] != fs[0] {
            return Err(invalid(format!("skip {ss:?} is not twice the size of {fs:?}")));
        }
        let up = g.upsample2x(f);
        let cat = g.concat(&[up, skip], 1);
        let mut y = self.decoders[d].forward(g, &self.params, cat);
        if let Some(k) = kernel {
            y = g.depthwise(y, k);
        }
        Ok(g.relu(y))
    }

    /// Decoder stack and sigmoid head.
    pub fn reconstruct_frame(&self, g: &mut Graph<T>, fused: Var, enc: &Encoded, kernels: Option<&[Var]>) -> Result<Var> {
        let l = self.config.num_encoders;
        let mut x = fused;
        for d in 0..l {
            let skip = if d + 1 == l { enc.head } else { enc.levels[l - 2 - d] };
            x = self.decoder_forward(g, d, x, skip, kernels.map(|k| k[d]))?;
        }
        let y = self.pred.forward(g, &self.params, x);
        Ok(g.sigmoid(y))
    }

    /// Full recurrent step. `prev_frame` is `(N, 1, H, W)` and should carry
    /// no gradient.
    pub fn step(&self, g: &mut Graph<T>, voxel: Var, prev_frame: Var, state: &mut GraphState, training: bool) -> Result<StepOut<T>> {
        self.step_with(g, voxel, prev_frame, state, training, false)
    }

    /// [`Model::step`], optionally cutting the gradient between the encoder
    /// and the alignment block. Forward values are identical either way.
    pub fn step_with(
        &self,
        g: &mut Graph<T>,
        voxel: Var,
        prev_frame: Var,
        state: &mut GraphState,
        training: bool,
        detach_alignment_input: bool,
    ) -> Result<StepOut<T>> {
        let enc = self.encode(g, voxel, state)?;
        let align_in = if detach_alignment_input { g.detach(enc.f_e) } else { enc.f_e };
        let f_semantic = self.align(g, align_in);
        let (fused, bn_stats) = self.fuse(g, enc.f_e, f_semantic, training)?;
        let kernels = self.cfhm_generate(g, voxel, prev_frame);
        let frame = self.reconstruct_frame(g, fused, &enc, kernels.as_deref())?;
        Ok(StepOut {
            frame,
            f_e: enc.f_e,
            f_semantic,
            fused,
            bn_stats,
        })
    }

    /// Folds batch statistics from a training step into the running averages.
    pub fn update_running_stats(&mut self, stats: &(Vec<T>, Vec<T>)) {
        if let Fusion::Sff(sff) = &self.fusion {
            sff.bn.update_running(&mut self.params, &stats.0, &stats.1);
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }
}

fn convlstm<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, gates: &Conv, ch: usize, x: Var, h: Var, c: Var) -> (Var, Var) {
    let cat = g.concat(&[x, h], 1);
    let z = gates.forward(g, p, cat);
    let i = g.narrow(z, 1, 0, ch);
    let i = g.sigmoid(i);
    let f = g.narrow(z, 1, ch, ch);
    let f = g.sigmoid(f);
    let o = g.narrow(z, 1, 2 * ch, ch);
    let o = g.sigmoid(o);
    let cand = g.narrow(z, 1, 3 * ch, ch);
    let cand = g.tanh(cand);
    let keep = g.mul(f, c);
    let write = g.mul(i, cand);
    let c_new = g.add(keep, write);
    let squashed = g.tanh(c_new);
    (g.mul(o, squashed), c_new)
}

/// `f + conv2(relu(conv1(f)))`.
pub fn residual<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, c1: &Conv, c2: &Conv, f: Var) -> Var {
    let y = c1.forward(g, p, f);
    let y = g.relu(y);
    let y = c2.forward(g, p, y);
    g.add(f, y)
}
