//! Windowed truncated-BPTT training with the combined semantic, temporal and
//! distillation objective.

mod data;
mod suite;

pub use data::{load_train_sequence, load_train_set, TrainSequence};
pub use suite::{run_ablation_suite, SuiteConfig, SuiteEntry, SuiteResult, SuiteRow};

use crate::error::{invalid, Error, Result};
use crate::losses::{
    relational_distillation_loss, semantic_perceptual_loss, temporal_consistency_loss, total_loss, LossParts, LossWeights,
    PerceptualExtractor,
};
use crate::net::{save_checkpoint, Ablation, BnStats, Model, ModelConfig, RecurrentState};
use crate::seed;
use e2v_tensor::{clip_grad_norm, Adam, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seq_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub model: ModelConfig,
    /// Teacher masks entering the union, largest first.
    pub n_masks: usize,
    pub clip_norm: f64,
    /// Carry recurrent state (detached) across consecutive windows of a
    /// sequence instead of resetting it.
    pub carry_state: bool,
    /// Windows drawn per sequence per epoch; `None` uses every window.
    pub windows_per_sequence: Option<usize>,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
    /// Keep the distillation gradient inside the alignment block instead of
    /// letting it reach the encoder.
    pub detach_alignment_input: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seq_len: 16,
            batch_size: 1,
            epochs: 8,
            learning_rate: 1e-3,
            weights: LossWeights::default(),
            seed: 0,
            model: ModelConfig::default(),
            n_masks: 10,
            clip_norm: 1.0,
            carry_state: false,
            windows_per_sequence: None,
            checkpoint_every: 0,
            detach_alignment_input: false,
        }
    }
}

impl TrainConfig {
    /// Window length for full-scale runs.
    pub const LONG_SEQ_LEN: usize = 40;

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.model.variant = a;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.seq_len < 2 {
            return Err(invalid("seq_len must be at least 2"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.n_masks == 0 {
            return Err(invalid("batch_size, epochs and n_masks must be positive"));
        }
        let w = &self.weights;
        if !(self.learning_rate > 0.0 && w.lambda > 0.0 && w.alpha > 0.0 && self.clip_norm > 0.0) {
            return Err(invalid("learning rate, lambda, alpha and clip norm must be positive"));
        }
        if self.windows_per_sequence == Some(0) {
            return Err(invalid("windows_per_sequence must be positive"));
        }
        Ok(())
    }
}

/// Window-averaged loss parts of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub semantic: f64,
    pub temporal: f64,
    pub distill: f64,
    pub total: f64,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<LossRow>,
    pub warnings: Vec<String>,
    pub checkpoints: Vec<PathBuf>,
}

/// A window of `len` consecutive steps starting at step `start` (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Window {
    seq: usize,
    start: usize,
    len: usize,
}

/// Splits steps `1..=steps` into full windows after an offset in
/// `0..steps % len`; the leftover steps are dropped.
fn windows_of(seq: usize, steps: usize, len: usize, offset: usize) -> Vec<Window> {
    (0..(steps - offset) / len)
        .map(|i| Window {
            seq,
            start: 1 + offset + i * len,
            len,
        })
        .collect()
}

/// Epoch plan: batches of windows. Reset mode shuffles all windows; carry
/// mode batches whole sequences and walks their windows in order.
fn plan_epoch(data: &[TrainSequence], cfg: &TrainConfig, epoch: usize) -> Vec<Vec<Window>> {
    let mut rng = seed::rng_indexed(cfg.seed, "epoch", epoch as u64);
    let per_seq: Vec<Vec<Window>> = data
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let spare = s.steps() % cfg.seq_len;
            let offset = if spare > 0 { rng.random_range(0..=spare) } else { 0 };
            let mut w = windows_of(i, s.steps(), cfg.seq_len, offset);
            if let Some(k) = cfg.windows_per_sequence {
                if !cfg.carry_state {
                    w.shuffle(&mut rng);
                }
                w.truncate(k);
                w.sort_by_key(|w| w.start);
            }
            w
        })
        .collect();
    if cfg.carry_state {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut batches = Vec::new();
        for group in order.chunks(cfg.batch_size) {
            let depth = group.iter().map(|&s| per_seq[s].len()).min().unwrap_or(0);
            for i in 0..depth {
                batches.push(group.iter().map(|&s| per_seq[s][i]).collect());
            }
        }
        batches
    } else {
        let mut all: Vec<Window> = per_seq.into_iter().flatten().collect();
        all.shuffle(&mut rng);
        all.chunks(cfg.batch_size).map(<[Window]>::to_vec).collect()
    }
}

fn stack(items: impl Iterator<Item = Tensor<f32>>) -> Tensor<f32> {
    Tensor::stack(&items.collect::<Vec<_>>())
}

/// Result of one unrolled window batch before the optimizer step.
struct WindowPass {
    row: LossRow,
    grads: Vec<Option<Tensor<f32>>>,
    bn_stats: Vec<BnStats<f32>>,
    end_state: RecurrentState<f32>,
    last_frame: Tensor<f32>,
}

/// Unrolls the model over a batch of equal-length windows and backpropagates
/// the window-averaged objective through time.
fn window_pass(
    model: &Model<f32>,
    phi: &PerceptualExtractor<f32>,
    data: &[TrainSequence],
    batch: &[Window],
    cfg: &TrainConfig,
    init: Option<(&RecurrentState<f32>, &Tensor<f32>)>,
) -> Result<WindowPass> {
    let len = batch[0].len;
    let (h, w) = (data[batch[0].seq].height(), data[batch[0].seq].width());
    let mut g = Graph::new();
    let fresh;
    let (state0, prev0) = match init {
        Some((s, p)) => (s, p.clone()),
        None => {
            fresh = model.fresh_state(batch.len(), w, h);
            (&fresh, Tensor::zeros(&[batch.len(), 1, h, w]))
        }
    };
    let mut state = state0.bind(&mut g);
    let mut prev_value = prev0;
    let mut prev_rec: Option<Var> = None;
    let plain = model.config.variant == Ablation::PlainPerceptual;
    let direct = model.config.variant == Ablation::DirectDistill;
    let (mut sem_sum, mut tmp_sum, mut dis_sum): (Option<Var>, Option<Var>, Option<Var>) = (None, None, None);
    let mut bn_stats = Vec::new();
    let acc = |g: &mut Graph<f32>, s: &mut Option<Var>, v: Var| {
        *s = Some(match *s {
            None => v,
            Some(t) => g.add(t, v),
        });
    };
    for t in 0..len {
        let step = |w: &Window| w.start + t;
        let voxel = g.input(stack(batch.iter().map(|w| data[w.seq].voxels[step(w) - 1].clone())));
        let prev_in = g.input(prev_value.clone());
        let out = model.step_with(&mut g, voxel, prev_in, &mut state, true, cfg.detach_alignment_input)?;
        if let Some(s) = out.bn_stats.clone() {
            bn_stats.push(s);
        }
        let gt_k = stack(batch.iter().map(|w| data[w.seq].frames[step(w)].clone()));
        let gt = g.input(gt_k.clone());
        let mask = (!plain).then(|| stack(batch.iter().map(|w| data[w.seq].masks[step(w)].clone())));
        let sem = semantic_perceptual_loss(&mut g, phi, out.frame, gt, mask.as_ref())?;
        acc(&mut g, &mut sem_sum, sem);
        if let Some(prev) = prev_rec {
            let gt_km1 = stack(batch.iter().map(|w| data[w.seq].frames[step(w) - 1].clone()));
            let flow = stack(batch.iter().map(|w| data[w.seq].flows[step(w) - 1].clone()));
            let tl = temporal_consistency_loss(&mut g, out.frame, prev, &gt_k, &gt_km1, &flow, cfg.weights.alpha)?;
            acc(&mut g, &mut tmp_sum, tl);
        }
        let student = if direct { out.f_e } else { out.f_semantic.expect("alignment block present") };
        let teacher = g.input(stack(batch.iter().map(|w| data[w.seq].teacher[step(w)].clone())));
        let dl = relational_distillation_loss(&mut g, student, teacher)?;
        acc(&mut g, &mut dis_sum, dl);
        prev_value = g.value(out.frame).clone();
        prev_rec = Some(out.frame);
    }
    let semantic = g.scale(sem_sum.expect("len >= 2"), 1.0 / len as f32);
    let temporal = g.scale(tmp_sum.expect("len >= 2"), 1.0 / (len - 1) as f32);
    let distill = g.scale(dis_sum.expect("len >= 2"), 1.0 / len as f32);
    let parts = LossParts {
        semantic,
        temporal: Some(temporal),
        distill: Some(distill),
    };
    let total = total_loss(&mut g, parts, &cfg.weights);
    let v = |x: Var| f64::from(g.value(x).item());
    let row = LossRow {
        step: 0,
        semantic: v(semantic),
        temporal: v(temporal),
        distill: v(distill),
        total: v(total),
    };
    if !row.total.is_finite() {
        return Ok(WindowPass {
            row,
            grads: Vec::new(),
            bn_stats,
            end_state: RecurrentState::read(&g, &state),
            last_frame: prev_value,
        });
    }
    let grads = g.backward(total);
    Ok(WindowPass {
        row,
        grads: g.param_grads(&grads, &model.params),
        bn_stats,
        end_state: RecurrentState::read(&g, &state),
        last_frame: prev_value,
    })
}

fn write_log(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(["step", "semantic", "temporal", "distill", "total"])
        .map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.semantic.to_string(),
            r.temporal.to_string(),
            r.distill.to_string(),
            r.total.to_string(),
        ])
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains on in-memory sequences. With `out_dir`, writes `loss.csv`,
/// periodic `ckpt_epochNNN.e2v` files and the final `model.e2v`.
pub fn train_on(data: &[TrainSequence], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("no trainable sequences".into()));
    }
    let (w, h) = (data[0].width(), data[0].height());
    if data.iter().any(|s| (s.width(), s.height()) != (w, h)) {
        return Err(Error::Data("sequences differ in resolution".into()));
    }
    cfg.model.check_resolution(w, h)?;
    let mut warnings = Vec::new();
    let short: Vec<&str> = data.iter().filter(|s| s.steps() < cfg.seq_len).map(|s| s.name.as_str()).collect();
    if !short.is_empty() {
        warnings.push(format!("sequences shorter than one window are unused: {}", short.join(", ")));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut model = Model::<f32>::new(cfg.model.clone(), seed::derive(cfg.seed, "init"))?;
    let phi = PerceptualExtractor::standard();
    let mut opt = Adam::new(&model.params, cfg.learning_rate as f32);
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut carried: Option<(Vec<usize>, RecurrentState<f32>, Tensor<f32>)> = None;
        for batch in plan_epoch(data, cfg, epoch) {
            let seqs: Vec<usize> = batch.iter().map(|w| w.seq).collect();
            let init = match &carried {
                Some((s, st, f)) if cfg.carry_state && *s == seqs => Some((st, f)),
                _ => None,
            };
            let mut pass = window_pass(&model, &phi, data, &batch, cfg, init)?;
            pass.row.step = log.len();
            if !pass.row.total.is_finite() {
                let r = pass.row;
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {} (epoch {epoch}, windows {:?}): semantic {} temporal {} distill {}",
                    r.step,
                    batch.iter().map(|w| (&data[w.seq].name, w.start)).collect::<Vec<_>>(),
                    r.semantic,
                    r.temporal,
                    r.distill
                )));
            }
            clip_grad_norm(&mut pass.grads, cfg.clip_norm as f32);
            opt.step(&mut model.params, &pass.grads);
            for s in &pass.bn_stats {
                model.update_running_stats(s);
            }
            log.push(pass.row);
            carried = Some((seqs, pass.end_state, pass.last_frame));
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                let p = dir.join(format!("ckpt_epoch{:03}.e2v", epoch + 1));
                save_checkpoint(&p, &model)?;
                checkpoints.push(p);
            }
        }
    }
    if let Some(dir) = out_dir {
        write_log(&dir.join("loss.csv"), &log)?;
        let p = dir.join("model.e2v");
        save_checkpoint(&p, &model)?;
        checkpoints.push(p);
    }
    if log.is_empty() {
        warnings.push("no complete window in the dataset; the model is untrained".into());
    }
    Ok(TrainOutcome {
        model,
        log,
        warnings,
        checkpoints,
    })
}

/// Loads the dataset with its teacher cache and trains.
pub fn train(root: &Path, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let (data, mut warnings) = load_train_set(root, cfg.model.bins, cfg.n_masks)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let mut out = train_on(&data, cfg, out_dir)?;
    warnings.append(&mut out.warnings);
    out.warnings = warnings;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_tile_from_offset() {
        let w = windows_of(0, 99, 16, 2);
        assert_eq!(w.len(), 6);
        assert_eq!(w[0].start, 3);
        assert_eq!(w[5].start + 15, 98);
        assert_eq!(windows_of(0, 10, 16, 0).len(), 0);
    }
}
