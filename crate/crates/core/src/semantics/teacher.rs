use crate::frame::{Frame, Mask};
use crate::net::Conv;
use e2v_tensor::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Teacher output for one frame: a feature shaped like the student's
/// bottleneck and `N` category masks, zero-padded.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherBundle {
    /// `(1, C, h, w)`.
    pub feature: Tensor<f32>,
    pub masks: Vec<Mask>,
    /// One label per mask; 0 marks padding.
    pub category_ids: Vec<u32>,
}

impl TeacherBundle {
    /// `(1, N, h, w)` with ones inside each mask.
    pub fn mask_tensor(&self) -> Tensor<f32> {
        let (h, w) = (self.masks[0].height, self.masks[0].width);
        let data = self.masks.iter().flat_map(|m| m.data.iter().map(|&b| if b { 1.0 } else { 0.0 })).collect();
        Tensor::from_vec(&[1, self.masks.len(), h, w], data)
    }
}

/// Source of teacher bundles. Must be deterministic in its inputs.
pub trait TeacherProvider {
    fn bundle(&self, frame: &Frame, sprite_masks: &[Mask]) -> TeacherBundle;
    /// Identifies the provider and its settings; a cache written under a
    /// different fingerprint is rebuilt.
    fn fingerprint(&self) -> String;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    /// `(C, h, w)` of the student bottleneck.
    pub feature_shape: (usize, usize, usize),
    /// `(h, w)` of the masks, equal to the perceptual stage-0 size.
    pub mask_size: (usize, usize),
    pub n_masks: usize,
    pub seed: u64,
}

/// Seed of the default oracle teacher.
pub const TEACHER_SEED: u64 = 0x7eac_4e12;

impl TeacherConfig {
    /// Shapes matching a student network on `width x height` input.
    pub fn for_model(model: &crate::net::ModelConfig, width: usize, height: usize, n_masks: usize) -> Self {
        Self {
            feature_shape: model.feature_shape(width, height),
            mask_size: crate::losses::PerceptualExtractor::<f32>::stage0_size(height, width),
            n_masks,
            seed: TEACHER_SEED,
        }
    }
}

/// Frozen seeded convolutional pyramid on the ground-truth frame, resized to
/// the student's feature shape; masks are the renderer's sprite masks ranked
/// by visible area.
pub struct OracleTeacher {
    pub config: TeacherConfig,
    params: ParamStore<f32>,
    stages: Vec<Conv>,
}

impl OracleTeacher {
    pub fn new(config: TeacherConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let c = config.feature_shape.0;
        let stages = vec![
            Conv::new(&mut params, &mut rng, "teacher.s0", 1, 16, 3, 2, true),
            Conv::new(&mut params, &mut rng, "teacher.s1", 16, 32, 3, 2, true),
            Conv::new(&mut params, &mut rng, "teacher.s2", 32, c, 3, 1, true),
        ];
        Self { config, params, stages }
    }

    pub fn feature(&self, frame: &Frame) -> Tensor<f32> {
        let mut g = Graph::new();
        let mut x = g.input(frame.to_tensor());
        for s in &self.stages {
            let y = s.forward(&mut g, &self.params, x);
            x = g.relu(y);
        }
        let (_, h, w) = self.config.feature_shape;
        let y = g.resize(x, h, w);
        g.value(y).clone()
    }

    /// Sprite indices by visible area, largest first, ties by index; empty
    /// masks are not categories.
    pub fn rank_masks(sprite_masks: &[Mask]) -> Vec<usize> {
        let mut order: Vec<usize> = (0..sprite_masks.len()).filter(|&s| sprite_masks[s].area() > 0).collect();
        order.sort_by_key(|&s| (std::cmp::Reverse(sprite_masks[s].area()), s));
        order
    }
}

impl TeacherProvider for OracleTeacher {
    fn bundle(&self, frame: &Frame, sprite_masks: &[Mask]) -> TeacherBundle {
        let (mh, mw) = self.config.mask_size;
        let mut masks = Vec::with_capacity(self.config.n_masks);
        let mut category_ids = Vec::with_capacity(self.config.n_masks);
        for s in Self::rank_masks(sprite_masks).into_iter().take(self.config.n_masks) {
            masks.push(sprite_masks[s].resize_nearest(mw, mh));
            category_ids.push(s as u32 + 1);
        }
        while masks.len() < self.config.n_masks {
            masks.push(Mask::empty(mw, mh));
            category_ids.push(0);
        }
        TeacherBundle {
            feature: self.feature(frame),
            masks,
            category_ids,
        }
    }

    fn fingerprint(&self) -> String {
        let c = &self.config;
        format!(
            "oracle feature={}x{}x{} masks={}x{} n={} seed={}",
            c.feature_shape.0, c.feature_shape.1, c.feature_shape.2, c.mask_size.0, c.mask_size.1, c.n_masks, c.seed
        )
    }
}
