use crate::error::{Error, Result};
use crate::evstream::{build_voxel_grid, group_between_frames};
use crate::losses::mask_union;
use crate::semantics::load_teacher_cache;
use crate::synthgen::{list_sequences, load_sequence};
use e2v_tensor::Tensor;
use std::path::Path;

/// One sequence materialised for training. Step `j` (1-based) consumes the
/// events between frames `j-1` and `j` and targets frame `j`.
#[derive(Clone, Debug)]
pub struct TrainSequence {
    pub name: String,
    /// `(1, B, H, W)` voxel grid of step `j` at index `j - 1`.
    pub voxels: Vec<Tensor<f32>>,
    /// `(1, 1, H, W)` ground truth per frame.
    pub frames: Vec<Tensor<f32>>,
    /// `(1, 2, H, W)` backward flow of frame `j` at index `j - 1`.
    pub flows: Vec<Tensor<f32>>,
    /// `(1, C, h, w)` teacher feature per frame.
    pub teacher: Vec<Tensor<f32>>,
    /// `(1, 1, h, w)` union of the first `n_masks` teacher masks per frame.
    pub masks: Vec<Tensor<f32>>,
}

impl TrainSequence {
    pub fn steps(&self) -> usize {
        self.voxels.len()
    }

    pub fn width(&self) -> usize {
        self.frames[0].shape()[3]
    }

    pub fn height(&self) -> usize {
        self.frames[0].shape()[2]
    }
}

/// Loads frames, flows, between-frame voxel grids and the cached teacher
/// output of one sequence directory.
pub fn load_train_sequence(dir: &Path, bins: usize, n_masks: usize) -> Result<TrainSequence> {
    let (meta, seq) = load_sequence(dir)?;
    let k = seq.frames.len();
    let teacher = load_teacher_cache(dir, k)?;
    let groups = group_between_frames(&seq.events, &seq.frame_times, 0.0, 0)?;
    let voxels = groups
        .iter()
        .map(|g| build_voxel_grid(&g.events, bins).map(|v| v.to_tensor()))
        .collect::<Result<Vec<_>>>()?;
    let mut masks = Vec::with_capacity(k);
    let mut features = Vec::with_capacity(k);
    for (f, b) in teacher.into_iter().enumerate() {
        let (_, _, mh, mw) = b.mask_tensor().dims4();
        if (mh, mw) != ((meta.height).div_ceil(2), (meta.width).div_ceil(2)) {
            return Err(Error::Data(format!("{} frame {f}: teacher masks are {mh}x{mw}", dir.display())));
        }
        let all = b.mask_tensor();
        let keep = n_masks.min(all.shape()[1]);
        let plane = mh * mw;
        let top = Tensor::from_vec(&[1, keep, mh, mw], all.data()[..keep * plane].to_vec());
        masks.push(mask_union(&top));
        features.push(b.feature);
    }
    Ok(TrainSequence {
        name: dir.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        voxels,
        frames: seq.frames.iter().map(|f| f.to_tensor()).collect(),
        flows: seq.flows.iter().map(|f| f.to_tensor()).collect(),
        teacher: features,
        masks,
    })
}

/// Loads every sequence under `root`. Sequences whose teacher cache is
/// missing or unreadable are skipped with a warning; other errors abort.
pub fn load_train_set(root: &Path, bins: usize, n_masks: usize) -> Result<(Vec<TrainSequence>, Vec<String>)> {
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for dir in list_sequences(root)? {
        match load_train_sequence(&dir, bins, n_masks) {
            Ok(s) => out.push(s),
            Err(e @ (Error::Data(_) | Error::Io { .. } | Error::Format { .. })) if is_teacher_problem(&dir, &e) => {
                warnings.push(format!("skipping {}: {e}", dir.display()));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((out, warnings))
}

fn is_teacher_problem(dir: &Path, e: &Error) -> bool {
    let teacher = crate::semantics::cache_path(dir, 0);
    let teacher_dir = teacher.parent().unwrap_or(dir);
    match e {
        Error::Data(_) => true,
        Error::Io { path, .. } | Error::Format { path, .. } => path.starts_with(teacher_dir),
        _ => false,
    }
}
