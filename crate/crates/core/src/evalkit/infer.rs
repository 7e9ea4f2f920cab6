use crate::error::{invalid, Result};
use crate::evstream::{build_voxel_grid, group_between_frames, group_fixed_count, group_fixed_duration_from, EventGroup, EventStream};
use crate::frame::Frame;
use crate::net::Model;
use e2v_tensor::{Graph, Tensor};

/// How a stream is cut into reconstruction steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Grouping {
    /// Between consecutive frame times after discarding a fraction of them.
    BetweenFrames { discard_ratio: f64, seed: u64 },
    FixedCount(usize),
    /// Windows of this many seconds from the origin (first frame time, or
    /// first event when no frame times are known).
    FixedDuration(f64),
}

pub fn make_groups(stream: &EventStream, grouping: Grouping, frame_times: Option<&[f64]>) -> Result<Vec<EventGroup>> {
    match grouping {
        Grouping::BetweenFrames { discard_ratio, seed } => {
            let times = frame_times.ok_or_else(|| invalid("between-frame grouping needs frame times"))?;
            group_between_frames(stream, times, discard_ratio, seed)
        }
        Grouping::FixedCount(n) => group_fixed_count(stream, n),
        Grouping::FixedDuration(dt) => {
            let origin = frame_times.and_then(|t| t.first().copied()).or(stream.first_time());
            match origin {
                Some(o) => group_fixed_duration_from(stream, dt, o),
                None => Ok(Vec::new()),
            }
        }
    }
}

/// A reconstructed frame stamped with its group's end time.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub time: f64,
    pub frame: Frame,
}

/// Runs the network over the groups in order, carrying recurrent state and
/// feeding each output back as the previous frame. Evaluation-mode
/// normalisation throughout.
pub fn reconstruct_groups(model: &Model<f32>, groups: &[EventGroup], width: usize, height: usize) -> Result<Vec<Reconstruction>> {
    model.config.check_resolution(width, height)?;
    let mut state = model.fresh_state(1, width, height);
    let mut prev = Tensor::zeros(&[1, 1, height, width]);
    let mut out = Vec::with_capacity(groups.len());
    for grp in groups {
        let voxel = build_voxel_grid(&grp.events, model.config.bins)?.to_tensor();
        let mut g = Graph::new();
        let v = g.input(voxel);
        let p = g.input(prev);
        let mut gs = state.bind(&mut g);
        let step = model.step(&mut g, v, p, &mut gs, false)?;
        state = crate::net::RecurrentState::read(&g, &gs);
        prev = g.value(step.frame).clone();
        out.push(Reconstruction {
            time: grp.end,
            frame: Frame::from_tensor(&prev),
        });
    }
    Ok(out)
}

pub fn reconstruct_stream(
    model: &Model<f32>,
    stream: &EventStream,
    grouping: Grouping,
    frame_times: Option<&[f64]>,
) -> Result<Vec<Reconstruction>> {
    let groups = make_groups(stream, grouping, frame_times)?;
    reconstruct_groups(model, &groups, usize::from(stream.width()), usize::from(stream.height()))
}
