//! Synthetic multi-sprite scenes: rendering with exact backward flow and
//! occlusion-resolved masks, plus log-intensity event simulation.

mod dataset;
mod events;
mod render;
mod scene;

pub use dataset::{generate_dataset, list_sequences, load_sequence, write_sequence, SequenceMeta};
pub use events::{reconstruct_log_intensity_oracle, simulate_events};
pub use render::render_sequence;
pub use scene::{random_scene, SceneConfig, SceneSpec, Shape, Sprite, Texture};

use crate::evstream::EventStream;
use crate::frame::{Flow, Frame, Mask};

/// Ground truth for one scene. `flows[k-1]` maps frame k back to frame k-1;
/// `masks[k][s]` is sprite `s`'s visible area in frame k.
#[derive(Clone, Debug)]
pub struct SceneSequence {
    pub frames: Vec<Frame>,
    pub flows: Vec<Flow>,
    pub masks: Vec<Vec<Mask>>,
    pub events: EventStream,
    pub frame_times: Vec<f64>,
    pub warnings: Vec<String>,
}
