use super::{SceneSequence, SceneSpec};
use crate::error::Result;
use crate::evstream::EventStream;
use crate::frame::{Flow, Frame, Mask};

/// Surface visible at one pixel: its intensity, owning sprite (None for the
/// background) and screen velocity.
struct Hit {
    value: f64,
    sprite: Option<usize>,
    velocity: (f64, f64),
}

fn shade_pixel(spec: &SceneSpec, order: &[usize], centres: &[(f64, f64)], x: f64, y: f64, t: f64) -> Hit {
    for &s in order {
        let sp = &spec.sprites[s];
        let (dx, dy) = (x - centres[s].0, y - centres[s].1);
        if sp.shape.contains(dx, dy) {
            return Hit {
                value: sp.shade(dx, dy),
                sprite: Some(s),
                velocity: sp.velocity,
            };
        }
    }
    let u = x + spec.bg_origin.0 - spec.pan.0 * t;
    let v = y + spec.bg_origin.1 - spec.pan.1 * t;
    Hit {
        value: spec.background.sample(u, v),
        sprite: None,
        velocity: spec.pan,
    }
}

/// Frames, backward flows and visible-area masks. The event stream of the
/// returned sequence is empty; see [`super::simulate_events`].
pub fn render_sequence(spec: &SceneSpec) -> Result<SceneSequence> {
    spec.validate()?;
    let times = spec.frame_times();
    let (w, h) = (spec.width, spec.height);
    // topmost first; ties keep declaration order
    let mut order: Vec<usize> = (0..spec.sprites.len()).collect();
    order.sort_by_key(|&s| std::cmp::Reverse(spec.sprites[s].z_order));

    let mut frames = Vec::with_capacity(times.len());
    let mut flows = Vec::with_capacity(times.len().saturating_sub(1));
    let mut masks = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let centres: Vec<(f64, f64)> = spec.sprites.iter().map(|s| s.centre(t)).collect();
        let mut frame = Frame::filled(w, h, 0.0);
        let mut frame_masks = vec![Mask::empty(w, h); spec.sprites.len()];
        let mut flow = Flow::zeros(w, h);
        let dt = if k > 0 { t - times[k - 1] } else { 0.0 };
        for y in 0..h {
            for x in 0..w {
                let hit = shade_pixel(spec, &order, &centres, x as f64, y as f64, t);
                frame.data[y * w + x] = hit.value as f32;
                if let Some(s) = hit.sprite {
                    frame_masks[s].data[y * w + x] = true;
                }
                flow.set(x, y, ((-hit.velocity.0 * dt) as f32, (-hit.velocity.1 * dt) as f32));
            }
        }
        frames.push(frame);
        masks.push(frame_masks);
        if k > 0 {
            flows.push(flow);
        }
    }

    let warnings = (0..spec.sprites.len())
        .filter(|&s| masks.iter().all(|m| m[s].area() == 0))
        .map(|s| format!("sprite {s} never visible on the canvas"))
        .collect();
    Ok(SceneSequence {
        frames,
        flows,
        masks,
        events: EventStream::empty(w as u16, h as u16),
        frame_times: times,
        warnings,
    })
}
