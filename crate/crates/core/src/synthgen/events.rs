use crate::error::{invalid, Result};
use crate::evstream::{Event, EventStream};
use crate::frame::Frame;

/// Per-pixel threshold crossings of `log(I + c)`. The reference level starts
/// at the first frame and advances by exactly `epsilon` per emitted event, so
/// after the last frame `|L_ref - log(I + c)| < epsilon`. Within an interval
/// the log intensity is taken to move linearly from the reference level, which
/// places the j-th of n crossings at fraction `j epsilon / |theta|`.
pub fn simulate_events(frames: &[Frame], times: &[f64], epsilon: f64, offset: f64) -> Result<EventStream> {
    if frames.len() < 2 || frames.len() != times.len() {
        return Err(invalid("need at least two frames, one time per frame"));
    }
    if !(epsilon > 0.0) || !(offset > 0.0) {
        return Err(invalid("contrast threshold and offset must be positive"));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("frame times must be strictly increasing"));
    }
    let (w, h) = (frames[0].width, frames[0].height);
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(invalid("frames differ in size"));
    }
    if w > u16::MAX as usize || h > u16::MAX as usize {
        return Err(invalid("resolution exceeds the event coordinate range"));
    }
    let log = |v: f32| (v as f64 + offset).ln();
    let mut reference: Vec<f64> = frames[0].data.iter().map(|&v| log(v)).collect();
    let mut events = Vec::new();
    for k in 1..frames.len() {
        let (t0, dt) = (times[k - 1], times[k] - times[k - 1]);
        for (i, r) in reference.iter_mut().enumerate() {
            let theta = log(frames[k].data[i]) - *r;
            // the tolerance makes theta == epsilon up to rounding fire once
            let n = (theta.abs() / epsilon + 1e-9).floor() as usize;
            if n == 0 {
                continue;
            }
            let sign = theta.signum();
            let (x, y) = ((i % w) as u16, (i / w) as u16);
            for j in 1..=n {
                let frac = (j as f64 * epsilon / theta.abs()).min(1.0);
                events.push(Event::new(t0 + frac * dt, x, y, sign as i8));
            }
            *r += sign * n as f64 * epsilon;
        }
    }
    EventStream::new(events, w as u16, h as u16)
}

/// Integrates `epsilon * p` onto `log(I_0 + c)` and maps back to intensity.
/// Row-major, full precision.
pub fn reconstruct_log_intensity_oracle(events: &EventStream, first: &Frame, epsilon: f64, offset: f64) -> Vec<f64> {
    let mut log: Vec<f64> = first.data.iter().map(|&v| (v as f64 + offset).ln()).collect();
    for e in events.events() {
        log[e.y as usize * first.width + e.x as usize] += epsilon * e.p as f64;
    }
    log.into_iter().map(|l| l.exp() - offset).collect()
}
