use super::EventStream;
use crate::error::{invalid, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A contiguous slice of a stream together with the interval it stands for.
/// `end` is the reconstruction timestamp attached to the group.
#[derive(Clone, Debug, PartialEq)]
pub struct EventGroup {
    pub events: EventStream,
    pub start: f64,
    pub end: f64,
}

/// Consecutive groups of exactly `n` events; a short remainder is dropped.
pub fn group_fixed_count(stream: &EventStream, n: usize) -> Result<Vec<EventGroup>> {
    if n == 0 {
        return Err(invalid("group size must be at least 1"));
    }
    let full = stream.len() / n;
    Ok((0..full)
        .map(|i| {
            let events = stream.slice(i * n..(i + 1) * n);
            let (start, end) = (events.first_time().unwrap(), events.last_time().unwrap());
            EventGroup { events, start, end }
        })
        .collect())
}

/// Windows `[t0 + i dt, t0 + (i+1) dt)` starting at the first event; the last
/// window is closed so the final event is included. Empty windows are kept.
pub fn group_fixed_duration(stream: &EventStream, dt: f64) -> Result<Vec<EventGroup>> {
    match stream.first_time() {
        Some(t0) => group_fixed_duration_from(stream, dt, t0),
        None if dt > 0.0 => Ok(Vec::new()),
        None => Err(invalid(format!("window duration must be positive, got {dt}"))),
    }
}

/// As [`group_fixed_duration`] with an explicit origin. Events before `origin`
/// are not covered by any window.
pub fn group_fixed_duration_from(stream: &EventStream, dt: f64, origin: f64) -> Result<Vec<EventGroup>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid(format!("window duration must be positive, got {dt}")));
    }
    let Some(t_last) = stream.last_time() else {
        return Ok(Vec::new());
    };
    if t_last < origin {
        return Ok(Vec::new());
    }
    // tolerance keeps an exact multiple of dt from spawning an extra empty window
    let windows = (((t_last - origin) / dt) - 1e-9).ceil().max(1.0) as usize;
    // window index with the same tolerance, so t = origin + k dt lands in window k
    let index = |t: f64| ((t - origin) / dt + 1e-9).floor();
    let events = stream.events();
    let mut groups = Vec::with_capacity(windows);
    let mut lo = stream.lower_bound(origin);
    for i in 0..windows {
        let start = origin + i as f64 * dt;
        let end = origin + (i + 1) as f64 * dt;
        let hi = if i + 1 == windows {
            stream.len()
        } else {
            lo + events[lo..].partition_point(|e| index(e.t) < (i + 1) as f64)
        };
        groups.push(EventGroup {
            events: stream.slice(lo..hi),
            start,
            end,
        });
        lo = hi;
    }
    Ok(groups)
}

/// Indices of frame times kept after discarding `floor(ratio * n)` interior
/// frames (clamped to the interior count), chosen uniformly without replacement.
pub fn surviving_frames(n: usize, discard_ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(invalid("need at least two frame times"));
    }
    if !(0.0..=1.0).contains(&discard_ratio) {
        return Err(invalid(format!("discard ratio {discard_ratio} outside [0, 1]")));
    }
    let interior = n - 2;
    let drop = ((discard_ratio * n as f64).floor() as usize).min(interior);
    let mut keep = vec![true; n];
    if drop > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in rand::seq::index::sample(&mut rng, interior, drop) {
            keep[i + 1] = false;
        }
    }
    Ok((0..n).filter(|&i| keep[i]).collect())
}

/// Groups between consecutive surviving frame times: the first group is
/// `[t_0, t_1]`, later groups `(t_{k-1}, t_k]`.
pub fn group_between_frames(
    stream: &EventStream,
    frame_times: &[f64],
    discard_ratio: f64,
    seed: u64,
) -> Result<Vec<EventGroup>> {
    if frame_times.len() < 2 {
        return Err(invalid("need at least two frame times"));
    }
    if frame_times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("frame times must be strictly increasing"));
    }
    let kept = surviving_frames(frame_times.len(), discard_ratio, seed)?;
    let mut lo = stream.lower_bound(frame_times[kept[0]]);
    Ok(kept
        .windows(2)
        .map(|w| {
            let (start, end) = (frame_times[w[0]], frame_times[w[1]]);
            let hi = stream.upper_bound(end);
            let g = EventGroup {
                events: stream.slice(lo..hi),
                start,
                end,
            };
            lo = hi;
            g
        })
        .collect())
}
