//! Event data model, grouping strategies and voxel-grid encoding.

mod grouping;
mod io;
mod voxel;

pub use grouping::{group_between_frames, group_fixed_count, group_fixed_duration, group_fixed_duration_from, surviving_frames, EventGroup};
pub use io::{read_events, read_events_csv, read_evb1, write_events_csv, write_evb1};
pub use voxel::{build_voxel_grid, VoxelGrid};

use crate::error::{invalid, Result};
use std::cmp::Ordering;

/// A single polarity spike. `p` is always +1 or -1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub t: f64,
    pub x: u16,
    pub y: u16,
    pub p: i8,
}

impl Event {
    pub fn new(t: f64, x: u16, y: u16, p: i8) -> Self {
        Self { t, x, y, p }
    }

    /// Canonical order: time, then row, column, polarity.
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.t
            .total_cmp(&other.t)
            .then(self.y.cmp(&other.y))
            .then(self.x.cmp(&other.x))
            .then(self.p.cmp(&other.p))
    }
}

/// Events in canonical order over a `width x height` sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u16,
    height: u16,
}

impl EventStream {
    /// Validates every event and sorts into canonical order.
    pub fn new(mut events: Vec<Event>, width: u16, height: u16) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if !(e.t.is_finite() && e.t >= 0.0) {
                return Err(invalid(format!("event {i}: time {} is not a non-negative number", e.t)));
            }
            if e.x >= width || e.y >= height {
                return Err(invalid(format!(
                    "event {i}: ({}, {}) outside {width}x{height} sensor",
                    e.x, e.y
                )));
            }
            if e.p != 1 && e.p != -1 {
                return Err(invalid(format!("event {i}: polarity {} is not +1/-1", e.p)));
            }
        }
        events.sort_by(Event::canonical_cmp);
        Ok(Self { events, width, height })
    }

    pub fn empty(width: u16, height: u16) -> Self {
        Self {
            events: Vec::new(),
            width,
            height,
        }
    }

    /// Sub-range of an already canonical stream.
    pub(crate) fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            events: self.events[range].to_vec(),
            width: self.width,
            height: self.height,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn first_time(&self) -> Option<f64> {
        self.events.first().map(|e| e.t)
    }

    pub fn last_time(&self) -> Option<f64> {
        self.events.last().map(|e| e.t)
    }

    pub fn polarity_sum(&self) -> i64 {
        self.events.iter().map(|e| e.p as i64).sum()
    }

    /// Index of the first event with `t >= time`.
    pub(crate) fn lower_bound(&self, time: f64) -> usize {
        self.events.partition_point(|e| e.t < time)
    }

    /// Index of the first event with `t > time`.
    pub(crate) fn upper_bound(&self, time: f64) -> usize {
        self.events.partition_point(|e| e.t <= time)
    }
}
