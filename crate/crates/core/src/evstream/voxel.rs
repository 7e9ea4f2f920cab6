use super::{Event, EventStream};
use crate::error::{invalid, Result};
use e2v_tensor::Tensor;

/// `bins` temporal slices of accumulated polarity. Stored bin-major,
/// `data[(b * height + y) * width + x]`, which is the network's channel layout.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub bins: usize,
    pub width: usize,
    pub height: usize,
    pub t_start: f64,
    pub t_end: f64,
    data: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(bins: usize, width: usize, height: usize) -> Self {
        Self {
            bins,
            width,
            height,
            t_start: 0.0,
            t_end: 0.0,
            data: vec![0.0; bins * width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize, bin: usize) -> f64 {
        self.data[(bin * self.height + y) * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `(1, bins, height, width)` network input.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(
            &[1, self.bins, self.height, self.width],
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }
}

/// Linear two-bin temporal split over the group's own time span.
pub fn build_voxel_grid(group: &EventStream, bins: usize) -> Result<VoxelGrid> {
    if bins == 0 {
        return Err(invalid("voxel grid needs at least one bin"));
    }
    let mut grid = VoxelGrid::zeros(bins, group.width() as usize, group.height() as usize);
    let (Some(t0), Some(t1)) = (group.first_time(), group.last_time()) else {
        return Ok(grid);
    };
    grid.t_start = t0;
    grid.t_end = t1;
    accumulate(&mut grid, group.events(), t0, t1);
    Ok(grid)
}

fn accumulate(grid: &mut VoxelGrid, events: &[Event], t0: f64, t1: f64) {
    let span = t1 - t0;
    let top = (grid.bins - 1) as f64;
    let plane = grid.width * grid.height;
    for e in events {
        let tau = if span > 0.0 { (top * (e.t - t0) / span).clamp(0.0, top) } else { 0.0 };
        let lower = (tau.floor() as usize).min(grid.bins - 1);
        let frac = tau - lower as f64;
        let pix = e.y as usize * grid.width + e.x as usize;
        let p = e.p as f64;
        grid.data[lower * plane + pix] += p * (1.0 - frac);
        if frac > 0.0 {
            grid.data[(lower + 1) * plane + pix] += p * frac;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(events: Vec<Event>) -> VoxelGrid {
        build_voxel_grid(&EventStream::new(events, 3, 2).unwrap(), 5).unwrap()
    }

    #[test]
    fn empty_group_is_zero() {
        let g = build_voxel_grid(&EventStream::empty(3, 2), 5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert_eq!(g.data().len(), 30);
    }

    #[test]
    fn integer_tau_lands_in_one_bin() {
        // span [0, 4] over 5 bins: t = 2 -> tau = 2
        let g = grid(vec![Event::new(0.0, 0, 0, 1), Event::new(2.0, 2, 1, 1), Event::new(4.0, 0, 0, 1)]);
        assert_eq!(g.at(2, 1, 2), 1.0);
        let others: f64 = (0..5).filter(|&b| b != 2).map(|b| g.at(2, 1, b).abs()).sum();
        assert_eq!(others, 0.0);
    }

    #[test]
    fn fractional_tau_splits_linearly() {
        // tau = 1.25 for t = 1.25 over [0, 4]
        let g = grid(vec![Event::new(0.0, 0, 0, 1), Event::new(1.25, 1, 0, -1), Event::new(4.0, 0, 0, 1)]);
        assert_eq!(g.at(1, 0, 1), -0.75);
        assert_eq!(g.at(1, 0, 2), -0.25);
    }

    #[test]
    fn single_timestamp_maps_to_first_bin() {
        let g = grid(vec![Event::new(0.3, 1, 1, 1), Event::new(0.3, 2, 0, -1)]);
        assert_eq!(g.at(1, 1, 0), 1.0);
        assert_eq!(g.at(2, 0, 0), -1.0);
        assert_eq!(g.sum(), 0.0);
    }

    #[test]
    fn tensor_layout_is_bin_major() {
        let g = grid(vec![Event::new(0.0, 2, 1, 1), Event::new(4.0, 0, 0, -1)]);
        let t = g.to_tensor();
        assert_eq!(t.shape(), &[1, 5, 2, 3]);
        assert_eq!(t.at4(0, 0, 1, 2), 1.0);
        assert_eq!(t.at4(0, 4, 0, 0), -1.0);
    }
}
