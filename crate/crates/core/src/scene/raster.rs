//! Ego-centric bird's-eye rasterization.
//!
//! Channel layout (11 channels):
//!
//! | channel | content                                              |
//! |---------|------------------------------------------------------|
//! | 0       | lane dividers, 1 on the line trace                    |
//! | 1       | road boundaries                                      |
//! | 2       | pedestrian crossings                                 |
//! | 3..=8   | agent occupancy at frames −5..=0, +1 per agent center |
//! | 9, 10   | sin and cos of agent heading at frame 0              |
//!
//! Cell `(row, col)` covers `x ∈ [col·c − e/2, (col+1)·c − e/2)` and the same
//! for `y` with `row`, where `c` is the cell size and `e` the extent; `x`
//! points along the ego heading.

use serde::{Deserialize, Serialize};

use super::types::{Scene, PAST_FRAMES};
use crate::error::{Error, Result};
use crate::geom::{Point, Pose2};

pub const NUM_CHANNELS: usize = 11;
pub const OCCUPANCY_CHANNEL: usize = 3;
pub const HEADING_SIN_CHANNEL: usize = 9;
pub const HEADING_COS_CHANNEL: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub height: usize,
    pub width: usize,
    /// Side length of the square area covered by the grid, meters.
    pub extent: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            height: 32,
            width: 32,
            extent: 60.0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::config("model.grid", "height and width must be at least 2"));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(Error::config("model.grid.extent", "must be positive"));
        }
        Ok(())
    }

    /// Cell containing an ego-frame point, if inside the grid.
    pub fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        let half = 0.5 * self.extent;
        let col = ((p[0] + half) / (self.extent / self.width as f64)).floor();
        let row = ((p[1] + half) / (self.extent / self.height as f64)).floor();
        (col >= 0.0 && row >= 0.0 && (col as usize) < self.width && (row as usize) < self.height)
            .then(|| (row as usize, col as usize))
    }

    fn cell_clamped(&self, p: Point) -> (i64, i64) {
        let half = 0.5 * self.extent;
        let col = ((p[0] + half) / (self.extent / self.width as f64)).floor() as i64;
        let row = ((p[1] + half) / (self.extent / self.height as f64)).floor() as i64;
        (
            row.clamp(0, self.height as i64 - 1),
            col.clamp(0, self.width as i64 - 1),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub extent: f64,
    /// Ego pose the grid is centered on, in scene coordinates.
    pub origin: Pose2,
    /// Row-major `[height][width][channels]`.
    pub features: Vec<f64>,
}

impl BevGrid {
    pub fn zeros(cfg: &GridConfig, origin: Pose2) -> Self {
        BevGrid {
            height: cfg.height,
            width: cfg.width,
            channels: NUM_CHANNELS,
            extent: cfg.extent,
            origin,
            features: vec![0.0; cfg.height * cfg.width * NUM_CHANNELS],
        }
    }

    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.features[self.index(row, col, ch)]
    }

    pub fn channel_sum(&self, ch: usize) -> f64 {
        self.features.iter().skip(ch).step_by(self.channels).sum()
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }
}

/// Integer line trace between two cells, endpoints included.
pub fn bresenham(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        out.push((x0, y0));
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    out
}

pub fn rasterize_bev(scene: &Scene, cfg: &GridConfig) -> Result<BevGrid> {
    cfg.validate()?;
    let origin = scene.ego_pose();
    let to_ego = origin.inverse();
    let mut grid = BevGrid::zeros(cfg, origin);
    let half = 0.5 * cfg.extent;

    for line in scene.map_in_ego() {
        let ch = line.category().index();
        for piece in line.clip_to_square(half) {
            for seg in piece.points().windows(2) {
                let (r0, c0) = cfg.cell_clamped(seg[0]);
                let (r1, c1) = cfg.cell_clamped(seg[1]);
                for (c, r) in bresenham((c0, r0), (c1, r1)) {
                    let i = grid.index(r as usize, c as usize, ch);
                    grid.features[i] = 1.0;
                }
            }
        }
    }

    for agent in &scene.agents {
        for (slot, w) in agent.past.waypoints().iter().enumerate() {
            let p = to_ego.apply(w.position());
            if let Some((r, c)) = cfg.cell_of(p) {
                let i = grid.index(r, c, OCCUPANCY_CHANNEL + slot.min(PAST_FRAMES));
                grid.features[i] += 1.0;
            }
        }
        let p = to_ego.apply(agent.bbox.center.position());
        if let Some((r, c)) = cfg.cell_of(p) {
            let rel = agent.bbox.center.heading - origin.heading;
            let (s, co) = rel.sin_cos();
            let i = grid.index(r, c, HEADING_SIN_CHANNEL);
            grid.features[i] = s;
            grid.features[i + 1] = co;
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bresenham_covers_octants() {
        assert_eq!(bresenham((0, 0), (3, 0)), vec![(0, 0), (1, 0), (2, 0), (3, 0)]);
        assert_eq!(bresenham((0, 0), (0, -2)), vec![(0, 0), (0, -1), (0, -2)]);
        assert_eq!(bresenham((0, 0), (2, 2)), vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(bresenham((5, 5), (5, 5)), vec![(5, 5)]);
    }

    #[test]
    fn ego_origin_maps_to_center_cell() {
        let cfg = GridConfig::default();
        assert_eq!(cfg.cell_of([0.0, 0.0]), Some((16, 16)));
        assert_eq!(cfg.cell_of([-30.0, -30.0]), Some((0, 0)));
        assert_eq!(cfg.cell_of([30.0, 0.0]), None);
    }
}
