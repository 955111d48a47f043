//! Plain 2D geometry: poses, oriented boxes, polylines, trajectories and
//! the separating-axis overlap test used by the collision metric.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds between consecutive frames (2 Hz keyframes).
pub const FRAME_DT: f64 = 0.5;

pub type Point = [f64; 2];

/// Wraps an angle into (-π, π].
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose2 {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn identity() -> Self {
        Pose2::new(0.0, 0.0, 0.0)
    }

    pub fn position(&self) -> Point {
        [self.x, self.y]
    }

    /// Rotate by the heading, then translate.
    pub fn apply(&self, p: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        [c * p[0] - s * p[1] + self.x, s * p[0] + c * p[1] + self.y]
    }

    /// Rotate a direction vector without translating it.
    pub fn rotate(&self, v: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.heading.sin_cos();
        Pose2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.heading)
    }

    /// `self ∘ other`: applying the result equals applying `other` then `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let p = self.apply(other.position());
        Pose2::new(p[0], p[1], self.heading + other.heading)
    }
}

pub fn se2_apply(pose: &Pose2, pts: &[Point]) -> Vec<Point> {
    pts.iter().map(|&p| pose.apply(p)).collect()
}

pub fn se2_invert(pose: &Pose2) -> Pose2 {
    pose.inverse()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct OrientedBox {
    pub center: Pose2,
    pub length: f64,
    pub width: f64,
}

#[derive(Deserialize)]
struct RawBox {
    center: Pose2,
    length: f64,
    width: f64,
}

impl TryFrom<RawBox> for OrientedBox {
    type Error = Error;

    fn try_from(raw: RawBox) -> Result<Self> {
        OrientedBox::new(raw.center, raw.length, raw.width)
    }
}

impl OrientedBox {
    pub fn new(center: Pose2, length: f64, width: f64) -> Result<Self> {
        if !(length > 0.0 && width > 0.0 && length.is_finite() && width.is_finite()) {
            return Err(Error::Input(format!(
                "box dimensions must be positive, got {length} x {width}"
            )));
        }
        Ok(OrientedBox { center, length, width })
    }

    /// Unit vectors along the length and width directions.
    pub fn axes(&self) -> [Point; 2] {
        let (s, c) = self.center.heading.sin_cos();
        [[c, s], [-s, c]]
    }

    pub fn corners(&self) -> [Point; 4] {
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        [
            self.center.apply([hl, hw]),
            self.center.apply([-hl, hw]),
            self.center.apply([-hl, -hw]),
            self.center.apply([hl, -hw]),
        ]
    }

    /// Coordinates of `p` in the box frame.
    pub fn to_local(&self, p: Point) -> Point {
        let [ax, ay] = self.axes();
        let d = [p[0] - self.center.x, p[1] - self.center.y];
        [d[0] * ax[0] + d[1] * ax[1], d[0] * ay[0] + d[1] * ay[1]]
    }

    /// Boundary points count as inside.
    pub fn contains(&self, p: Point) -> bool {
        let [u, v] = self.to_local(p);
        u.abs() <= 0.5 * self.length && v.abs() <= 0.5 * self.width
    }

    /// Euclidean distance from `p` to the box; zero inside.
    pub fn distance_to_point(&self, p: Point) -> f64 {
        let [u, v] = self.to_local(p);
        let du = (u.abs() - 0.5 * self.length).max(0.0);
        let dv = (v.abs() - 0.5 * self.width).max(0.0);
        du.hypot(dv)
    }

    fn project(&self, axis: Point) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in self.corners() {
            let d = c[0] * axis[0] + c[1] * axis[1];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        (lo, hi)
    }
}

/// Separating-axis test over the four face normals. Touching boxes overlap.
pub fn boxes_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    let axes = a.axes().into_iter().chain(b.axes());
    for axis in axes {
        let (a_lo, a_hi) = a.project(axis);
        let (b_lo, b_hi) = b.project(axis);
        if a_hi < b_lo || b_hi < a_lo {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    SceneGlobal,
    EgoCentric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub t_index: i32,
}

impl Waypoint {
    pub fn new(x: f64, y: f64, t_index: i32) -> Self {
        Waypoint { x, y, t_index }
    }

    pub fn position(&self) -> Point {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrajectory")]
pub struct Trajectory {
    waypoints: Vec<Waypoint>,
    frame: Frame,
}

#[derive(Deserialize)]
struct RawTrajectory {
    waypoints: Vec<Waypoint>,
    frame: Frame,
}

impl TryFrom<RawTrajectory> for Trajectory {
    type Error = Error;

    fn try_from(raw: RawTrajectory) -> Result<Self> {
        Trajectory::new(raw.waypoints, raw.frame)
    }
}

impl Trajectory {
    pub fn new(waypoints: Vec<Waypoint>, frame: Frame) -> Result<Self> {
        if waypoints.is_empty() {
            return Err(Error::Input("trajectory needs at least one waypoint".into()));
        }
        for pair in waypoints.windows(2) {
            if pair[1].t_index != pair[0].t_index + 1 {
                return Err(Error::Input(format!(
                    "trajectory frame indices must increase by 1 ({} then {})",
                    pair[0].t_index, pair[1].t_index
                )));
            }
        }
        if let Some(w) = waypoints.iter().find(|w| !(w.x.is_finite() && w.y.is_finite())) {
            return Err(Error::Numeric(format!("waypoint at frame {}", w.t_index)));
        }
        Ok(Trajectory { waypoints, frame })
    }

    /// Builds a trajectory whose first waypoint carries `first_index`.
    pub fn from_points(points: &[Point], first_index: i32, frame: Frame) -> Result<Self> {
        let wps = points
            .iter()
            .enumerate()
            .map(|(i, p)| Waypoint::new(p[0], p[1], first_index + i as i32))
            .collect();
        Trajectory::new(wps, frame)
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn first_index(&self) -> i32 {
        self.waypoints[0].t_index
    }

    pub fn last_index(&self) -> i32 {
        self.waypoints[self.waypoints.len() - 1].t_index
    }

    pub fn points(&self) -> Vec<Point> {
        self.waypoints.iter().map(Waypoint::position).collect()
    }

    pub fn at(&self, t_index: i32) -> Option<&Waypoint> {
        let i = t_index - self.first_index();
        if i < 0 {
            return None;
        }
        self.waypoints.get(i as usize)
    }

    /// Applies a rigid transform and relabels the frame.
    pub fn transformed(&self, pose: &Pose2, frame: Frame) -> Trajectory {
        let waypoints = self
            .waypoints
            .iter()
            .map(|w| {
                let p = pose.apply(w.position());
                Waypoint::new(p[0], p[1], w.t_index)
            })
            .collect();
        Trajectory { waypoints, frame }
    }
}

/// Heading of the segment leaving frame `k`; the last frame reuses the final
/// segment and zero-length segments fall back to the previous heading.
pub fn heading_at(traj: &Trajectory, k: i32) -> Result<f64> {
    let n = traj.len();
    if n < 2 {
        return Err(Error::DegenerateTrajectory(
            "heading needs at least two waypoints".into(),
        ));
    }
    let idx = k - traj.first_index();
    if idx < 0 || idx as usize >= n {
        return Err(Error::Input(format!(
            "frame {k} outside trajectory [{}, {}]",
            traj.first_index(),
            traj.last_index()
        )));
    }
    let seg = (idx as usize).min(n - 2);
    let wps = traj.waypoints();
    let seg_heading = |i: usize| {
        let dx = wps[i + 1].x - wps[i].x;
        let dy = wps[i + 1].y - wps[i].y;
        (dx != 0.0 || dy != 0.0).then(|| dy.atan2(dx))
    };
    if let Some(h) = (0..=seg).rev().find_map(seg_heading) {
        return Ok(h);
    }
    (seg + 1..n - 1)
        .find_map(seg_heading)
        .ok_or_else(|| Error::DegenerateTrajectory("all segments have zero length".into()))
}

/// Footprint of an instance at frame `k`, oriented by [`heading_at`].
pub fn footprint_at(traj: &Trajectory, k: i32, length: f64, width: f64) -> Result<OrientedBox> {
    let w = traj
        .at(k)
        .ok_or_else(|| Error::Input(format!("frame {k} outside trajectory")))?;
    let heading = heading_at(traj, k)?;
    OrientedBox::new(Pose2::new(w.x, w.y, heading), length, width)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapCategory {
    LaneDivider,
    RoadBoundary,
    PedestrianCrossing,
}

impl MapCategory {
    pub const ALL: [MapCategory; 3] = [
        MapCategory::LaneDivider,
        MapCategory::RoadBoundary,
        MapCategory::PedestrianCrossing,
    ];

    pub fn index(self) -> usize {
        match self {
            MapCategory::LaneDivider => 0,
            MapCategory::RoadBoundary => 1,
            MapCategory::PedestrianCrossing => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPolyline")]
pub struct Polyline {
    points: Vec<Point>,
    category: MapCategory,
}

#[derive(Deserialize)]
struct RawPolyline {
    points: Vec<Point>,
    category: MapCategory,
}

impl TryFrom<RawPolyline> for Polyline {
    type Error = Error;

    fn try_from(raw: RawPolyline) -> Result<Self> {
        Polyline::new(raw.points, raw.category)
    }
}

/// Closest point on a polyline, with the segment it lies on.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub segment: usize,
    pub point: Point,
    pub distance: f64,
}

impl Polyline {
    pub fn new(points: Vec<Point>, category: MapCategory) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Input("polyline needs at least two points".into()));
        }
        if points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::Numeric("polyline point".into()));
        }
        if points.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("polyline has repeated consecutive points".into()));
        }
        Ok(Polyline { points, category })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn category(&self) -> MapCategory {
        self.category
    }

    pub fn transformed(&self, pose: &Pose2) -> Polyline {
        Polyline {
            points: se2_apply(pose, &self.points),
            category: self.category,
        }
    }

    pub fn length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
            .sum()
    }

    /// `n` points spaced evenly by arc length, endpoints included.
    pub fn resample(&self, n: usize) -> Vec<Point> {
        assert!(n >= 2, "resample needs at least two samples");
        let seg_len: Vec<f64> = self
            .points
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
            .collect();
        let total: f64 = seg_len.iter().sum();
        let mut out = Vec::with_capacity(n);
        let mut seg = 0;
        let mut acc = 0.0;
        for i in 0..n {
            let target = total * i as f64 / (n - 1) as f64;
            while seg + 1 < seg_len.len() && acc + seg_len[seg] < target {
                acc += seg_len[seg];
                seg += 1;
            }
            let t = ((target - acc) / seg_len[seg]).clamp(0.0, 1.0);
            let a = self.points[seg];
            let b = self.points[seg + 1];
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
        out
    }

    pub fn project(&self, p: Point) -> Projection {
        let mut best = Projection {
            segment: 0,
            point: self.points[0],
            distance: f64::INFINITY,
        };
        for (i, w) in self.points.windows(2).enumerate() {
            let q = closest_on_segment(w[0], w[1], p);
            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
            if d < best.distance {
                best = Projection {
                    segment: i,
                    point: q,
                    distance: d,
                };
            }
        }
        best
    }

    /// Unit tangent of segment `i`.
    pub fn tangent(&self, i: usize) -> Point {
        let a = self.points[i];
        let b = self.points[i + 1];
        let d = [b[0] - a[0], b[1] - a[1]];
        let n = d[0].hypot(d[1]);
        [d[0] / n, d[1] / n]
    }

    /// Clips to the axis-aligned square `[-half, half]²`. A polyline leaving
    /// and re-entering the square yields several pieces.
    pub fn clip_to_square(&self, half: f64) -> Vec<Polyline> {
        let mut pieces = Vec::new();
        let mut current: Vec<Point> = Vec::new();
        for w in self.points.windows(2) {
            match clip_segment(w[0], w[1], half) {
                Some((a, b)) => {
                    if current.last().map_or(true, |last| *last != a) {
                        if current.len() >= 2 {
                            pieces.push(std::mem::take(&mut current));
                        }
                        current.clear();
                        current.push(a);
                    }
                    if a != b {
                        current.push(b);
                    }
                }
                None => {
                    if current.len() >= 2 {
                        pieces.push(std::mem::take(&mut current));
                    }
                    current.clear();
                }
            }
        }
        if current.len() >= 2 {
            pieces.push(current);
        }
        pieces
            .into_iter()
            .filter_map(|pts| Polyline::new(pts, self.category).ok())
            .collect()
    }
}

pub fn closest_on_segment(a: Point, b: Point, p: Point) -> Point {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    if len2 == 0.0 {
        return a;
    }
    let t = (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0);
    [a[0] + t * d[0], a[1] + t * d[1]]
}

/// Liang–Barsky clipping against `[-half, half]²`.
fn clip_segment(a: Point, b: Point, half: f64) -> Option<(Point, Point)> {
    let d = [b[0] - a[0], b[1] - a[1]];
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    let checks = [
        (-d[0], a[0] + half),
        (d[0], half - a[0]),
        (-d[1], a[1] + half),
        (d[1], half - a[1]),
    ];
    for (p, q) in checks {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
            if t0 > t1 {
                return None;
            }
        }
    }
    let at = |t: f64| match t {
        t if t == 0.0 => a,
        t if t == 1.0 => b,
        t => [a[0] + t * d[0], a[1] + t * d[1]],
    };
    Some((at(t0), at(t1)))
}
