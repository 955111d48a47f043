//! Procedural scenes: a four-lane road laid around the ego path, cars and
//! pedestrians moving straight, on arcs or through smooth lane changes.

use std::f64::consts::PI;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::types::*;
use crate::error::{Error, Result};
use crate::geom::{
    boxes_overlap, footprint_at, heading_at, normalize_angle, Frame, MapCategory, OrientedBox, Point, Polyline, Pose2,
    Trajectory, FRAME_DT,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGenConfig {
    pub agents_min: usize,
    pub agents_max: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub pedestrian_speed_max: f64,
    pub max_curvature: f64,
    pub ego_max_curvature: f64,
    pub max_lateral_accel: f64,
    /// Side of the square map area centered on the scene origin, meters.
    pub map_extent: f64,
    /// Weights of straight, arc and lane-change motion.
    pub motion_mix: [f64; 3],
    pub pedestrian_fraction: f64,
    pub lane_width: f64,
    pub crosswalk_probability: f64,
    pub lane_change_duration: f64,
    /// Cars spawn within this many meters of the ego along the road.
    pub spawn_range: f64,
    pub ego_length: f64,
    pub ego_width: f64,
    /// Minimum gap between the ego circle cover and any agent box.
    pub ego_clearance: f64,
    pub max_retries: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            agents_min: 2,
            agents_max: 12,
            speed_min: 2.0,
            speed_max: 15.0,
            pedestrian_speed_max: 2.0,
            max_curvature: 0.1,
            ego_max_curvature: 0.05,
            max_lateral_accel: 4.0,
            map_extent: 200.0,
            motion_mix: [0.6, 0.3, 0.1],
            pedestrian_fraction: 0.2,
            lane_width: 3.5,
            crosswalk_probability: 0.3,
            lane_change_duration: 3.0,
            spawn_range: 25.0,
            ego_length: 4.0,
            ego_width: 1.8,
            ego_clearance: 0.5,
            max_retries: 100,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, f: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(f, format!("must be positive, got {v}")))
            }
        };
        if self.agents_min > self.agents_max {
            return Err(Error::config(
                "scene.agents_min",
                format!("{} exceeds agents_max {}", self.agents_min, self.agents_max),
            ));
        }
        pos(self.speed_min, "scene.speed_min")?;
        if self.speed_max < self.speed_min {
            return Err(Error::config("scene.speed_max", "below speed_min"));
        }
        pos(self.pedestrian_speed_max, "scene.pedestrian_speed_max")?;
        if !(self.max_curvature >= 0.0 && self.max_curvature <= 0.1) {
            return Err(Error::config("scene.max_curvature", "must lie in [0, 0.1]"));
        }
        if !(self.ego_max_curvature >= 0.0 && self.ego_max_curvature <= self.max_curvature) {
            return Err(Error::config(
                "scene.ego_max_curvature",
                "must lie in [0, max_curvature]",
            ));
        }
        pos(self.max_lateral_accel, "scene.max_lateral_accel")?;
        pos(self.map_extent, "scene.map_extent")?;
        pos(self.lane_width, "scene.lane_width")?;
        pos(self.lane_change_duration, "scene.lane_change_duration")?;
        pos(self.ego_length, "scene.ego_length")?;
        pos(self.ego_width, "scene.ego_width")?;
        if self.motion_mix.iter().any(|w| !(*w >= 0.0)) || self.motion_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config(
                "scene.motion_mix",
                "weights must be non-negative with a positive sum",
            ));
        }
        if !(0.0..=1.0).contains(&self.pedestrian_fraction) {
            return Err(Error::config("scene.pedestrian_fraction", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.crosswalk_probability) {
            return Err(Error::config("scene.crosswalk_probability", "must lie in [0, 1]"));
        }
        if self.spawn_range < 0.0 || self.ego_clearance < 0.0 {
            return Err(Error::config("scene.spawn_range", "must be non-negative"));
        }
        Ok(())
    }
}

/// Constant-curvature path parameterized by arc length.
#[derive(Debug, Clone, Copy)]
struct Arc {
    origin: Pose2,
    kappa: f64,
}

impl Arc {
    fn pose(&self, s: f64) -> (Point, f64) {
        let th0 = self.origin.heading;
        let k = self.kappa;
        if k.abs() < 1e-12 {
            let (sn, cs) = th0.sin_cos();
            return ([self.origin.x + s * cs, self.origin.y + s * sn], th0);
        }
        let th = th0 + k * s;
        (
            [
                self.origin.x + (th.sin() - th0.sin()) / k,
                self.origin.y + (th0.cos() - th.cos()) / k,
            ],
            th,
        )
    }
}

/// Arc on `[s_lo, s_hi]`, continued by straight tangents on both sides.
#[derive(Debug, Clone, Copy)]
struct RoadPath {
    arc: Arc,
    s_lo: f64,
    s_hi: f64,
}

impl RoadPath {
    fn pose(&self, s: f64) -> (Point, f64) {
        let anchor = s.clamp(self.s_lo, self.s_hi);
        let (p, th) = self.arc.pose(anchor);
        let ds = s - anchor;
        ([p[0] + ds * th.cos(), p[1] + ds * th.sin()], th)
    }

    /// Point at arc length `s` and lateral offset `l` (positive to the left).
    fn offset(&self, s: f64, l: f64) -> (Point, f64) {
        let (p, th) = self.pose(s);
        ([p[0] - l * th.sin(), p[1] + l * th.cos()], th)
    }
}

/// Quintic smoothstep `10τ³ − 15τ⁴ + 6τ⁵` with `τ` clamped to `[0, 1]`.
pub fn quintic_blend(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

/// A closed-form motion over time.
#[derive(Debug, Clone, Copy)]
enum Motion {
    Arc {
        arc: Arc,
        speed: f64,
    },
    LaneChange {
        base: Arc,
        speed: f64,
        shift: f64,
        start: f64,
        duration: f64,
    },
    Road {
        road: RoadPath,
        speed: f64,
        lateral: f64,
        shift: f64,
        start: f64,
        duration: f64,
    },
}

impl Motion {
    fn position(&self, t: f64) -> Point {
        match *self {
            Motion::Arc { arc, speed } => arc.pose(speed * t).0,
            Motion::LaneChange {
                base,
                speed,
                shift,
                start,
                duration,
            } => {
                let (p, th) = base.pose(speed * t);
                let l = shift * quintic_blend((t - start) / duration);
                [p[0] - l * th.sin(), p[1] + l * th.cos()]
            }
            Motion::Road {
                road,
                speed,
                lateral,
                shift,
                start,
                duration,
            } => {
                let l = lateral + shift * quintic_blend((t - start) / duration);
                road.offset(speed * t, l).0
            }
        }
    }

    fn trajectories(&self) -> Result<(Trajectory, Trajectory)> {
        let pts = |range: std::ops::RangeInclusive<i32>| -> Vec<Point> {
            range.map(|k| self.position(k as f64 * FRAME_DT)).collect()
        };
        let past = Trajectory::from_points(
            &pts(-(PAST_FRAMES as i32)..=0),
            -(PAST_FRAMES as i32),
            Frame::SceneGlobal,
        )?;
        let future = Trajectory::from_points(&pts(1..=FUTURE_FRAMES as i32), 1, Frame::SceneGlobal)?;
        Ok((past, future))
    }
}

fn sample_kind(cfg: &SceneGenConfig, rng: &mut ChaCha8Rng, allow_lane_change: bool) -> MotionKind {
    let mut w = cfg.motion_mix;
    if !allow_lane_change {
        w[2] = 0.0;
    }
    if w.iter().sum::<f64>() <= 0.0 {
        return MotionKind::Straight;
    }
    match WeightedIndex::new(w).expect("validated weights").sample(rng) {
        0 => MotionKind::Straight,
        1 => MotionKind::Arc,
        _ => MotionKind::LaneChange,
    }
}

fn sample_curvature(rng: &mut ChaCha8Rng, cap: f64, a_lat: f64, speed: f64) -> f64 {
    let bound = cap.min(a_lat / (speed * speed));
    let k = rng.gen_range(0.2 * bound..=bound.max(1e-9));
    if rng.gen_bool(0.5) {
        k
    } else {
        -k
    }
}

fn in_extent(cfg: &SceneGenConfig, t: &Trajectory) -> bool {
    let half = 0.5 * cfg.map_extent;
    t.waypoints().iter().all(|w| w.x.abs() <= half && w.y.abs() <= half)
}

struct Placed {
    boxes: Vec<(i32, OrientedBox)>,
}

struct EgoDraft {
    record: EgoRecord,
    boxes: Vec<(i32, OrientedBox)>,
    road: RoadPath,
}

/// Ego footprints: past frames along the joined track, future frames along
/// the future alone, exactly as a plan is scored.
pub fn ego_boxes(ego: &EgoRecord) -> Result<Vec<(i32, OrientedBox)>> {
    let (l, w) = (ego.bbox.length, ego.bbox.width);
    let full = ego.full();
    let mut out = Vec::with_capacity(PAST_FRAMES + 1 + FUTURE_FRAMES);
    for k in full.first_index()..=0 {
        out.push((k, footprint_at(&full, k, l, w)?));
    }
    for k in 1..=ego.future.last_index() {
        out.push((k, footprint_at(&ego.future, k, l, w)?));
    }
    Ok(out)
}

fn lane_centers(cfg: &SceneGenConfig) -> [f64; 4] {
    let w = cfg.lane_width;
    [-1.5 * w, -0.5 * w, 0.5 * w, 1.5 * w]
}

fn make_ego(cfg: &SceneGenConfig, rng: &mut ChaCha8Rng) -> Result<EgoDraft> {
    let kind = sample_kind(cfg, rng, true);
    let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
    let origin = Pose2::new(
        rng.gen_range(-10.0..=10.0),
        rng.gen_range(-10.0..=10.0),
        rng.gen_range(-PI..PI),
    );
    let lanes = lane_centers(cfg);
    let lane = rng.gen_range(0..lanes.len());
    let lateral = lanes[lane];
    let kappa = match kind {
        MotionKind::Arc => sample_curvature(rng, cfg.ego_max_curvature, cfg.max_lateral_accel, speed),
        _ => 0.0,
    };
    let t_lo = -(PAST_FRAMES as f64) * FRAME_DT;
    let t_hi = FUTURE_FRAMES as f64 * FRAME_DT;
    // The road reference runs along the ego lane center; shift it so that
    // arc length 0 sits at the ego origin and offsets are road-relative.
    let centerline = Arc { origin, kappa };
    let (p0, th0) = centerline.pose(0.0);
    let (sn, cs) = th0.sin_cos();
    let road_origin = Pose2::new(p0[0] + lateral * sn, p0[1] - lateral * cs, th0);
    let road_kappa = if kappa == 0.0 {
        0.0
    } else {
        1.0 / (1.0 / kappa + lateral)
    };
    let scale = road_scale(road_kappa, lateral);
    let road = RoadPath {
        arc: Arc {
            origin: road_origin,
            kappa: road_kappa,
        },
        s_lo: speed * t_lo * scale - 1.0,
        s_hi: speed * t_hi * scale + 1.0,
    };
    let (shift, start) = if kind == MotionKind::LaneChange {
        let mut shift = if rng.gen_bool(0.5) {
            cfg.lane_width
        } else {
            -cfg.lane_width
        };
        if lane as i32 + shift.signum() as i32 >= lanes.len() as i32 || lane as i32 + (shift.signum() as i32) < 0 {
            shift = -shift;
        }
        (shift, rng.gen_range(-1.5..=2.5))
    } else {
        (0.0, 0.0)
    };
    let motion = Motion::Road {
        road,
        speed: speed * scale,
        lateral,
        shift,
        start,
        duration: cfg.lane_change_duration,
    };
    let (past, future) = motion.trajectories()?;
    let full = full_trajectory(&past, &future);
    let heading = heading_at(&full, 0)?;
    let w0 = past.at(0).unwrap();
    let bbox = OrientedBox::new(Pose2::new(w0.x, w0.y, heading), cfg.ego_length, cfg.ego_width)?;
    let record = EgoRecord {
        past,
        future,
        bbox,
        motion_kind: kind,
    };
    if !in_extent(cfg, &record.full()) {
        return Err(Error::GenerationFailed("ego trajectory leaves the map extent".into()));
    }
    let boxes = ego_boxes(&record)?;
    Ok(EgoDraft { record, boxes, road })
}

/// Ratio between arc length along a road of curvature `road_kappa` and
/// along its offset curve at `lateral`, so motion on the offset curve keeps
/// its sampled speed.
fn road_scale(road_kappa: f64, lateral: f64) -> f64 {
    if road_kappa == 0.0 {
        1.0
    } else {
        let r = 1.0 / road_kappa;
        r / (r - lateral)
    }
}

fn road_map(cfg: &SceneGenConfig, road: &RoadPath, rng: &mut ChaCha8Rng) -> Result<Vec<Polyline>> {
    let w = cfg.lane_width;
    let (s_from, s_to) = (-70.0, 90.0);
    let n = ((s_to - s_from) / 2.0) as usize;
    let line = |l: f64, reverse: bool| -> Result<Vec<Point>> {
        let mut pts: Vec<Point> = (0..=n)
            .map(|i| road.offset(s_from + (s_to - s_from) * i as f64 / n as f64, l).0)
            .collect();
        if reverse {
            pts.reverse();
        }
        Ok(pts)
    };
    let mut raw: Vec<(Vec<Point>, MapCategory)> = vec![
        (line(-2.0 * w, false)?, MapCategory::RoadBoundary),
        (line(2.0 * w, true)?, MapCategory::RoadBoundary),
    ];
    for l in [-w, 0.0, w] {
        raw.push((line(l, false)?, MapCategory::LaneDivider));
    }
    if rng.gen_bool(cfg.crosswalk_probability) {
        let s = rng.gen_range(10.0..=40.0);
        let a = road.offset(s, -2.0 * w).0;
        let b = road.offset(s, 2.0 * w).0;
        raw.push((vec![a, b], MapCategory::PedestrianCrossing));
    }
    let half = 0.5 * cfg.map_extent;
    let mut map = Vec::new();
    for (pts, cat) in raw {
        map.extend(Polyline::new(pts, cat)?.clip_to_square(half));
    }
    Ok(map)
}

fn make_agent(cfg: &SceneGenConfig, rng: &mut ChaCha8Rng, road: &RoadPath, id: u32) -> Result<AgentRecord> {
    let is_ped = rng.gen_bool(cfg.pedestrian_fraction);
    let w = cfg.lane_width;
    let s0 = rng.gen_range(-cfg.spawn_range..=cfg.spawn_range);
    let (class, kind, speed, origin, length, width) = if is_ped {
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let l = side * (2.0 * w + rng.gen_range(0.5..=3.0));
        let (p, _) = road.offset(s0, l);
        let speed = rng.gen_range(0.3..=cfg.pedestrian_speed_max);
        let kind = sample_kind(cfg, rng, false);
        let heading = rng.gen_range(-PI..PI);
        (
            AgentClass::Pedestrian,
            kind,
            speed,
            Pose2::new(p[0], p[1], heading),
            0.8,
            0.8,
        )
    } else {
        let lanes = lane_centers(cfg);
        let lane = rng.gen_range(0..lanes.len());
        let (p, th) = road.offset(s0, lanes[lane]);
        let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
        let kind = sample_kind(cfg, rng, true);
        let length = rng.gen_range(3.8..=5.0);
        let width = rng.gen_range(1.7..=2.0);
        (
            AgentClass::Car,
            kind,
            speed,
            Pose2::new(p[0], p[1], normalize_angle(th)),
            length,
            width,
        )
    };
    let motion = match kind {
        MotionKind::Straight => Motion::Arc {
            arc: Arc { origin, kappa: 0.0 },
            speed,
        },
        MotionKind::Arc => Motion::Arc {
            arc: Arc {
                origin,
                kappa: sample_curvature(rng, cfg.max_curvature, cfg.max_lateral_accel, speed),
            },
            speed,
        },
        MotionKind::LaneChange => Motion::LaneChange {
            base: Arc { origin, kappa: 0.0 },
            speed,
            shift: if rng.gen_bool(0.5) { w } else { -w },
            start: rng.gen_range(-1.5..=2.5),
            duration: cfg.lane_change_duration,
        },
    };
    let (past, future) = motion.trajectories()?;
    let full = full_trajectory(&past, &future);
    let heading = heading_at(&full, 0)?;
    let w0 = past.at(0).unwrap();
    Ok(AgentRecord {
        id,
        class,
        bbox: OrientedBox::new(Pose2::new(w0.x, w0.y, heading), length, width)?,
        past,
        future,
        motion_kind: kind,
    })
}

fn conflicts(cfg: &SceneGenConfig, cand: &[(i32, OrientedBox)], ego: &[(i32, OrientedBox)], others: &[Placed]) -> bool {
    for ((k, a), (k2, e)) in cand.iter().zip(ego) {
        debug_assert_eq!(k, k2);
        if boxes_overlap(a, e) || (*k >= 1 && ego_clearance(e, a) < cfg.ego_clearance) {
            return true;
        }
    }
    others
        .iter()
        .any(|o| cand.iter().zip(&o.boxes).any(|((_, a), (_, b))| boxes_overlap(a, b)))
}

/// Deterministic scene for `(cfg, seed)`.
pub fn generate_scene(cfg: &SceneGenConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ego = None;
    for _ in 0..cfg.max_retries.max(1) {
        match make_ego(cfg, &mut rng) {
            Ok(e) => {
                ego = Some(e);
                break;
            }
            Err(Error::GenerationFailed(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let ego = ego.ok_or_else(|| {
        Error::GenerationFailed(format!(
            "no ego trajectory fits a {} m map after {} tries",
            cfg.map_extent, cfg.max_retries
        ))
    })?;
    let map = road_map(cfg, &ego.road, &mut rng)?;

    let target = rng.gen_range(cfg.agents_min..=cfg.agents_max);
    let mut agents: Vec<AgentRecord> = Vec::with_capacity(target);
    let mut placed: Vec<Placed> = Vec::with_capacity(target);
    for slot in 0..target {
        for _ in 0..cfg.max_retries {
            let agent = make_agent(cfg, &mut rng, &ego.road, slot as u32)?;
            if !in_extent(cfg, &agent.full()) {
                continue;
            }
            let boxes = agent.boxes()?;
            if conflicts(cfg, &boxes, &ego.boxes, &placed) {
                continue;
            }
            placed.push(Placed { boxes });
            agents.push(agent);
            break;
        }
    }
    if agents.len() < cfg.agents_min {
        return Err(Error::GenerationFailed(format!(
            "placed {} of at least {} agents within the retry budget",
            agents.len(),
            cfg.agents_min
        )));
    }
    for (i, a) in agents.iter_mut().enumerate() {
        a.id = i as u32;
    }
    Ok(Scene {
        id: seed,
        map,
        agents,
        ego: ego.record,
        rng_seed: seed,
    })
}

/// Scenes for seeds `first..first + n`, skipping seeds whose generation
/// fails so that exactly `n` scenes come back.
pub fn generate_dataset(cfg: &SceneGenConfig, first: u64, n: usize) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(n);
    let mut seed = first;
    let mut failures = 0usize;
    while out.len() < n {
        match generate_scene(cfg, seed) {
            Ok(s) => out.push(s),
            Err(Error::GenerationFailed(msg)) => {
                failures += 1;
                if failures > 10 * n.max(10) {
                    return Err(Error::GenerationFailed(msg));
                }
            }
            Err(e) => return Err(e),
        }
        seed += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blend_endpoints_and_smoothness() {
        assert_eq!(quintic_blend(0.0), 0.0);
        assert_eq!(quintic_blend(1.0), 1.0);
        assert!((quintic_blend(0.5) - 0.5).abs() < 1e-15);
        assert_eq!(quintic_blend(-2.0), 0.0);
        assert_eq!(quintic_blend(3.0), 1.0);
    }

    #[test]
    fn straight_motion_spacing() {
        let m = Motion::Arc {
            arc: Arc {
                origin: Pose2::new(3.0, -2.0, 0.7),
                kappa: 0.0,
            },
            speed: 4.0,
        };
        let (_, fut) = m.trajectories().unwrap();
        for w in fut.waypoints().windows(2) {
            let d = (w[1].x - w[0].x).hypot(w[1].y - w[0].y);
            assert!((d - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn arc_heading_change_matches_closed_form() {
        let m = Motion::Arc {
            arc: Arc {
                origin: Pose2::new(0.0, 0.0, 0.3),
                kappa: 0.05,
            },
            speed: 6.0,
        };
        let (_, fut) = m.trajectories().unwrap();
        for k in 1..5 {
            let dh = heading_at(&fut, k + 1).unwrap() - heading_at(&fut, k).unwrap();
            assert!((dh - 0.15).abs() < 1e-6, "{dh}");
        }
        // Cross-check the closed form against Euler integration of the arc.
        let steps = 200_000;
        let (mut x, mut y, mut th) = (0.0, 0.0, 0.3f64);
        let ds = 6.0 * 3.0 / steps as f64;
        for _ in 0..steps {
            x += ds * (th + 0.5 * 0.05 * ds).cos();
            y += ds * (th + 0.5 * 0.05 * ds).sin();
            th += 0.05 * ds;
        }
        let end = fut.at(6).unwrap();
        assert!((end.x - x).abs() < 1e-6 && (end.y - y).abs() < 1e-6);
    }

    #[test]
    fn ego_lane_speed_is_preserved_on_curved_roads() {
        let road = RoadPath {
            arc: Arc {
                origin: Pose2::identity(),
                kappa: 0.04,
            },
            s_lo: -100.0,
            s_hi: 100.0,
        };
        let lateral = 5.25;
        let m = Motion::Road {
            road,
            speed: 8.0 * road_scale(0.04, lateral),
            lateral,
            shift: 0.0,
            start: 0.0,
            duration: 3.0,
        };
        let a = m.position(0.0);
        let b = m.position(0.01);
        let v = (b[0] - a[0]).hypot(b[1] - a[1]) / 0.01;
        assert!((v - 8.0).abs() < 1e-3, "{v}");
    }
}
