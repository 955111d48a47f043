use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geom::{footprint_at, Frame, OrientedBox, Point, Polyline, Pose2, Trajectory};

pub const PAST_FRAMES: usize = 5;
pub const FUTURE_FRAMES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Car,
    Pedestrian,
}

impl AgentClass {
    pub const ALL: [AgentClass; 2] = [AgentClass::Car, AgentClass::Pedestrian];
    pub const COUNT: usize = 2;

    pub fn index(self) -> usize {
        match self {
            AgentClass::Car => 0,
            AgentClass::Pedestrian => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Straight,
    Arc,
    LaneChange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub id: u32,
    pub class: AgentClass,
    #[serde(rename = "box")]
    pub bbox: OrientedBox,
    pub past: Trajectory,
    pub future: Trajectory,
    pub motion_kind: MotionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoRecord {
    pub past: Trajectory,
    pub future: Trajectory,
    #[serde(rename = "box")]
    pub bbox: OrientedBox,
    pub motion_kind: MotionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub map: Vec<Polyline>,
    pub agents: Vec<AgentRecord>,
    pub ego: EgoRecord,
    pub rng_seed: u64,
}

/// Past and future joined into one trajectory over frames `-5..=6`.
pub fn full_trajectory(past: &Trajectory, future: &Trajectory) -> Trajectory {
    let mut pts = past.points();
    pts.extend(future.points());
    Trajectory::from_points(&pts, past.first_index(), past.frame()).expect("past and future are contiguous")
}

impl AgentRecord {
    pub fn full(&self) -> Trajectory {
        full_trajectory(&self.past, &self.future)
    }

    /// Ground-truth footprint at frame `k`, oriented along the full track.
    pub fn box_at(&self, k: i32) -> Result<OrientedBox> {
        footprint_at(&self.full(), k, self.bbox.length, self.bbox.width)
    }

    /// All footprints from the first past frame to the last future frame.
    pub fn boxes(&self) -> Result<Vec<(i32, OrientedBox)>> {
        let full = self.full();
        (full.first_index()..=full.last_index())
            .map(|k| Ok((k, footprint_at(&full, k, self.bbox.length, self.bbox.width)?)))
            .collect()
    }

    pub fn pose(&self) -> Pose2 {
        self.bbox.center
    }
}

impl EgoRecord {
    pub fn full(&self) -> Trajectory {
        full_trajectory(&self.past, &self.future)
    }

    /// Pose at frame 0; defines the ego-centric frame.
    pub fn pose(&self) -> Pose2 {
        self.bbox.center
    }
}

impl Scene {
    pub fn ego_pose(&self) -> Pose2 {
        self.ego.pose()
    }

    /// Transform taking scene-global points into the ego frame.
    pub fn to_ego(&self) -> Pose2 {
        self.ego_pose().inverse()
    }

    pub fn map_in_ego(&self) -> Vec<Polyline> {
        let t = self.to_ego();
        self.map.iter().map(|p| p.transformed(&t)).collect()
    }

    pub fn ego_future_local(&self) -> Trajectory {
        self.ego.future.transformed(&self.to_ego(), Frame::EgoCentric)
    }

    pub fn ego_past_local(&self) -> Trajectory {
        self.ego.past.transformed(&self.to_ego(), Frame::EgoCentric)
    }
}

/// Circles covering an ego footprint: centers on the long axis at `0` and
/// `±(L − W)/2`, radius `W/2`.
pub fn ego_circles(pose: &Pose2, length: f64, width: f64) -> [(Point, f64); 3] {
    let off = 0.5 * (length - width).max(0.0);
    let r = 0.5 * width;
    [
        (pose.apply([0.0, 0.0]), r),
        (pose.apply([off, 0.0]), r),
        (pose.apply([-off, 0.0]), r),
    ]
}

/// Smallest gap between the circle cover of an ego footprint and a box;
/// negative when they intersect.
pub fn ego_clearance(ego: &OrientedBox, other: &OrientedBox) -> f64 {
    ego_circles(&ego.center, ego.length, ego.width)
        .iter()
        .map(|&(c, r)| other.distance_to_point(c) - r)
        .fold(f64::INFINITY, f64::min)
}
