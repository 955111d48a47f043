//! The assembled planner: scene tokens, auxiliary heads and the latent
//! trajectory generator, plus per-scene precomputed inputs and targets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, SampleMode, Variant};
use crate::error::{Error, Result};
use crate::geom::{MapCategory, OrientedBox, Point, Polyline, Pose2};
use crate::nn::{Graph, ParamStore, Var};
use crate::prior::{sample_latent, trajectories_of, Prior};
use crate::scene::{rasterize_bev, AgentClass, MotionKind, Scene, FUTURE_FRAMES};
use crate::tokenizer::{AgentDetection, DetectionHead, GridMemory, MapDecode, MapHead, Tokenizer};

/// A ground-truth agent visible in the grid at frame 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GtAgent {
    pub id: u32,
    pub class: AgentClass,
    /// Frame-0 pose in the ego frame.
    pub pose: Pose2,
    /// Future positions in the agent's own frame-0 frame.
    pub future_local: Vec<Point>,
    /// Future positions in the ego frame.
    pub future_ego: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapTarget {
    pub category: MapCategory,
    /// Evenly resampled points in the ego frame.
    pub points: Vec<Point>,
}

/// Everything training and inference need from one scene, in the ego
/// frame, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub scene_id: u64,
    pub ego_motion: MotionKind,
    pub ego_length: f64,
    pub ego_width: f64,
    pub memory: GridMemory,
    /// Frames −5..=0.
    pub ego_past: Vec<Point>,
    /// Frames 1..=6.
    pub ego_future: Vec<Point>,
    pub agents: Vec<GtAgent>,
    /// Footprints of every agent at future frames 1..=6.
    pub future_boxes: Vec<Vec<OrientedBox>>,
    pub map_targets: Vec<MapTarget>,
    pub boundaries: Vec<Polyline>,
    pub dividers: Vec<Polyline>,
}

fn points_of(t: &crate::geom::Trajectory) -> Vec<Point> {
    t.points()
}

impl SceneSample {
    pub fn new(scene: &Scene, cfg: &ModelConfig) -> Result<Self> {
        let grid = rasterize_bev(scene, &cfg.grid)?;
        let memory = GridMemory::from_grid(&grid, cfg.map_memory_pool)?;
        let to_ego = scene.to_ego();
        let half = 0.5 * cfg.grid.extent;
        let inside = |p: Point| p[0].abs() < half && p[1].abs() < half;

        let mut agents = Vec::new();
        let mut future_boxes = vec![Vec::new(); FUTURE_FRAMES];
        for a in &scene.agents {
            for (k, slot) in future_boxes.iter_mut().enumerate() {
                let b = a.box_at(k as i32 + 1)?;
                slot.push(OrientedBox::new(to_ego.compose(&b.center), b.length, b.width)?);
            }
            let pose = to_ego.compose(&a.pose());
            if !inside(pose.position()) {
                continue;
            }
            let to_agent = a.pose().inverse();
            let fut = points_of(&a.future);
            agents.push(GtAgent {
                id: a.id,
                class: a.class,
                pose,
                future_local: fut.iter().map(|&p| to_agent.apply(p)).collect(),
                future_ego: fut.iter().map(|&p| to_ego.apply(p)).collect(),
            });
        }

        let map = scene.map_in_ego();
        let map_targets = map
            .iter()
            .flat_map(|l| l.clip_to_square(half))
            .filter(|piece| piece.length() > 1.0)
            .map(|piece| MapTarget {
                category: piece.category(),
                points: piece.resample(cfg.map_points),
            })
            .collect();
        let of = |cat| map.iter().filter(|l| l.category() == cat).cloned().collect::<Vec<_>>();

        Ok(SceneSample {
            scene_id: scene.id,
            ego_motion: scene.ego.motion_kind,
            ego_length: scene.ego.bbox.length,
            ego_width: scene.ego.bbox.width,
            memory,
            ego_past: points_of(&scene.ego_past_local()),
            ego_future: points_of(&scene.ego_future_local()),
            agents,
            future_boxes,
            map_targets,
            boundaries: of(MapCategory::RoadBoundary),
            dividers: of(MapCategory::LaneDivider),
        })
    }

    pub fn is_curved(&self) -> bool {
        self.ego_motion == MotionKind::Arc
    }
}

/// Token-level outputs of one scene pass.
#[derive(Debug, Clone, Copy)]
pub struct SceneTokens {
    pub map: Var,
    pub agents: Var,
    /// Row 0 is the ego; row `1 + s` belongs to agent slot `s`.
    pub instances: Var,
    pub det_raw: Var,
    pub map_raw: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPrediction {
    pub detection: AgentDetection,
    /// Future positions in the ego frame, frames 1..=6.
    pub future: Vec<Point>,
    pub class_logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    /// Planned ego positions in the ego frame, frames 1..=6.
    pub plan: Vec<Point>,
    pub agents: Vec<AgentPrediction>,
    pub map: Vec<MapDecode>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub tokenizer: Tokenizer,
    pub det_head: DetectionHead,
    pub map_head: MapHead,
    pub prior: Prior,
}

impl Model {
    pub fn new(cfg: &ModelConfig, variant: Variant) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            cfg: cfg.clone(),
            variant,
            tokenizer: Tokenizer::new(cfg),
            det_head: DetectionHead::new(cfg),
            map_head: MapHead::new(cfg),
            prior: Prior::new(cfg),
        })
    }

    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.tokenizer.init(&mut store, &mut rng)?;
        self.det_head.init(&mut store, &mut rng)?;
        self.map_head.init(&mut store, &mut rng)?;
        self.prior.init(&mut store, &mut rng, self.variant)?;
        Ok(store)
    }

    pub fn encode(&self, g: &mut Graph, sample: &SceneSample) -> Result<SceneTokens> {
        let t = &self.tokenizer;
        let map = t.encode_map_tokens(g, &sample.memory)?;
        let agents = t.encode_agent_tokens(g, &sample.memory)?;
        let ego = t.encode_ego(g, &sample.ego_past)?;
        let fused = t.fuse_instances(g, ego, agents, self.variant.masks_ego_to_agent())?;
        let instances = t.inject_map(g, fused, map)?;
        let det_raw = self.det_head.forward(g, agents)?;
        let map_raw = self.map_head.forward(g, map)?;
        Ok(SceneTokens {
            map,
            agents,
            instances,
            det_raw,
            map_raw,
        })
    }

    /// Trajectories `[B × 2f]` and class logits for the given instance
    /// rows, decoded from the instance distribution.
    pub fn generate_from_tokens(
        &self,
        g: &mut Graph,
        tokens: Var,
        mode: SampleMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var)> {
        if self.variant == Variant::Neither {
            return self.prior.decode_direct(g, tokens);
        }
        let q = self.prior.encode_instance(g, tokens)?;
        let z = sample_latent(g, &q, mode, rng);
        self.prior.generate(g, z, self.variant)
    }

    /// Plan, detections with predicted futures, and decoded map elements.
    pub fn infer(
        &self,
        params: &ParamStore,
        sample: &SceneSample,
        mode: SampleMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Inference> {
        let mut g = Graph::new(params);
        let tok = self.encode(&mut g, sample)?;
        let detections = self.det_head.decode(g.value(tok.det_raw))?;
        let map = self.map_head.decode(g.value(tok.map_raw))?;
        let kept: Vec<AgentDetection> = detections.into_iter().filter(|d| d.class.is_some()).collect();
        let rows: Vec<usize> = std::iter::once(0).chain(kept.iter().map(|d| 1 + d.slot)).collect();
        let sel = g.gather_rows(tok.instances, &rows);
        let (traj, cls) = self.generate_from_tokens(&mut g, sel, mode, rng)?;
        if g.value(traj).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("decoded trajectory".into()));
        }
        let trajs = trajectories_of(g.value(traj), self.cfg.horizon);
        let ncls = g.dims(cls).1;
        let cls_vals = g.value(cls).to_vec();
        let agents = kept
            .into_iter()
            .enumerate()
            .map(|(i, d)| AgentPrediction {
                future: trajs[i + 1].iter().map(|&p| d.pose.apply(p)).collect(),
                class_logits: cls_vals[(i + 1) * ncls..(i + 2) * ncls].to_vec(),
                detection: d,
            })
            .collect();
        Ok(Inference {
            plan: trajs[0].clone(),
            agents,
            map,
        })
    }
}
