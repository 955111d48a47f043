//! Detection and vectorized-map heads on top of the scene tokens.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geom::{MapCategory, Point, Pose2};
use crate::nn::layers::Mlp;
use crate::nn::{Graph, ParamStore, Var};
use crate::scene::AgentClass;

/// Per-slot outputs: `x, y, sin, cos`, then car, pedestrian and
/// background logits.
pub const DET_OUT: usize = 4 + AgentClass::COUNT + 1;
pub const DET_BACKGROUND: usize = AgentClass::COUNT;
pub const MAP_CLASSES: usize = 3;
pub const MAP_BACKGROUND: usize = MAP_CLASSES;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDetection {
    pub slot: usize,
    /// Box center and heading in the ego frame.
    pub pose: Pose2,
    /// `None` when the background class wins.
    pub class: Option<AgentClass>,
    /// Highest foreground probability.
    pub confidence: f64,
    /// Car, pedestrian and background logits.
    pub logits: Vec<f64>,
    /// Id of the ground-truth agent assigned by matching, if any.
    pub matched_gt: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapDecode {
    pub slot: usize,
    pub points: Vec<Point>,
    pub category: Option<MapCategory>,
    pub confidence: f64,
    /// Category logits followed by the background logit.
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub mlp: Mlp,
    pub position_scale: f64,
}

impl DetectionHead {
    pub fn new(cfg: &ModelConfig) -> Self {
        DetectionHead {
            mlp: Mlp::new("det.head", &[cfg.attention.model_dim, cfg.head_hidden, DET_OUT]),
            position_scale: cfg.position_scale,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.mlp.init(store, rng)
    }

    /// Raw head outputs `[slots × DET_OUT]`; positions in scale units.
    pub fn forward(&self, g: &mut Graph, agent_tokens: Var) -> Result<Var> {
        self.mlp.forward(g, agent_tokens)
    }

    pub fn decode(&self, raw: &[f64]) -> Result<Vec<AgentDetection>> {
        if raw.len() % DET_OUT != 0 {
            return Err(Error::shape(
                "det.head",
                format!("{} values is not a multiple of {DET_OUT}", raw.len()),
            ));
        }
        Ok(raw
            .chunks(DET_OUT)
            .enumerate()
            .map(|(slot, r)| {
                let probs = softmax(&r[4..]);
                let k = argmax(&probs);
                AgentDetection {
                    slot,
                    pose: Pose2::new(r[0] * self.position_scale, r[1] * self.position_scale, r[2].atan2(r[3])),
                    class: AgentClass::from_index(k),
                    confidence: probs[..DET_BACKGROUND].iter().cloned().fold(0.0, f64::max),
                    logits: r[4..].to_vec(),
                    matched_gt: None,
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct MapHead {
    pub mlp: Mlp,
    pub points: usize,
    pub position_scale: f64,
}

impl MapHead {
    pub fn new(cfg: &ModelConfig) -> Self {
        MapHead {
            mlp: Mlp::new(
                "map.head",
                &[
                    cfg.attention.model_dim,
                    cfg.map_head_hidden,
                    2 * cfg.map_points + MAP_CLASSES + 1,
                ],
            ),
            points: cfg.map_points,
            position_scale: cfg.position_scale,
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.points + MAP_CLASSES + 1
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.mlp.init(store, rng)
    }

    /// Raw outputs `[tokens × (2P + 4)]`: `P` points as `x, y` pairs in
    /// scale units, then category and background logits.
    pub fn forward(&self, g: &mut Graph, map_tokens: Var) -> Result<Var> {
        self.mlp.forward(g, map_tokens)
    }

    pub fn decode(&self, raw: &[f64]) -> Result<Vec<MapDecode>> {
        let w = self.out_dim();
        if raw.len() % w != 0 {
            return Err(Error::shape(
                "map.head",
                format!("{} values is not a multiple of {w}", raw.len()),
            ));
        }
        Ok(raw
            .chunks(w)
            .enumerate()
            .map(|(slot, r)| {
                let probs = softmax(&r[2 * self.points..]);
                let k = argmax(&probs);
                MapDecode {
                    slot,
                    points: r[..2 * self.points]
                        .chunks(2)
                        .map(|p| [p[0] * self.position_scale, p[1] * self.position_scale])
                        .collect(),
                    category: MapCategory::ALL.get(k).copied(),
                    confidence: probs[..MAP_BACKGROUND].iter().cloned().fold(0.0, f64::max),
                    logits: r[2 * self.points..].to_vec(),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_decodes_pose_and_class() {
        let head = DetectionHead::new(&ModelConfig::default());
        let raw = [1.0, -0.5, 1.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 9.0];
        let d = head.decode(&raw).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].pose.x, 10.0);
        assert_eq!(d[0].pose.y, -5.0);
        assert!((d[0].pose.heading - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert_eq!(d[0].class, Some(AgentClass::Car));
        assert!(d[0].confidence > 0.98);
        assert_eq!(d[1].class, None);
        assert!(head.decode(&raw[..5]).is_err());
    }

    #[test]
    fn map_decode_scales_points() {
        let cfg = ModelConfig {
            map_points: 2,
            ..Default::default()
        };
        let head = MapHead::new(&cfg);
        let raw = [0.1, 0.2, 0.3, 0.4, 0.0, 3.0, 0.0, 0.0];
        let m = head.decode(&raw).unwrap();
        assert_eq!(m[0].points, vec![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(m[0].category, Some(MapCategory::RoadBoundary));
    }
}
