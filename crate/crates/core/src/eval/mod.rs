//! Planning and prediction metrics, a constant-velocity baseline and the
//! ablation harness.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SampleMode, Variant};
use crate::error::{Error, Result};
use crate::geom::{boxes_overlap, footprint_at, Frame, OrientedBox, Point, Trajectory};
use crate::model::{AgentPrediction, GtAgent, Model, SceneSample};
use crate::nn::ParamStore;
use crate::scene::{AgentClass, Scene, FUTURE_FRAMES};
use crate::tokenizer::hungarian_match;
use crate::train::{prepare_samples, train, FitOptions};

/// Future frames reported as the 1 s, 2 s and 3 s horizons.
pub const HORIZON_FRAMES: [usize; 3] = [2, 4, 6];
/// Gate on frame-0 center distance and on final displacement, meters.
pub const EPA_GATE: f64 = 2.0;
/// Penalty per confident unmatched prediction.
pub const EPA_FP_WEIGHT: f64 = 0.5;
/// Confidence above which an unmatched prediction counts as a false positive.
pub const EPA_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    /// Value at the horizon frame (collisions: any frame up to it).
    #[default]
    AtTimestep,
    /// Mean over all frames up to the horizon.
    FrameAveraged,
}

impl MetricMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricMode::AtTimestep => "at_timestep",
            MetricMode::FrameAveraged => "frame_averaged",
        }
    }
}

impl std::fmt::Display for MetricMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MetricMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "at_timestep" => Ok(MetricMode::AtTimestep),
            "frame_averaged" => Ok(MetricMode::FrameAveraged),
            _ => Err(Error::Input(format!(
                "unknown metric mode `{s}` (expected at_timestep or frame_averaged)"
            ))),
        }
    }
}

/// Values at the 1 s, 2 s and 3 s horizons.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Horizons {
    #[serde(rename = "1s")]
    pub s1: f64,
    #[serde(rename = "2s")]
    pub s2: f64,
    #[serde(rename = "3s")]
    pub s3: f64,
}

impl Horizons {
    pub fn from_array(v: [f64; 3]) -> Self {
        Horizons {
            s1: v[0],
            s2: v[1],
            s3: v[2],
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.s1, self.s2, self.s3]
    }

    pub fn mean(self) -> f64 {
        (self.s1 + self.s2 + self.s3) / 3.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanMetrics {
    pub l2_at: Horizons,
    pub l2_avg: f64,
    pub collision_at: Horizons,
    pub collision_avg: f64,
    pub mode: MetricMode,
}

impl PlanMetrics {
    /// Dataset metrics from per-scene L2 and collision values.
    pub fn aggregate(l2: &[[f64; 3]], collision: &[[f64; 3]], mode: MetricMode) -> Result<Self> {
        if l2.is_empty() || l2.len() != collision.len() {
            return Err(Error::EmptyBatch("plan metrics".into()));
        }
        let mean = |rows: &[[f64; 3]]| {
            let mut acc = [0.0; 3];
            for r in rows {
                for (a, v) in acc.iter_mut().zip(r) {
                    *a += v;
                }
            }
            Horizons::from_array(acc.map(|a| a / rows.len() as f64))
        };
        let l2_at = mean(l2);
        let collision_at = mean(collision);
        Ok(PlanMetrics {
            l2_at,
            l2_avg: l2_at.mean(),
            collision_at,
            collision_avg: collision_at.mean(),
            mode,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PredMetrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epa_car: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epa_ped: Option<f64>,
}

fn check_horizon(t: &Trajectory, what: &str) -> Result<()> {
    if t.len() != FUTURE_FRAMES {
        return Err(Error::Input(format!(
            "{what} has {} waypoints, expected {FUTURE_FRAMES}",
            t.len()
        )));
    }
    Ok(())
}

fn reduce(per_frame: &[f64], mode: MetricMode, cumulative_max: bool) -> [f64; 3] {
    HORIZON_FRAMES.map(|k| {
        let head = &per_frame[..k];
        match mode {
            MetricMode::AtTimestep if cumulative_max => head.iter().cloned().fold(0.0, f64::max),
            MetricMode::AtTimestep => head[k - 1],
            MetricMode::FrameAveraged => head.iter().sum::<f64>() / k as f64,
        }
    })
}

/// Planning L2 error at the 1 s, 2 s and 3 s horizons.
pub fn l2_error(plan: &Trajectory, gt: &Trajectory, mode: MetricMode) -> Result<[f64; 3]> {
    check_horizon(plan, "plan")?;
    check_horizon(gt, "ground truth")?;
    let d: Vec<f64> = plan
        .waypoints()
        .iter()
        .zip(gt.waypoints())
        .map(|(a, b)| (a.x - b.x).hypot(a.y - b.y))
        .collect();
    Ok(reduce(&d, mode, false))
}

/// Per-frame collision indicators of an ego plan over frames 1..=6 against
/// agent footprints `boxes[frame][agent]`. `origin` is the ego position at
/// frame 0 in the plan's frame and anchors the first heading.
pub fn collision_flags(
    plan: &[Point],
    origin: Point,
    length: f64,
    width: f64,
    boxes: &[Vec<OrientedBox>],
) -> Result<Vec<f64>> {
    if plan.len() != FUTURE_FRAMES || boxes.len() != FUTURE_FRAMES {
        return Err(Error::Input(format!(
            "collision check needs {FUTURE_FRAMES} plan frames and box sets"
        )));
    }
    let mut pts = vec![origin];
    pts.extend_from_slice(plan);
    let track = Trajectory::from_points(&pts, 0, Frame::SceneGlobal)?;
    (1..=FUTURE_FRAMES)
        .map(|k| {
            let ego = footprint_at(&track, k as i32, length, width)?;
            let hit = boxes[k - 1].iter().any(|b| boxes_overlap(&ego, b));
            Ok(if hit { 1.0 } else { 0.0 })
        })
        .collect()
}

/// Collision indicators of a scene-frame plan at the three horizons.
pub fn collision_rate(plan: &Trajectory, scene: &Scene, mode: MetricMode) -> Result<[f64; 3]> {
    check_horizon(plan, "plan")?;
    let boxes = (1..=FUTURE_FRAMES as i32)
        .map(|k| scene.agents.iter().map(|a| a.box_at(k)).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;
    let flags = collision_flags(
        &plan.points(),
        scene.ego_pose().position(),
        scene.ego.bbox.length,
        scene.ego.bbox.width,
        &boxes,
    )?;
    Ok(reduce(&flags, mode, true))
}

/// End-to-end prediction accuracy for one class. Predictions and ground
/// truth are matched one-to-one on frame-0 center distance within the gate;
/// a match is a hit when the final displacement error is also within the
/// gate. Unmatched predictions above the confidence threshold are false
/// positives. `None` when the class has no ground-truth agents.
pub fn epa(predictions: &[AgentPrediction], gt: &[GtAgent], class: AgentClass) -> Option<f64> {
    let gts: Vec<&GtAgent> = gt.iter().filter(|a| a.class == class).collect();
    if gts.is_empty() {
        return None;
    }
    let preds: Vec<&AgentPrediction> = predictions
        .iter()
        .filter(|p| p.detection.class == Some(class))
        .collect();
    let center = |p: &AgentPrediction| p.detection.pose.position();
    let dist = |a: Point, b: Point| (a[0] - b[0]).hypot(a[1] - b[1]);
    let cost: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| dist(center(p), g.pose.position())).collect())
        .collect();
    let pairs = hungarian_match(&cost).unwrap_or_default();
    let mut matched = vec![false; preds.len()];
    let mut hits = 0usize;
    for (i, j) in pairs {
        if cost[i][j] >= EPA_GATE {
            continue;
        }
        matched[i] = true;
        let (pf, gf) = (preds[i].future.last(), gts[j].future_ego.last());
        if let (Some(&pf), Some(&gf)) = (pf, gf) {
            if dist(pf, gf) < EPA_GATE {
                hits += 1;
            }
        }
    }
    let fp = preds
        .iter()
        .zip(&matched)
        .filter(|(p, &m)| !m && p.detection.confidence > EPA_CONFIDENCE)
        .count();
    Some(((hits as f64 - EPA_FP_WEIGHT * fp as f64) / gts.len() as f64).max(-1.0))
}

/// Extrapolates the last observed step: frames 1..=f from past frames
/// ending at frame 0.
pub fn constant_velocity(past: &[Point], horizon: usize) -> Result<Vec<Point>> {
    let n = past.len();
    if n < 2 {
        return Err(Error::Input("constant velocity needs two past points".into()));
    }
    let (p0, p1) = (past[n - 2], past[n - 1]);
    let v = [p1[0] - p0[0], p1[1] - p0[1]];
    Ok((1..=horizon)
        .map(|k| [p1[0] + k as f64 * v[0], p1[1] + k as f64 * v[1]])
        .collect())
}

/// Metrics of one planner over a set of scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub plan: PlanMetrics,
    pub pred: PredMetrics,
    /// Plan metrics restricted to scenes whose ego follows an arc.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curved: Option<PlanMetrics>,
}

/// Per-scene plan metrics, restricted to curved scenes when asked.
#[derive(Debug, Clone, Default)]
struct PlanAcc {
    l2: Vec<[f64; 3]>,
    collision: Vec<[f64; 3]>,
}

impl PlanAcc {
    fn push(&mut self, plan: &[Point], sample: &SceneSample, mode: MetricMode) -> Result<()> {
        let to = |p: &[Point]| Trajectory::from_points(p, 1, Frame::EgoCentric);
        self.l2.push(l2_error(&to(plan)?, &to(&sample.ego_future)?, mode)?);
        let flags = collision_flags(
            plan,
            [0.0, 0.0],
            sample.ego_length,
            sample.ego_width,
            &sample.future_boxes,
        )?;
        self.collision.push(reduce(&flags, mode, true));
        Ok(())
    }

    fn metrics(&self, mode: MetricMode) -> Result<Option<PlanMetrics>> {
        if self.l2.is_empty() {
            return Ok(None);
        }
        PlanMetrics::aggregate(&self.l2, &self.collision, mode).map(Some)
    }
}

fn report_from(all: PlanAcc, curved: PlanAcc, pred: PredMetrics, n: usize, mode: MetricMode) -> Result<EvalReport> {
    Ok(EvalReport {
        scenes: n,
        plan: all
            .metrics(mode)?
            .ok_or_else(|| Error::EmptyBatch("evaluation set".into()))?,
        pred,
        curved: curved.metrics(mode)?,
    })
}

/// Scores any plan source over precomputed samples (plans in the ego frame).
pub fn evaluate_plans<F>(samples: &[SceneSample], mode: MetricMode, mut planner: F) -> Result<EvalReport>
where
    F: FnMut(&SceneSample) -> Result<Vec<Point>>,
{
    let (mut all, mut curved) = (PlanAcc::default(), PlanAcc::default());
    for s in samples {
        let plan = planner(s)?;
        all.push(&plan, s, mode)?;
        if s.is_curved() {
            curved.push(&plan, s, mode)?;
        }
    }
    report_from(all, curved, PredMetrics::default(), samples.len(), mode)
}

/// Ego-frame ground truth as a plan; scores zero error and no collisions.
pub fn evaluate_ground_truth(samples: &[SceneSample], mode: MetricMode) -> Result<EvalReport> {
    evaluate_plans(samples, mode, |s| Ok(s.ego_future.clone()))
}

pub fn evaluate_constant_velocity(samples: &[SceneSample], mode: MetricMode) -> Result<EvalReport> {
    evaluate_plans(samples, mode, |s| constant_velocity(&s.ego_past, FUTURE_FRAMES))
}

/// RNG for sampling-mode inference on one evaluation scene.
pub fn eval_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Plans and predictions of a trained model scored over `samples`.
pub fn evaluate_model(
    model: &Model,
    params: &ParamStore,
    samples: &[SceneSample],
    sample_mode: SampleMode,
    mode: MetricMode,
    seed: u64,
) -> Result<EvalReport> {
    let (mut all, mut curved) = (PlanAcc::default(), PlanAcc::default());
    let mut epa_sum = [0.0; 2];
    let mut epa_n = [0usize; 2];
    for (i, s) in samples.iter().enumerate() {
        let inf = model.infer(params, s, sample_mode, &mut eval_rng(seed, i))?;
        all.push(&inf.plan, s, mode)?;
        if s.is_curved() {
            curved.push(&inf.plan, s, mode)?;
        }
        for class in AgentClass::ALL {
            if let Some(v) = epa(&inf.agents, &s.agents, class) {
                epa_sum[class.index()] += v;
                epa_n[class.index()] += 1;
            }
        }
    }
    let avg = |k: usize| (epa_n[k] > 0).then(|| epa_sum[k] / epa_n[k] as f64);
    let pred = PredMetrics {
        epa_car: avg(AgentClass::Car.index()),
        epa_ped: avg(AgentClass::Pedestrian.index()),
    };
    report_from(all, curved, pred, samples.len(), mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: PlanMetrics,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const CSV_HEADER: &'static str =
        "variant,seed,mode,l2_1s,l2_2s,l2_3s,l2_avg,collision_1s,collision_2s,collision_3s,collision_avg";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let m = &r.metrics;
            let _ = write!(out, "{},{},{}", r.variant, r.seed, m.mode);
            for v in m.l2_at.to_array().iter().chain([&m.l2_avg]) {
                let _ = write!(out, ",{v}");
            }
            for v in m.collision_at.to_array().iter().chain([&m.collision_avg]) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Median of `l2_avg` over the rows of one variant.
    pub fn median_l2_avg(&self, variant: Variant) -> Option<f64> {
        let mut v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.metrics.l2_avg)
            .collect();
        median(&mut v)
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Trains every variant under every seed with otherwise identical
/// configuration and scores mean-mode plans on the test scenes.
pub fn run_ablation(
    base: &RunConfig,
    train_scenes: &[Scene],
    test_scenes: &[Scene],
    variants: &[Variant],
    seeds: &[u64],
    mode: MetricMode,
) -> Result<AblationTable> {
    let train_samples = prepare_samples(train_scenes, base)?;
    let test_samples = prepare_samples(test_scenes, base)?;
    let mut table = AblationTable::default();
    for &variant in variants {
        for &seed in seeds {
            let cfg = RunConfig {
                variant,
                seed,
                ..base.clone()
            };
            let (state, _) = train(&cfg, &train_samples, &FitOptions::default())?;
            let model = Model::new(&cfg.model, variant)?;
            let report = evaluate_model(&model, &state.params, &test_samples, SampleMode::Mean, mode, seed)?;
            table.rows.push(AblationRow {
                variant,
                seed,
                metrics: report.plan,
            });
        }
    }
    Ok(table)
}
