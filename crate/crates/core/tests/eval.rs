use drivegen::config::{ModelConfig, RunConfig, Variant};
use drivegen::eval::{collision_rate, epa, evaluate_ground_truth, l2_error, run_ablation, MetricMode, PlanMetrics};
use drivegen::geom::{Frame, Point, Pose2, Trajectory};
use drivegen::model::{AgentPrediction, GtAgent};
use drivegen::scene::{generate_dataset, generate_scene, AgentClass, Scene, SceneGenConfig};
use drivegen::tokenizer::AgentDetection;
use drivegen::train::prepare_samples;
use proptest::prelude::*;

const BOTH: [MetricMode; 2] = [MetricMode::AtTimestep, MetricMode::FrameAveraged];

fn ego_traj(pts: &[Point]) -> Trajectory {
    Trajectory::from_points(pts, 1, Frame::EgoCentric).unwrap()
}

fn scene_with_agents(first: u64) -> Scene {
    (first..)
        .map(|s| generate_scene(&SceneGenConfig::default(), s).unwrap())
        .find(|s| !s.agents.is_empty())
        .unwrap()
}

/// The ground-truth ego plan with frame `k` moved onto the first agent.
fn teleported(scene: &Scene, k: i32) -> Trajectory {
    let mut pts = scene.ego.future.points();
    let b = scene.agents[0].box_at(k).unwrap();
    pts[(k - 1) as usize] = b.center.position();
    Trajectory::from_points(&pts, 1, Frame::SceneGlobal).unwrap()
}

#[test]
fn l2_examples() {
    let gt: Vec<Point> = (1..=6).map(|k| [k as f64, 0.0]).collect();
    for mode in BOTH {
        assert_eq!(l2_error(&ego_traj(&gt), &ego_traj(&gt), mode).unwrap(), [0.0; 3]);
        let shifted: Vec<Point> = gt.iter().map(|p| [p[0] + 1.0, p[1]]).collect();
        let e = l2_error(&ego_traj(&shifted), &ego_traj(&gt), mode).unwrap();
        assert!(e.iter().all(|v| (v - 1.0).abs() < 1e-12), "{mode}: {e:?}");
    }
    let drift: Vec<Point> = gt
        .iter()
        .enumerate()
        .map(|(i, p)| [p[0], 0.1 * (i + 1) as f64])
        .collect();
    let at = l2_error(&ego_traj(&drift), &ego_traj(&gt), MetricMode::AtTimestep).unwrap();
    let avg = l2_error(&ego_traj(&drift), &ego_traj(&gt), MetricMode::FrameAveraged).unwrap();
    assert!((at[2] - 0.6).abs() < 1e-12);
    assert!((avg[2] - 0.35).abs() < 1e-12);
    assert!(avg.iter().zip(&at).all(|(a, b)| a <= b));
}

#[test]
fn teleporting_onto_an_agent_collides_from_that_frame_on() {
    let scene = scene_with_agents(0);
    let gt = scene.ego.future.clone();
    assert_eq!(collision_rate(&gt, &scene, MetricMode::AtTimestep).unwrap(), [0.0; 3]);
    assert_eq!(
        collision_rate(&teleported(&scene, 2), &scene, MetricMode::AtTimestep).unwrap(),
        [1.0; 3]
    );
}

#[test]
fn one_colliding_plan_in_four_scenes_is_a_quarter() {
    let scenes: Vec<Scene> = (0..4).map(|i| scene_with_agents(100 * i)).collect();
    let l2 = vec![[0.0; 3]; 4];
    let coll: Vec<[f64; 3]> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let plan = if i == 2 { teleported(s, 2) } else { s.ego.future.clone() };
            collision_rate(&plan, s, MetricMode::AtTimestep).unwrap()
        })
        .collect();
    let m = PlanMetrics::aggregate(&l2, &coll, MetricMode::AtTimestep).unwrap();
    assert_eq!(m.collision_at.to_array(), [0.25; 3]);
    assert_eq!(m.collision_avg, 0.25);
}

proptest! {
    #[test]
    fn collision_indicator_never_decreases_with_horizon(
        seed in 0u64..200,
        offsets in prop::collection::vec((-6.0f64..6.0, -4.0f64..4.0), 6),
    ) {
        let scene = generate_scene(&SceneGenConfig::default(), seed).unwrap();
        let pts: Vec<Point> = scene
            .ego
            .future
            .points()
            .iter()
            .zip(&offsets)
            .map(|(p, o)| [p[0] + o.0, p[1] + o.1])
            .collect();
        let plan = Trajectory::from_points(&pts, 1, Frame::SceneGlobal).unwrap();
        let c = collision_rate(&plan, &scene, MetricMode::AtTimestep).unwrap();
        prop_assert!(c[0] <= c[1] && c[1] <= c[2]);
        prop_assert!(c.iter().all(|v| *v == 0.0 || *v == 1.0));
    }
}

fn gt_agent(id: u32, x: f64, y: f64, class: AgentClass) -> GtAgent {
    let future_ego: Vec<Point> = (1..=6).map(|k| [x + k as f64, y]).collect();
    GtAgent {
        id,
        class,
        pose: Pose2::new(x, y, 0.0),
        future_local: (1..=6).map(|k| [k as f64, 0.0]).collect(),
        future_ego,
    }
}

fn prediction(x: f64, y: f64, end_error: f64, class: AgentClass, confidence: f64) -> AgentPrediction {
    let mut future: Vec<Point> = (1..=6).map(|k| [x + k as f64, y]).collect();
    future[5][1] += end_error;
    AgentPrediction {
        detection: AgentDetection {
            slot: 0,
            pose: Pose2::new(x, y, 0.0),
            class: Some(class),
            confidence,
            logits: vec![0.0; 3],
            matched_gt: None,
        },
        future,
        class_logits: vec![0.0; 2],
    }
}

#[test]
fn epa_examples() {
    let car = AgentClass::Car;
    let gts: Vec<GtAgent> = (0..3).map(|i| gt_agent(i, 10.0 * i as f64, 5.0, car)).collect();
    let perfect: Vec<AgentPrediction> = gts
        .iter()
        .map(|g| prediction(g.pose.x, g.pose.y, 0.0, car, 0.9))
        .collect();
    assert_eq!(epa(&perfect, &gts, car), Some(1.0));

    let mut mixed = vec![
        prediction(0.0, 5.0, 0.5, car, 0.9),
        prediction(10.0, 5.2, 0.0, car, 0.9),
        prediction(20.0, 5.0, 3.0, car, 0.9),
        prediction(-30.0, -5.0, 0.0, car, 0.9),
    ];
    assert_eq!(epa(&mixed, &gts, car), Some((2.0 - 0.5) / 3.0));
    mixed[3].detection.confidence = 0.2;
    assert_eq!(epa(&mixed, &gts, car), Some(2.0 / 3.0));

    assert_eq!(epa(&[], &gts, car), Some(0.0));
    assert_eq!(epa(&perfect, &gts, AgentClass::Pedestrian), None);
}

proptest! {
    #[test]
    fn epa_is_at_most_one(
        gt_pos in prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 1..5),
        pred in prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0, -3.0f64..3.0, 0.0f64..1.0), 0..6),
    ) {
        let car = AgentClass::Car;
        let gts: Vec<GtAgent> = gt_pos.iter().enumerate().map(|(i, p)| gt_agent(i as u32, p.0, p.1, car)).collect();
        let preds: Vec<AgentPrediction> = pred.iter().map(|p| prediction(p.0, p.1, p.2, car, p.3)).collect();
        let v = epa(&preds, &gts, car).unwrap();
        prop_assert!((-1.0..=1.0).contains(&v));
        prop_assert_eq!(epa(&preds, &gts, car).unwrap(), v);
    }
}

#[test]
fn ground_truth_plans_score_zero_on_256_scenes() {
    let cfg = SceneGenConfig::default();
    let scenes = generate_dataset(&cfg, 0, 256).unwrap();
    for s in &scenes {
        let gt = s.ego.future.clone();
        for mode in BOTH {
            assert_eq!(collision_rate(&gt, s, mode).unwrap(), [0.0; 3], "scene {}", s.id);
            assert_eq!(l2_error(&gt, &gt, mode).unwrap(), [0.0; 3]);
        }
    }
    let samples = prepare_samples(&scenes, &RunConfig::default()).unwrap();
    let report = evaluate_ground_truth(&samples, MetricMode::AtTimestep).unwrap();
    assert_eq!(report.plan.l2_avg, 0.0);
    assert_eq!(report.plan.collision_avg, 0.0);
}

fn tiny_run() -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig::toy(),
        ..Default::default()
    };
    cfg.train.epochs = 1;
    cfg
}

#[test]
fn ablation_rows_follow_variants_and_repeat_exactly() {
    let cfg = tiny_run();
    let train = generate_dataset(&cfg.scene, 0, 3).unwrap();
    let test = generate_dataset(&cfg.scene, 50, 2).unwrap();
    let mode = MetricMode::AtTimestep;
    let one = run_ablation(&cfg, &train, &test, &[Variant::Full], &[0], mode).unwrap();
    assert_eq!(one.rows.len(), 1);
    let a = run_ablation(&cfg, &train, &test, &[Variant::Full, Variant::Full], &[0], mode).unwrap();
    assert_eq!(a.rows.len(), 2);
    assert_eq!(a.rows[0], a.rows[1]);
    assert_eq!(a.rows[0], one.rows[0]);
    let csv = a.to_csv();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("variant,seed,mode,l2_1s"));
}
