use drivegen::geom::{boxes_overlap, Frame, MapCategory, Polyline, Pose2, Trajectory};
use drivegen::scene::raster::{bresenham, OCCUPANCY_CHANNEL};
use drivegen::scene::*;
use drivegen::Error;

fn cfg() -> SceneGenConfig {
    SceneGenConfig::default()
}

#[test]
fn same_seed_gives_identical_bytes() {
    let a = generate_scene(&cfg(), 17).unwrap();
    let b = generate_scene(&cfg(), 17).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = generate_scene(&cfg(), 18).unwrap();
    assert_ne!(a, c);
}

#[test]
fn generated_scenes_respect_invariants() {
    let c = cfg();
    let half = 0.5 * c.map_extent;
    for seed in 0..64 {
        let s = generate_scene(&c, seed).unwrap();
        assert!((c.agents_min..=c.agents_max).contains(&s.agents.len()));
        let ego = ego_boxes(&s.ego).unwrap();
        let agent_boxes: Vec<_> = s.agents.iter().map(|a| a.boxes().unwrap()).collect();
        for k in 1..=6i32 {
            let at = |bs: &Vec<(i32, drivegen::geom::OrientedBox)>| bs.iter().find(|(f, _)| *f == k).unwrap().1;
            let e = at(&ego);
            for (i, ai) in agent_boxes.iter().enumerate() {
                assert!(!boxes_overlap(&e, &at(ai)), "seed {seed}: ego hits agent {i} at {k}");
                for aj in &agent_boxes[i + 1..] {
                    assert!(!boxes_overlap(&at(ai), &at(aj)), "seed {seed}: agents collide at {k}");
                }
            }
        }
        for a in &s.agents {
            assert_eq!(a.past.len(), 6);
            assert_eq!((a.past.first_index(), a.past.last_index()), (-5, 0));
            assert_eq!((a.future.first_index(), a.future.last_index()), (1, 6));
            for w in a.full().waypoints() {
                assert!(w.x.abs() <= half && w.y.abs() <= half);
            }
            if a.class == AgentClass::Pedestrian {
                assert_ne!(a.motion_kind, MotionKind::LaneChange);
                let w = a.future.waypoints();
                let step = (w[1].x - w[0].x).hypot(w[1].y - w[0].y);
                assert!(step <= 2.0 * 0.5 + 1e-9);
            }
        }
        assert_eq!(s.ego.future.len(), 6);
    }
}

#[test]
fn straight_agents_have_zero_second_differences() {
    let mut seen = 0;
    for seed in 0..40 {
        let s = generate_scene(&cfg(), seed).unwrap();
        for a in s.agents.iter().filter(|a| a.motion_kind == MotionKind::Straight) {
            let w = a.full();
            let w = w.waypoints();
            for t in w.windows(3) {
                let ddx = t[2].x - 2.0 * t[1].x + t[0].x;
                let ddy = t[2].y - 2.0 * t[1].y + t[0].y;
                assert!(ddx.abs() < 1e-9 && ddy.abs() < 1e-9);
            }
            seen += 1;
        }
    }
    assert!(seen > 20);
}

#[test]
fn motion_mixture_is_roughly_respected() {
    let mut counts = [0usize; 3];
    for seed in 0..300 {
        let s = generate_scene(&cfg(), seed).unwrap();
        let k = match s.ego.motion_kind {
            MotionKind::Straight => 0,
            MotionKind::Arc => 1,
            MotionKind::LaneChange => 2,
        };
        counts[k] += 1;
    }
    assert!(counts[0] > 140 && counts[1] > 60 && counts[2] > 10, "{counts:?}");
}

#[test]
fn unsatisfiable_config_fails_generation() {
    let c = SceneGenConfig {
        agents_min: 12,
        agents_max: 12,
        map_extent: 10.0,
        ..cfg()
    };
    assert!(matches!(generate_scene(&c, 1), Err(Error::GenerationFailed(_))));
}

#[test]
fn invalid_config_names_the_field() {
    let c = SceneGenConfig {
        agents_min: 5,
        agents_max: 3,
        ..cfg()
    };
    match generate_scene(&c, 0) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "scene.agents_min"),
        other => panic!("{other:?}"),
    }
}

fn bare_scene() -> Scene {
    let mut s = generate_scene(&cfg(), 3).unwrap();
    s.map.clear();
    s.agents.clear();
    s
}

#[test]
fn empty_scene_rasterizes_to_zeros() {
    let g = rasterize_bev(&bare_scene(), &GridConfig::default()).unwrap();
    assert_eq!(g.features.len(), 32 * 32 * 11);
    assert!(g.features.iter().all(|&v| v == 0.0));
}

/// Cells of the ideal line rounded along its major axis.
fn rounded_trace(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let n = dx.abs().max(dy.abs());
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            (
                (a.0 as f64 + t * dx as f64).round() as i64,
                (a.1 as f64 + t * dy as f64).round() as i64,
            )
        })
        .collect()
}

#[test]
fn divider_trace_matches_line_oracle() {
    let mut s = bare_scene();
    let pose = s.ego_pose();
    let local = [[-20.3, -7.1], [22.9, 9.4]];
    let global = drivegen::geom::se2_apply(&pose, &local);
    s.map.push(Polyline::new(global, MapCategory::LaneDivider).unwrap());
    let cfg = GridConfig::default();
    let g = rasterize_bev(&s, &cfg).unwrap();
    let (r0, c0) = cfg.cell_of(local[0]).unwrap();
    let (r1, c1) = cfg.cell_of(local[1]).unwrap();
    assert_eq!(((c1 - c0) % 2), 1, "odd major span rules out rounding ties");
    let mut want = rounded_trace((c0 as i64, r0 as i64), (c1 as i64, r1 as i64));
    want.sort();
    let mut got = Vec::new();
    for r in 0..32 {
        for c in 0..32 {
            if g.get(r, c, 0) != 0.0 {
                got.push((c as i64, r as i64));
            }
            assert_eq!(g.get(r, c, 1), 0.0);
            assert_eq!(g.get(r, c, 2), 0.0);
        }
    }
    got.sort();
    assert_eq!(got, want);
    let mut bres = bresenham((c0 as i64, r0 as i64), (c1 as i64, r1 as i64));
    bres.sort();
    assert_eq!(bres, want);
}

#[test]
fn agent_at_ego_position_occupies_center_cell() {
    let base = generate_scene(&cfg(), 5).unwrap();
    let mut s = bare_scene();
    let mut agent = base.agents[0].clone();
    let shift = |t: &Trajectory, dx: f64, dy: f64| {
        let pts: Vec<_> = t.points().iter().map(|p| [p[0] + dx, p[1] + dy]).collect();
        Trajectory::from_points(&pts, t.first_index(), Frame::SceneGlobal).unwrap()
    };
    let e = s.ego.pose();
    let dx = e.x - agent.bbox.center.x;
    let dy = e.y - agent.bbox.center.y;
    agent.past = shift(&agent.past, dx, dy);
    agent.future = shift(&agent.future, dx, dy);
    agent.bbox.center = Pose2::new(e.x, e.y, agent.bbox.center.heading);
    s.agents.push(agent);
    let g = rasterize_bev(&s, &GridConfig::default()).unwrap();
    assert_eq!(g.get(16, 16, OCCUPANCY_CHANNEL + 5), 1.0);
}

#[test]
fn occupancy_sums_count_in_extent_agents() {
    let cfg = GridConfig::default();
    for seed in 0..30 {
        let s = generate_scene(&SceneGenConfig::default(), seed).unwrap();
        let g = rasterize_bev(&s, &cfg).unwrap();
        let to_ego = s.to_ego();
        for slot in 0..6 {
            let expected = s
                .agents
                .iter()
                .filter(|a| cfg.cell_of(to_ego.apply(a.past.waypoints()[slot].position())).is_some())
                .count();
            assert_eq!(g.channel_sum(OCCUPANCY_CHANNEL + slot), expected as f64);
        }
        assert!(g.features.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenes.jsonl");
    let scenes = generate_dataset(&cfg(), 100, 10).unwrap();
    dataset_write(&scenes, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().all(|l| l.starts_with("{\"v\":1,")));
    assert_eq!(dataset_read(&path).unwrap(), scenes);
}

#[test]
fn empty_file_is_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    assert!(dataset_read(&path).unwrap().is_empty());
}

#[test]
fn truncated_last_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.jsonl");
    let scenes = generate_dataset(&cfg(), 0, 3).unwrap();
    dataset_write(&scenes, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let cut = &text[..text.len() - 40];
    std::fs::write(&path, cut).unwrap();
    match dataset_read(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        dataset_read(&dir.path().join("nope.jsonl")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn wrong_schema_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v2.jsonl");
    let scenes = generate_dataset(&cfg(), 0, 1).unwrap();
    dataset_write(&scenes, &path).unwrap();
    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replacen("\"v\":1", "\"v\":2", 1);
    std::fs::write(&path, text).unwrap();
    assert!(matches!(dataset_read(&path), Err(Error::Parse { line: 1, .. })));
}
