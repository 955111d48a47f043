use drivegen::config::{LossWeights, ModelConfig, RunConfig, Variant};
use drivegen::error::Error;
use drivegen::geom::OrientedBox;
use drivegen::geom::Pose2;
use drivegen::model::{Model, SceneSample};
use drivegen::nn::attention::AttentionConfig;
use drivegen::nn::gradcheck::{grad_check_with, GradCheckOptions};
use drivegen::nn::optim::cosine_lr;
use drivegen::nn::{Graph, Tensor};
use drivegen::prior::LatentGaussian;
use drivegen::scene::{generate_dataset, generate_scene, SceneGenConfig};
use drivegen::train::losses::{boundary_penalty, collision_penalty, l1_trajectory, loss_plan, total_value};
use drivegen::train::{fit, prepare_samples, scene_loss, step_rng, train, FitOptions, TrainState};

fn two_agent_config() -> SceneGenConfig {
    SceneGenConfig {
        agents_min: 2,
        agents_max: 2,
        pedestrian_fraction: 0.5,
        ..Default::default()
    }
}

fn toy_run(variant: Variant) -> RunConfig {
    RunConfig {
        variant,
        model: ModelConfig::toy(),
        scene: two_agent_config(),
        ..Default::default()
    }
}

/// A small model that still trains meaningfully in seconds.
fn small_run(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..Default::default()
    };
    cfg.model.attention = AttentionConfig {
        model_dim: 16,
        num_heads: 2,
        num_layers: 1,
        num_sample_points: 2,
    };
    cfg.model.num_map_tokens = 6;
    cfg.model.num_agent_slots = 9;
    cfg.model.latent_dim = 16;
    cfg.model.gru_hidden = 16;
    cfg.model.gru_input = 4;
    cfg.model.ego_hidden = 16;
    cfg.model.encoder_hidden = 32;
    cfg.model.decoder_hidden = 16;
    cfg.model.head_hidden = 16;
    cfg.model.map_head_hidden = 32;
    cfg
}

fn samples(cfg: &RunConfig, first: u64, n: usize) -> Vec<SceneSample> {
    let scenes = generate_dataset(&cfg.scene, first, n).unwrap();
    prepare_samples(&scenes, cfg).unwrap()
}

#[test]
fn full_objective_passes_gradient_check_on_a_two_agent_scene() {
    for variant in Variant::ALL {
        let cfg = toy_run(variant);
        let scene = generate_scene(&cfg.scene, 21).unwrap();
        assert_eq!(scene.agents.len(), 2);
        let sample = SceneSample::new(&scene, &cfg.model).unwrap();
        let model = Model::new(&cfg.model, variant).unwrap();
        let params = model.init(5).unwrap();
        let report = grad_check_with(&params, GradCheckOptions::default(), |g| {
            let mut rng = step_rng(0, 0, 0);
            Ok(scene_loss(&model, g, &sample, &cfg, &mut rng)?.0)
        })
        .unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "{variant}: {} at {}[{}]: analytic {} numeric {}",
            report.max_rel_error,
            report.param,
            report.index,
            report.analytic,
            report.numeric
        );
    }
}

#[test]
fn total_decomposes_exactly_and_terms_are_non_negative() {
    for variant in Variant::ALL {
        let cfg = RunConfig {
            variant,
            weights: LossWeights {
                plan: 0.7,
                map: 1.3,
                det: 0.4,
                class: 2.0,
            },
            ..small_run(1)
        };
        let model = Model::new(&cfg.model, variant).unwrap();
        let params = model.init(2).unwrap();
        for (i, s) in samples(&cfg, 40, 6).iter().enumerate() {
            let mut g = Graph::new(&params);
            let (total, r, _) = scene_loss(&model, &mut g, s, &cfg, &mut step_rng(0, 0, i)).unwrap();
            let w = cfg.effective_weights();
            assert_eq!(
                r.j_total.to_bits(),
                total_value(r.j_prior, r.j_plan, r.j_map, r.j_det, &w).to_bits()
            );
            assert_eq!(g.scalar(total).to_bits(), r.j_total.to_bits());
            assert!(r.values().iter().all(|&v| v >= 0.0), "{variant}: {r:?}");
            if !variant.uses_prior() {
                assert_eq!(r.j_plan, 0.0);
            }
        }
    }
}

#[test]
fn total_of_unit_terms_is_four() {
    assert_eq!(total_value(1.0, 1.0, 1.0, 1.0, &LossWeights::default()), 4.0);
    let w = LossWeights {
        plan: 0.0,
        ..Default::default()
    };
    assert_eq!(total_value(1.0, 5.0, 1.0, 1.0, &w), 3.0);
}

#[test]
fn l1_uses_the_mean_over_coordinates() {
    let store = Default::default();
    let mut g = Graph::new(&store);
    let plan = g.constant(1, 4, vec![1.0, 0.0, 2.0, 0.0]);
    let l1 = l1_trajectory(&mut g, plan, &[[0.0, 0.0], [2.0, 0.0]]).unwrap();
    assert_eq!(g.scalar(l1), 0.25);
}

#[test]
fn ground_truth_plans_incur_no_ego_penalties() {
    let cfg = RunConfig::default();
    let store = Default::default();
    for s in samples(&cfg, 300, 40) {
        let mut g = Graph::new(&store);
        let flat: Vec<f64> = s.ego_future.iter().flat_map(|p| [p[0], p[1]]).collect();
        let plan = g.constant(1, 12, flat);
        let l1 = l1_trajectory(&mut g, plan, &s.ego_future).unwrap();
        let coll = collision_penalty(&mut g, plan, &s.future_boxes, s.ego_length, s.ego_width, 0.0);
        let bnd = boundary_penalty(&mut g, plan, &s.boundaries);
        assert_eq!(g.scalar(l1), 0.0);
        assert_eq!(g.scalar(coll), 0.0, "scene {}", s.scene_id);
        assert_eq!(g.scalar(bnd), 0.0, "scene {}", s.scene_id);
    }
}

#[test]
fn collision_hinge_activates_on_overlap() {
    let store = Default::default();
    let mut g = Graph::new(&store);
    let plan = g.input(1, 12, (1..=6).flat_map(|k| [k as f64, 0.0]).collect());
    let agent = OrientedBox::new(Pose2::new(2.0, 0.0, 0.3), 4.0, 1.8).unwrap();
    let mut boxes = vec![Vec::new(); 6];
    boxes[1].push(agent);
    let far = OrientedBox::new(Pose2::new(50.0, 50.0, 0.0), 4.0, 1.8).unwrap();
    boxes.iter_mut().for_each(|b| b.push(far));
    let coll = collision_penalty(&mut g, plan, &boxes, 4.0, 1.8, 0.5);
    assert!(g.scalar(coll) > 0.0);
    let grads = g.backward(coll);
    assert!(grads.get(plan).unwrap().iter().any(|v| *v != 0.0));
}

#[test]
fn loss_plan_is_zero_for_matching_distributions_and_checks_batches() {
    let store = Default::default();
    let mut g = Graph::new(&store);
    let mu = g.input(2, 3, vec![0.1, -0.4, 2.0, 0.0, 1.0, -1.0]);
    let ls = g.input(2, 3, vec![0.2, 0.0, -1.0, 0.5, 0.0, 0.3]);
    let q = LatentGaussian { mu, log_sigma: ls };
    let kl = loss_plan(&mut g, &q, &q).unwrap();
    assert_eq!(g.scalar(kl), 0.0);

    let mq = g.input(1, 1, vec![1.0]);
    let mp = g.input(1, 1, vec![0.0]);
    let z = g.input(1, 1, vec![0.0]);
    let one = loss_plan(
        &mut g,
        &LatentGaussian { mu: mq, log_sigma: z },
        &LatentGaussian { mu: mp, log_sigma: z },
    )
    .unwrap();
    assert_eq!(g.scalar(one), 0.5);

    let short = LatentGaussian { mu: mq, log_sigma: z };
    assert!(matches!(loss_plan(&mut g, &q, &short), Err(Error::Contract(_))));
}

#[test]
fn learning_rate_schedule_endpoints() {
    assert_eq!(cosine_lr(2e-4, 0, 100), 2e-4);
    assert!(cosine_lr(2e-4, 100, 100).abs() < 1e-20);
    assert_eq!(RunConfig::default().train.learning_rate, 2e-4);
}

#[test]
fn training_is_deterministic() {
    let mut cfg = small_run(3);
    cfg.train.epochs = 1;
    let data = samples(&cfg, 0, 1);
    let (a, la) = train(&cfg, &data, &FitOptions::default()).unwrap();
    let (b, lb) = train(&cfg, &data, &FitOptions::default()).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.optimizer, b.optimizer);
    assert_eq!(la[0].report, lb[0].report);
    assert_ne!(a.params, TrainState::new(&cfg).unwrap().params);
}

#[test]
fn resumed_training_matches_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run(4);
    cfg.train.epochs = 3;
    cfg.train.grad_accumulation = 2;
    let data = samples(&cfg, 10, 5);
    let (full, _) = train(&cfg, &data, &FitOptions::default()).unwrap();

    let mut part = TrainState::new(&cfg).unwrap();
    fit(
        &mut part,
        &data,
        &FitOptions {
            stop_at_epoch: Some(1),
            ..Default::default()
        },
    )
    .unwrap();
    let path = dir.path().join("ck.json");
    part.save(&path).unwrap();
    let mut resumed = TrainState::load(&path).unwrap();
    assert_eq!(resumed, part);
    fit(&mut resumed, &data, &FitOptions::default()).unwrap();
    assert_eq!(resumed.epoch, 3);
    assert_eq!(resumed.params, full.params);
    assert_eq!(resumed.optimizer, full.optimizer);
    assert_eq!(
        resumed.to_checkpoint().to_json().unwrap(),
        full.to_checkpoint().to_json().unwrap()
    );
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let state = TrainState::new(&small_run(5)).unwrap();
    let (p1, p2) = (dir.path().join("a.json"), dir.path().join("b.json"));
    state.save(&p1).unwrap();
    TrainState::load(&p1).unwrap().save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn fit_writes_logs_and_periodic_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run(6);
    cfg.train.epochs = 2;
    cfg.train.checkpoint_every = 1;
    let data = samples(&cfg, 20, 2);
    let opts = FitOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let (state, logs) = train(&cfg, &data, &opts).unwrap();
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert_eq!(logs[1].step, state.step);
    let last = TrainState::load(&dir.path().join("checkpoint_epoch002.json")).unwrap();
    assert_eq!(last, state);
    assert!(dir.path().join("checkpoint_epoch001.json").exists());
}

#[test]
fn non_finite_loss_aborts_with_the_offending_term() {
    let cfg = small_run(7);
    let data = samples(&cfg, 30, 2);
    let model = Model::new(&cfg.model, cfg.variant).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let bias = model.prior.waypoint_dec.layers.last().unwrap().bias();
    let t = state.params.get_mut(&bias).unwrap();
    *t = Tensor::row(vec![f64::NAN; t.len()]);
    match fit(&mut state, &data, &FitOptions::default()) {
        Err(Error::NonFiniteLoss { epoch, step, term }) => {
            assert_eq!((epoch, step), (0, 0));
            assert_eq!(term, "j_prior");
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
    assert_eq!(state.step, 0);
}

#[test]
fn total_loss_decreases_over_ten_epochs() {
    let mut curves = Vec::new();
    for seed in 0..3 {
        let mut cfg = RunConfig {
            seed,
            ..Default::default()
        };
        cfg.train.epochs = 10;
        let data = samples(&cfg, 500, 64);
        let (_, logs) = train(&cfg, &data, &FitOptions::default()).unwrap();
        curves.push(logs.iter().map(|l| l.report.j_total).collect::<Vec<_>>());
    }
    let median: Vec<f64> = (0..10)
        .map(|e| {
            let mut v = [curves[0][e], curves[1][e], curves[2][e]];
            v.sort_by(f64::total_cmp);
            v[1]
        })
        .collect();
    assert!(median.windows(2).all(|w| w[1] < w[0]), "{median:?}");
}
