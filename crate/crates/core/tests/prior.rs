mod common;

use common::kl_quadrature;
use drivegen::config::{ModelConfig, SampleMode, Variant};
use drivegen::nn::gradcheck::grad_check;
use drivegen::nn::{Graph, ParamStore, Tensor};
use drivegen::prior::{kl_diag_gauss, kl_diag_gauss_value, sample_latent, LatentGaussian, Prior};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn kl_matches_quadrature_on_random_pairs() {
    let mut r = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let (mq, mp) = (r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0));
        let (sq, sp) = (r.gen_range(0.2..3.0), r.gen_range(0.2..3.0));
        let closed = kl_diag_gauss_value(&[mq], &[sq], &[mp], &[sp]).unwrap();
        let numeric = kl_quadrature(mq, sq, mp, sp);
        assert!((closed - numeric).abs() < 1e-6, "{closed} vs {numeric}");
    }
}

#[test]
fn kl_is_zero_on_identical_and_non_negative_on_random_pairs() {
    let mut r = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..10_000 {
        let mu: Vec<f64> = (0..4).map(|_| r.gen_range(-5.0..5.0)).collect();
        let sg: Vec<f64> = (0..4).map(|_| r.gen_range(-6.0f64..4.0).exp()).collect();
        let mu2: Vec<f64> = (0..4).map(|_| r.gen_range(-5.0..5.0)).collect();
        let sg2: Vec<f64> = (0..4).map(|_| r.gen_range(-6.0f64..4.0).exp()).collect();
        assert_eq!(kl_diag_gauss_value(&mu, &sg, &mu, &sg).unwrap(), 0.0);
        assert!(kl_diag_gauss_value(&mu, &sg, &mu2, &sg2).unwrap() >= 0.0);
    }
}

proptest! {
    #[test]
    fn graph_kl_agrees_with_the_value_form(
        mq in -4.0f64..4.0, lq in -6.0f64..4.0, mp in -4.0f64..4.0, lp in -6.0f64..4.0,
    ) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let q = LatentGaussian { mu: g.constant(1, 1, vec![mq]), log_sigma: g.constant(1, 1, vec![lq]) };
        let p = LatentGaussian { mu: g.constant(1, 1, vec![mp]), log_sigma: g.constant(1, 1, vec![lp]) };
        let kl = kl_diag_gauss(&mut g, &q, &p).unwrap();
        let v = kl_diag_gauss_value(&[mq], &[lq.exp()], &[mp], &[lp.exp()]).unwrap();
        prop_assert!(g.scalar(kl) >= 0.0);
        prop_assert!((g.scalar(kl) - v).abs() <= 1e-9 * v.abs().max(1.0));
    }
}

#[test]
fn sampling_statistics_of_a_standard_normal() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let n = 10_000;
    let lg = LatentGaussian {
        mu: g.constant(n, 1, vec![0.0; n]),
        log_sigma: g.constant(n, 1, vec![0.0; n]),
    };
    let z = sample_latent(&mut g, &lg, SampleMode::Sample, &mut ChaCha8Rng::seed_from_u64(3));
    let v = g.value(z);
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() < 0.05, "mean {mean}");
    assert!((var - 1.0).abs() < 0.1, "variance {var}");
}

#[test]
fn reparameterized_kl_passes_gradient_check() {
    let mut store = ParamStore::new();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for name in ["mq", "lq", "mp", "lp"] {
        let v: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        store.insert(name, Tensor::matrix(2, 3, v)).unwrap();
    }
    let report = grad_check(&store, |g| {
        let q = LatentGaussian {
            mu: g.param("mq"),
            log_sigma: g.param("lq"),
        };
        let p = LatentGaussian {
            mu: g.param("mp"),
            log_sigma: g.param("lp"),
        };
        let z = sample_latent(g, &q, SampleMode::Sample, &mut ChaCha8Rng::seed_from_u64(9));
        let kl = kl_diag_gauss(g, &q, &p)?;
        let zs = g.square(z);
        let a = g.sum_all(kl);
        let b = g.sum_all(zs);
        Ok(g.add(a, b))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn every_instance_rolls_out_to_six_waypoints() {
    let cfg = ModelConfig::default();
    let prior = Prior::new(&cfg);
    for variant in [Variant::Full, Variant::NoTpm, Variant::NoLftg] {
        let mut store = ParamStore::new();
        prior
            .init(&mut store, &mut ChaCha8Rng::seed_from_u64(1), variant)
            .unwrap();
        for b in 1..5 {
            let mut g = Graph::new(&store);
            let z = g.constant(b, cfg.latent_dim, vec![0.1; b * cfg.latent_dim]);
            let (traj, cls) = prior.generate(&mut g, z, variant).unwrap();
            assert_eq!(g.dims(traj), (b, 12));
            assert_eq!(g.dims(cls).0, b);
            if variant.uses_rollout() {
                assert_eq!(prior.rollout(&mut g, z, cfg.horizon).unwrap().len(), 6);
            }
        }
    }
}
