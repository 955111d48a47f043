use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::tensor::ParamStore;

/// Parameter name → flat gradient.
pub type GradMap = BTreeMap<String, Vec<f64>>;

impl Gradients {
    pub fn to_map(&self) -> GradMap {
        self.params()
            .filter_map(|(k, v)| v.map(|v| (k.clone(), v.to_vec())))
            .collect()
    }
}

/// `acc += g`, inserting missing entries.
pub fn accumulate(acc: &mut GradMap, g: &GradMap) {
    for (k, v) in g {
        match acc.get_mut(k) {
            Some(a) => a.iter_mut().zip(v).for_each(|(x, y)| *x += y),
            None => {
                acc.insert(k.clone(), v.clone());
            }
        }
    }
}

pub fn scale_grads(g: &mut GradMap, s: f64) {
    g.values_mut().flatten().for_each(|v| *v *= s);
}

/// `lr₀ · ½ (1 + cos(π t / T))`, held at zero past `T`.
pub fn cosine_lr(lr0: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = t.min(total) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (PI * frac).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamWState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamWState {
    pub fn round_to_f32(&mut self) {
        for x in self.m.values_mut().chain(self.v.values_mut()).flatten() {
            *x = *x as f32 as f64;
        }
    }
}

/// One AdamW update. Weight decay shrinks the parameters directly and
/// never enters the moment estimates. Parameters without a gradient entry
/// are decayed only.
pub fn adamw_step(cfg: &AdamWConfig, state: &mut AdamWState, params: &mut ParamStore, grads: &GradMap, lr: f64) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, tensor) in params.iter_mut() {
        let p = tensor.data_mut();
        if cfg.weight_decay != 0.0 {
            let shrink = 1.0 - lr * cfg.weight_decay;
            p.iter_mut().for_each(|x| *x *= shrink);
        }
        let Some(g) = grads.get(name) else { continue };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
        for (((x, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *x -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    fn store(vals: Vec<f64>) -> ParamStore {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::new(vec![vals.len()], vals).unwrap()).unwrap();
        ps
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut ps = store(vec![1.0, -2.0, 0.5]);
        let before = ps.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::default();
        let grads = GradMap::from([("w".to_string(), vec![0.0; 3])]);
        adamw_step(&cfg, &mut st, &mut ps, &grads, 1e-3);
        assert_eq!(ps, before);
    }

    #[test]
    fn first_step_closed_form() {
        // Bias correction makes m̂ = g and v̂ = g², so the step is lr·g/(|g| + ε).
        let lr = 2e-4;
        let cfg = AdamWConfig::default();
        let p0 = [0.7, -1.3];
        let g = [0.5, -3.0];
        let mut ps = store(p0.to_vec());
        let mut st = AdamWState::default();
        let grads = GradMap::from([("w".to_string(), g.to_vec())]);
        adamw_step(&cfg, &mut st, &mut ps, &grads, lr);
        for i in 0..2 {
            let decayed = p0[i] * (1.0 - lr * cfg.weight_decay);
            let want = decayed - lr * g[i] / (g[i].abs() + cfg.eps);
            assert!((ps.get("w").unwrap().data()[i] - want).abs() < 1e-15);
        }
        let moved: Vec<f64> = ps.get("w").unwrap().data().iter().zip(p0).map(|(a, b)| a - b).collect();
        assert!(moved[0] < 0.0 && moved[1] > 0.0);
    }

    #[test]
    fn decay_is_decoupled_from_moments() {
        let mut ps = store(vec![2.0]);
        let mut st = AdamWState::default();
        adamw_step(
            &AdamWConfig::default(),
            &mut st,
            &mut ps,
            &GradMap::from([("w".into(), vec![0.0])]),
            0.1,
        );
        assert_eq!(st.m["w"], vec![0.0]);
        assert_eq!(st.v["w"], vec![0.0]);
        assert!((ps.get("w").unwrap().data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(2e-4, 0, 100), 2e-4);
        assert!((cosine_lr(2e-4, 50, 100) - 1e-4).abs() < 1e-18);
        assert!(cosine_lr(2e-4, 100, 100).abs() < 1e-20);
        assert!(cosine_lr(2e-4, 150, 100).abs() < 1e-20);
    }
}
