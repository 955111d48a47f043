use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// Softmax focal loss averaged over rows:
/// `mean_i α (1 − p_t)^γ (−ln p_t)` with `p_t` the target-class probability.
pub fn focal_loss(g: &mut Graph, logits: Var, targets: &[usize], fp: FocalParams) -> Result<Var> {
    let (n, c) = g.dims(logits);
    if n == 0 || targets.is_empty() {
        return Err(Error::EmptyBatch("focal loss".into()));
    }
    if targets.len() != n {
        return Err(Error::shape(
            "focal loss",
            format!("{n} rows of logits but {} targets", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::shape("focal loss", format!("target {bad} out of {c} classes")));
    }
    let logp = g.log_softmax_rows(logits);
    let lp_t = g.pick(logp, targets);
    let nll = g.neg(lp_t);
    let per_row = if fp.gamma == 0.0 {
        nll
    } else {
        let p_t = g.exp(lp_t);
        let neg_p = g.neg(p_t);
        let one_minus = g.add_scalar(neg_p, 1.0);
        let w = g.powf(one_minus, fp.gamma);
        g.mul(w, nll)
    };
    let m = g.mean_all(per_row);
    Ok(g.scale(m, fp.alpha))
}

/// Mean absolute difference between two equally shaped nodes.
pub fn l1_mean(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let ad = g.abs(d);
    g.mean_all(ad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::ParamStore;

    fn eval(logits: Vec<f64>, cols: usize, targets: &[usize], fp: FocalParams) -> f64 {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let rows = logits.len() / cols;
        let l = g.constant(rows, cols, logits);
        let out = focal_loss(&mut g, l, targets, fp).unwrap();
        g.scalar(out)
    }

    #[test]
    fn confident_correct_prediction_costs_nothing() {
        assert_eq!(eval(vec![100.0, -100.0], 2, &[0], FocalParams::default()), 0.0);
    }

    #[test]
    fn half_probability_closed_form() {
        let v = eval(vec![0.0, 0.0], 2, &[1], FocalParams::default());
        let want = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((v - want).abs() < 1e-15);
        assert!((v - 0.043322).abs() < 1e-6);
    }

    #[test]
    fn gamma_zero_alpha_one_is_cross_entropy() {
        let logits = vec![0.3, -1.0, 2.0, 1.5, 0.0, -0.5];
        let targets = [2, 0];
        let v = eval(logits.clone(), 3, &targets, FocalParams { gamma: 0.0, alpha: 1.0 });
        let ce: f64 = logits
            .chunks(3)
            .zip(targets)
            .map(|(row, t)| {
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                -(row[t].exp() / z).ln()
            })
            .sum::<f64>()
            / 2.0;
        assert!((v - ce).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let l = g.constant(0, 3, vec![]);
        assert!(matches!(
            focal_loss(&mut g, l, &[], FocalParams::default()),
            Err(Error::EmptyBatch(_))
        ));
    }
}
