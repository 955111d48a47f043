//! Central finite-difference check of tape gradients.

use super::graph::{Graph, Var};
use super::tensor::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Lower bound on the relative-error denominator so that coordinates
    /// with vanishing gradients are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-4, floor: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

pub fn grad_check<F>(params: &ParamStore, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    grad_check_with(params, GradCheckOptions::default(), f)
}

fn eval<F>(params: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let out = f(&mut g)?;
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(Error::Numeric("grad_check objective".into()));
    }
    Ok(v)
}

/// Compares the tape gradient of `f` against central differences for
/// every coordinate of every parameter and reports the worst one.
pub fn grad_check_with<F>(params: &ParamStore, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic: Vec<(String, Vec<f64>)> = {
        let mut g = Graph::new(params);
        let out = f(&mut g)?;
        if !g.scalar(out).is_finite() {
            return Err(Error::Numeric("grad_check objective".into()));
        }
        let grads = g.backward(out);
        params
            .iter()
            .map(|(name, t)| {
                let v = grads.param(name).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec);
                (name.clone(), v)
            })
            .collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        param: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut probe = params.clone();
    for (name, grad) in &analytic {
        for (i, &a) in grad.iter().enumerate() {
            let orig = probe.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + opts.eps;
            let plus = eval(&probe, &f)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - opts.eps;
            let minus = eval(&probe, &f)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;

            let n = (plus - minus) / (2.0 * opts.eps);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(opts.floor);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.param.is_empty() {
                report.max_rel_error = rel;
                report.param = name.clone();
                report.index = i;
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    Ok(report)
}
