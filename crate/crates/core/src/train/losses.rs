//! Training objective: trajectory reconstruction with ego constraints, the
//! latent matching term, and the detection and map auxiliary terms.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LossParams, LossWeights, RunConfig, SampleMode, Variant};
use crate::error::{Error, Result};
use crate::geom::{closest_on_segment, OrientedBox, Point, Polyline};
use crate::model::{Model, SceneSample};
use crate::nn::loss::{focal_loss, l1_mean};
use crate::nn::{Graph, Var};
use crate::prior::{kl_diag_gauss, sample_latent, LatentGaussian};
use crate::scene::ego_circles;
use crate::tokenizer::heads::{softmax, DET_BACKGROUND, DET_OUT, MAP_BACKGROUND};
use crate::tokenizer::hungarian_match;

const DIR_EPS: f64 = 1e-6;
const DIST_EPS: f64 = 1e-12;

/// Scalar values of every term of one objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub j_prior: f64,
    pub j_plan: f64,
    pub j_map: f64,
    pub j_det: f64,
    pub j_total: f64,
    /// Ego waypoint L1.
    pub l1: f64,
    pub collision: f64,
    pub boundary: f64,
    pub lane_dir: f64,
    /// Mean agent waypoint L1.
    pub agent_l1: f64,
    /// Agent class focal term.
    pub focal: f64,
}

impl LossReport {
    pub const TERMS: [&'static str; 11] = [
        "j_prior",
        "j_plan",
        "j_map",
        "j_det",
        "j_total",
        "l1",
        "collision",
        "boundary",
        "lane_dir",
        "agent_l1",
        "focal",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.j_prior,
            self.j_plan,
            self.j_map,
            self.j_det,
            self.j_total,
            self.l1,
            self.collision,
            self.boundary,
            self.lane_dir,
            self.agent_l1,
            self.focal,
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::TERMS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut acc = [0.0; 11];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let m = acc.map(|a| a / n);
        LossReport {
            j_prior: m[0],
            j_plan: m[1],
            j_map: m[2],
            j_det: m[3],
            j_total: m[4],
            l1: m[5],
            collision: m[6],
            boundary: m[7],
            lane_dir: m[8],
            agent_l1: m[9],
            focal: m[10],
        }
    }
}

/// `J_prior + λ_plan·J_plan + λ_map·J_map + λ_det·J_det`, in that order.
pub fn total_value(j_prior: f64, j_plan: f64, j_map: f64, j_det: f64, w: &LossWeights) -> f64 {
    j_prior + w.plan * j_plan + w.map * j_map + w.det * j_det
}

/// Graph version of [`total_value`] with the same summation order.
pub fn total_loss(g: &mut Graph, j_prior: Var, j_plan: Var, j_map: Var, j_det: Var, w: &LossWeights) -> Var {
    let p = g.scale(j_plan, w.plan);
    let m = g.scale(j_map, w.map);
    let d = g.scale(j_det, w.det);
    let t = g.add(j_prior, p);
    let t = g.add(t, m);
    g.add(t, d)
}

fn zero(g: &mut Graph) -> Var {
    g.scalar_const(0.0)
}

fn plan_rows(g: &mut Graph, plan: Var) -> Var {
    let (_, c) = g.dims(plan);
    g.reshape(plan, c / 2, 2)
}

/// Per-step displacements `[f × 2]` (the first from the origin) and their
/// lengths `[f × 1]`.
fn steps(g: &mut Graph, w: Var) -> (Var, Var) {
    let (f, _) = g.dims(w);
    let origin = g.constant(1, 2, vec![0.0, 0.0]);
    let prev_rows = g.slice_rows(w, 0, f - 1);
    let prev = g.concat_rows(&[origin, prev_rows]);
    let d = g.sub(w, prev);
    let d2 = g.square(d);
    let s = g.row_sums(d2);
    let s = g.add_scalar(s, DIR_EPS);
    let norm = g.sqrt(s);
    (d, norm)
}

/// Mean absolute waypoint difference over all coordinates.
pub fn l1_trajectory(g: &mut Graph, pred: Var, gt: &[Point]) -> Result<Var> {
    let (r, c) = g.dims(pred);
    if r * c != 2 * gt.len() {
        return Err(Error::shape(
            "l1_trajectory",
            format!("{r}x{c} prediction for {} waypoints", gt.len()),
        ));
    }
    let t = g.constant(r, c, gt.iter().flat_map(|p| [p[0], p[1]]).collect());
    Ok(l1_mean(g, pred, t))
}

/// Hinge `max(0, d_safe − clearance)` between each of the three circles
/// covering the planned ego footprint and every agent box at the same
/// future frame, summed. The footprint heading follows the step direction.
/// Circle centers inside a box use the negative penetration depth as their
/// distance.
pub fn collision_penalty(
    g: &mut Graph,
    plan: Var,
    boxes: &[Vec<OrientedBox>],
    ego_length: f64,
    ego_width: f64,
    d_safe: f64,
) -> Var {
    let w = plan_rows(g, plan);
    let (d, norm) = steps(g, w);
    let u = g.div(d, norm);
    let f = g.dims(w).0.min(boxes.len());
    let off = 0.5 * (ego_length - ego_width).max(0.0);
    let r = 0.5 * ego_width;

    let (wv, uv) = (g.value(w).to_vec(), g.value(u).to_vec());
    let mut frame = Vec::new();
    let mut offs = Vec::new();
    let mut ctr = Vec::new();
    let mut ax = Vec::new();
    let mut ay = Vec::new();
    let mut half = Vec::new();
    for k in 0..f {
        let pose = crate::geom::Pose2::new(wv[2 * k], wv[2 * k + 1], uv[2 * k + 1].atan2(uv[2 * k]));
        let circles = ego_circles(&pose, ego_length, ego_width);
        for b in &boxes[k] {
            for (ci, &(c, _)) in circles.iter().enumerate() {
                if d_safe + r - b.distance_to_point(c) <= 0.0 {
                    continue;
                }
                let [a0, a1] = b.axes();
                frame.push(k);
                offs.push([0.0, off, -off][ci]);
                ctr.extend([b.center.x, b.center.y]);
                ax.extend(a0);
                ay.extend(a1);
                half.extend([0.5 * b.length, 0.5 * b.width]);
            }
        }
    }
    let n = frame.len();
    if n == 0 {
        return zero(g);
    }
    let wk = g.gather_rows(w, &frame);
    let uk = g.gather_rows(u, &frame);
    let o = g.constant(n, 1, offs);
    let shift = g.mul(uk, o);
    let c = g.add(wk, shift);
    let ctr = g.constant(n, 2, ctr);
    let rel = g.sub(c, ctr);
    let ax = g.constant(n, 2, ax);
    let ay = g.constant(n, 2, ay);
    let px = g.mul(rel, ax);
    let lx = g.row_sums(px);
    let py = g.mul(rel, ay);
    let ly = g.row_sums(py);
    let local = g.concat_cols(&[lx, ly]);
    let alocal = g.abs(local);
    let half = g.constant(n, 2, half);
    let excess = g.sub(alocal, half);
    let q = g.relu(excess);
    let q2 = g.square(q);
    let s = g.row_sums(q2);
    let s = g.add_scalar(s, DIST_EPS);
    let outside = g.sqrt(s);
    let ex = g.slice_cols(excess, 0, 1);
    let ey = g.slice_cols(excess, 1, 1);
    let diff = g.sub(ex, ey);
    let over = g.relu(diff);
    let deepest = g.add(ey, over);
    let neg_deepest = g.neg(deepest);
    let depth = g.relu(neg_deepest);
    let dist = g.sub(outside, depth);
    let neg = g.neg(dist);
    let gap = g.add_scalar(neg, d_safe + r);
    let hinge = g.relu(gap);
    g.sum_all(hinge)
}

fn nearest_segment(lines: &[Polyline], p: Point) -> Option<(Point, Point)> {
    let mut best: Option<(f64, Point, Point)> = None;
    for l in lines {
        for s in l.points().windows(2) {
            let q = closest_on_segment(s[0], s[1], p);
            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
            if best.map_or(true, |b| d < b.0) {
                best = Some((d, s[0], s[1]));
            }
        }
    }
    best.map(|(_, a, b)| (a, b))
}

fn unit(a: Point, b: Point) -> Point {
    let d = [b[0] - a[0], b[1] - a[1]];
    let n = d[0].hypot(d[1]);
    [d[0] / n, d[1] / n]
}

/// Sum over waypoints of `max(0, −s)` where `s` is the signed distance to
/// the nearest road-boundary segment, positive on its left (road) side.
pub fn boundary_penalty(g: &mut Graph, plan: Var, boundaries: &[Polyline]) -> Var {
    let w = plan_rows(g, plan);
    let f = g.dims(w).0;
    let wv = g.value(w).to_vec();
    let mut anchor = Vec::with_capacity(2 * f);
    let mut normal = Vec::with_capacity(2 * f);
    for k in 0..f {
        let Some((a, b)) = nearest_segment(boundaries, [wv[2 * k], wv[2 * k + 1]]) else {
            return zero(g);
        };
        let t = unit(a, b);
        anchor.extend(a);
        normal.extend([-t[1], t[0]]);
    }
    let a = g.constant(f, 2, anchor);
    let nrm = g.constant(f, 2, normal);
    let rel = g.sub(w, a);
    let pr = g.mul(rel, nrm);
    let s = g.row_sums(pr);
    let ns = g.neg(s);
    let h = g.relu(ns);
    g.sum_all(h)
}

/// Mean over steps of `1 − cos` between the step direction and the tangent
/// of the lane divider nearest to the step's end point.
pub fn lane_dir_penalty(g: &mut Graph, plan: Var, dividers: &[Polyline]) -> Var {
    let w = plan_rows(g, plan);
    let f = g.dims(w).0;
    let wv = g.value(w).to_vec();
    let mut tan = Vec::with_capacity(2 * f);
    for k in 0..f {
        let Some((a, b)) = nearest_segment(dividers, [wv[2 * k], wv[2 * k + 1]]) else {
            return zero(g);
        };
        tan.extend(unit(a, b));
    }
    let (d, norm) = steps(g, w);
    let t = g.constant(f, 2, tan);
    let dt = g.mul(d, t);
    let dot = g.row_sums(dt);
    let cos = g.div(dot, norm);
    let neg = g.neg(cos);
    let one_minus = g.add_scalar(neg, 1.0);
    g.mean_all(one_minus)
}

/// Mean over instances of `KL(q_i ‖ p_i)`.
pub fn loss_plan(g: &mut Graph, q: &LatentGaussian, p: &LatentGaussian) -> Result<Var> {
    if q.batch(g) != p.batch(g) {
        return Err(Error::Contract(format!(
            "{} instance distributions paired with {} trajectory distributions",
            q.batch(g),
            p.batch(g)
        )));
    }
    let kl = kl_diag_gauss(g, q, p)?;
    Ok(g.mean_all(kl))
}

/// Matched detection slots and map tokens, as `(slot, gt index)` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Matches {
    pub agents: Vec<(usize, usize)>,
    pub map: Vec<(usize, usize)>,
    /// Per map pair, whether the ground-truth points are matched reversed.
    pub map_reversed: Vec<bool>,
}

pub fn match_agents(det_raw: &[f64], sample: &SceneSample, scale: f64, lp: &LossParams) -> Result<Vec<(usize, usize)>> {
    let cost: Vec<Vec<f64>> = det_raw
        .chunks(DET_OUT)
        .map(|r| {
            let probs = softmax(&r[4..]);
            sample
                .agents
                .iter()
                .map(|a| {
                    let dx = r[0] * scale - a.pose.x;
                    let dy = r[1] * scale - a.pose.y;
                    lp.match_pos_weight * dx.hypot(dy) + lp.match_cls_weight * (1.0 - probs[a.class.index()])
                })
                .collect()
        })
        .collect();
    hungarian_match(&cost)
}

fn point_l1(pred: &[f64], gt: &[Point], scale: f64, reversed: bool) -> f64 {
    let n = gt.len();
    (0..n)
        .map(|i| {
            let q = if reversed { gt[n - 1 - i] } else { gt[i] };
            (pred[2 * i] * scale - q[0]).abs() + (pred[2 * i + 1] * scale - q[1]).abs()
        })
        .sum::<f64>()
        / n as f64
}

pub fn match_map(
    map_raw: &[f64],
    width: usize,
    sample: &SceneSample,
    scale: f64,
    lp: &LossParams,
) -> Result<(Vec<(usize, usize)>, Vec<bool>)> {
    let np = sample.map_targets.first().map_or(0, |t| t.points.len());
    let cost: Vec<Vec<f64>> = map_raw
        .chunks(width)
        .map(|r| {
            let probs = softmax(&r[2 * np..]);
            sample
                .map_targets
                .iter()
                .map(|t| {
                    let d = point_l1(r, &t.points, scale, false).min(point_l1(r, &t.points, scale, true));
                    lp.match_pos_weight * d + lp.match_cls_weight * (1.0 - probs[t.category.index()])
                })
                .collect()
        })
        .collect();
    let pairs = hungarian_match(&cost)?;
    let rev = pairs
        .iter()
        .map(|&(i, j)| {
            let r = &map_raw[i * width..(i + 1) * width];
            let t = &sample.map_targets[j].points;
            point_l1(r, t, scale, true) < point_l1(r, t, scale, false)
        })
        .collect();
    Ok((pairs, rev))
}

/// Matched position/heading L1 (in position-scale units) plus class focal
/// with unmatched slots as background.
pub fn loss_det(
    g: &mut Graph,
    det_raw: Var,
    sample: &SceneSample,
    pairs: &[(usize, usize)],
    scale: f64,
    lp: &LossParams,
) -> Result<Var> {
    let (n, _) = g.dims(det_raw);
    let mut targets = vec![DET_BACKGROUND; n];
    for &(s, j) in pairs {
        targets[s] = sample.agents[j].class.index();
    }
    let logits = g.slice_cols(det_raw, 4, DET_OUT - 4);
    let focal = focal_loss(g, logits, &targets, lp.focal)?;
    if pairs.is_empty() {
        return Ok(focal);
    }
    let slots: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let rows = g.gather_rows(det_raw, &slots);
    let geo = g.slice_cols(rows, 0, 4);
    let tgt: Vec<f64> = pairs
        .iter()
        .flat_map(|&(_, j)| {
            let p = sample.agents[j].pose;
            [p.x / scale, p.y / scale, p.heading.sin(), p.heading.cos()]
        })
        .collect();
    let tgt = g.constant(pairs.len(), 4, tgt);
    let l1 = l1_mean(g, geo, tgt);
    Ok(g.add(l1, focal))
}

/// Matched point L1 (in position-scale units, orientation as matched) plus
/// category focal with unmatched tokens as background.
pub fn loss_map(
    g: &mut Graph,
    map_raw: Var,
    sample: &SceneSample,
    pairs: &[(usize, usize)],
    reversed: &[bool],
    scale: f64,
    lp: &LossParams,
) -> Result<Var> {
    let (n, w) = g.dims(map_raw);
    let np = (w - MAP_BACKGROUND - 1) / 2;
    let mut targets = vec![MAP_BACKGROUND; n];
    for &(s, j) in pairs {
        targets[s] = sample.map_targets[j].category.index();
    }
    let logits = g.slice_cols(map_raw, 2 * np, MAP_BACKGROUND + 1);
    let focal = focal_loss(g, logits, &targets, lp.focal)?;
    if pairs.is_empty() {
        return Ok(focal);
    }
    let slots: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let rows = g.gather_rows(map_raw, &slots);
    let pts = g.slice_cols(rows, 0, 2 * np);
    let tgt: Vec<f64> = pairs
        .iter()
        .zip(reversed)
        .flat_map(|(&(_, j), &rev)| {
            let mut p = sample.map_targets[j].points.clone();
            if rev {
                p.reverse();
            }
            p.into_iter().flat_map(move |q| [q[0] / scale, q[1] / scale])
        })
        .collect();
    let tgt = g.constant(pairs.len(), 2 * np, tgt);
    let l1 = l1_mean(g, pts, tgt);
    Ok(g.add(l1, focal))
}

fn checked(g: &Graph, v: Var, term: &'static str) -> Result<f64> {
    let x = g.scalar(v);
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFiniteLoss {
            epoch: 0,
            step: 0,
            term: term.into(),
        })
    }
}

/// Builds the full objective for one scene. `rng` drives the latent draw
/// on the training path.
pub fn scene_loss(
    model: &Model,
    g: &mut Graph,
    sample: &SceneSample,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossReport, Matches)> {
    let w = cfg.effective_weights();
    let lp = &cfg.loss;
    let scale = model.cfg.position_scale;
    let tok = model.encode(g, sample)?;

    let agents = match_agents(g.value(tok.det_raw), sample, scale, lp)?;
    let map_w = g.dims(tok.map_raw).1;
    let (map_pairs, map_rev) = match_map(g.value(tok.map_raw), map_w, sample, scale, lp)?;
    let j_det = loss_det(g, tok.det_raw, sample, &agents, scale, lp)?;
    let j_map = loss_map(g, tok.map_raw, sample, &map_pairs, &map_rev, scale, lp)?;

    let rows: Vec<usize> = std::iter::once(0).chain(agents.iter().map(|&(s, _)| 1 + s)).collect();
    let sel = g.gather_rows(tok.instances, &rows);
    let (traj, cls, j_plan) = match model.variant {
        v if v.uses_prior() => {
            let futures: Vec<Vec<Point>> = std::iter::once(sample.ego_future.clone())
                .chain(agents.iter().map(|&(_, j)| sample.agents[j].future_local.clone()))
                .collect();
            let p_f = model.prior.encode_future(g, &futures, sel)?;
            let q_i = model.prior.encode_instance(g, sel)?;
            let z = sample_latent(g, &p_f, SampleMode::Sample, rng);
            let (t, c) = model.prior.generate(g, z, v)?;
            let kl = loss_plan(g, &q_i, &p_f)?;
            (t, c, kl)
        }
        Variant::Neither => {
            let (t, c) = model.prior.decode_direct(g, sel)?;
            (t, c, zero(g))
        }
        v => {
            let q_i = model.prior.encode_instance(g, sel)?;
            let (t, c) = model.prior.generate(g, q_i.mu, v)?;
            (t, c, zero(g))
        }
    };

    let ego = g.slice_rows(traj, 0, 1);
    let l1 = l1_trajectory(g, ego, &sample.ego_future)?;
    let coll = collision_penalty(
        g,
        ego,
        &sample.future_boxes,
        sample.ego_length,
        sample.ego_width,
        lp.safe_distance,
    );
    let bnd = boundary_penalty(g, ego, &sample.boundaries);
    let lane = lane_dir_penalty(g, ego, &sample.dividers);
    let c1 = g.scale(coll, lp.collision_weight);
    let c2 = g.scale(bnd, lp.boundary_weight);
    let c3 = g.scale(lane, lp.lane_dir_weight);
    let ltra = g.add(l1, c1);
    let ltra = g.add(ltra, c2);
    let ltra = g.add(ltra, c3);

    let (agent_l1, focal) = if agents.is_empty() {
        (zero(g), zero(g))
    } else {
        let n = agents.len();
        let at = g.slice_rows(traj, 1, n);
        let gt: Vec<Point> = agents
            .iter()
            .flat_map(|&(_, j)| sample.agents[j].future_local.iter().copied())
            .collect();
        let al1 = l1_trajectory(g, at, &gt)?;
        let ac = g.slice_rows(cls, 1, n);
        let targets: Vec<usize> = agents.iter().map(|&(_, j)| sample.agents[j].class.index()).collect();
        (al1, focal_loss(g, ac, &targets, lp.focal)?)
    };
    let fc = g.scale(focal, w.class);
    let j_prior = g.add(ltra, agent_l1);
    let j_prior = g.add(j_prior, fc);
    let total = total_loss(g, j_prior, j_plan, j_map, j_det, &w);

    let report = LossReport {
        j_prior: checked(g, j_prior, "j_prior")?,
        j_plan: checked(g, j_plan, "j_plan")?,
        j_map: checked(g, j_map, "j_map")?,
        j_det: checked(g, j_det, "j_det")?,
        j_total: g.scalar(total),
        l1: checked(g, l1, "l1")?,
        collision: checked(g, coll, "collision")?,
        boundary: checked(g, bnd, "boundary")?,
        lane_dir: checked(g, lane, "lane_dir")?,
        agent_l1: checked(g, agent_l1, "agent_l1")?,
        focal: checked(g, focal, "focal")?,
    };
    checked(g, total, "j_total")?;
    Ok((
        total,
        report,
        Matches {
            agents,
            map: map_pairs,
            map_reversed: map_rev,
        },
    ))
}
