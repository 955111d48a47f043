//! Independent oracles shared by the integration tests and the acceptance
//! suite. Nothing here calls into the code under test.

#![allow(dead_code)]

use drivegen::geom::OrientedBox;

/// Minimum total cost over all injective row-to-column assignments of a
/// matrix with no more rows than columns, by exhaustive search.
pub fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost[0].len()], 0.0, &mut best);
    best
}

/// [`brute_force_min`] for either orientation of a rectangular matrix.
pub fn brute_force_min_rect(cost: &[Vec<f64>]) -> f64 {
    if cost.len() <= cost[0].len() {
        brute_force_min(cost)
    } else {
        let t: Vec<Vec<f64>> = (0..cost[0].len())
            .map(|j| cost.iter().map(|r| r[j]).collect())
            .collect();
        brute_force_min(&t)
    }
}

fn gauss_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// `∫ q ln(q/p)` by composite Simpson over ±12σ_q around μ_q.
pub fn kl_quadrature(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    let n = 20_000;
    let (a, b) = (mq - 12.0 * sq, mq + 12.0 * sq);
    let h = (b - a) / n as f64;
    let f = |x: f64| {
        let q = gauss_pdf(x, mq, sq);
        if q == 0.0 {
            return 0.0;
        }
        let lr = (sp / sq).ln() - 0.5 * ((x - mq) / sq).powi(2) + 0.5 * ((x - mp) / sp).powi(2);
        q * lr
    };
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

pub fn bitwise_rows(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Point in box coordinates: `(along length, along width)`.
fn local(b: &OrientedBox, p: [f64; 2]) -> [f64; 2] {
    let (dx, dy) = (p[0] - b.center.x, p[1] - b.center.y);
    let (s, c) = b.center.heading.sin_cos();
    [c * dx + s * dy, -s * dx + c * dy]
}

fn corners(b: &OrientedBox) -> Vec<[f64; 2]> {
    let (s, c) = b.center.heading.sin_cos();
    let (hl, hw) = (0.5 * b.length, 0.5 * b.width);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
        .iter()
        .map(|&(u, v)| [b.center.x + c * u - s * v, b.center.y + s * u + c * v])
        .collect()
}

fn inside(b: &OrientedBox, p: [f64; 2]) -> bool {
    let l = local(b, p);
    l[0].abs() <= 0.5 * b.length && l[1].abs() <= 0.5 * b.width
}

/// Unsigned distance from `p` to the boundary of `b`.
fn boundary_distance(b: &OrientedBox, p: [f64; 2]) -> f64 {
    let l = local(b, p);
    let (ex, ey) = (l[0].abs() - 0.5 * b.length, l[1].abs() - 0.5 * b.width);
    if ex <= 0.0 && ey <= 0.0 {
        (-ex).min(-ey)
    } else {
        ex.max(0.0).hypot(ey.max(0.0))
    }
}

/// Smallest distance from a corner of either box to the other's boundary.
/// Pairs whose overlap region or gap is thinner than the sampling step
/// always have such a corner close to a boundary.
pub fn box_band(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let ab = corners(a).into_iter().map(|p| boundary_distance(b, p));
    let ba = corners(b).into_iter().map(|p| boundary_distance(a, p));
    ab.chain(ba).fold(f64::INFINITY, f64::min)
}

fn grid_points(b: &OrientedBox, step: f64) -> Vec<[f64; 2]> {
    let (s, c) = b.center.heading.sin_cos();
    let nu = (b.length / step).ceil() as usize;
    let nv = (b.width / step).ceil() as usize;
    let mut out = Vec::with_capacity((nu + 1) * (nv + 1));
    for i in 0..=nu {
        let u = -0.5 * b.length + b.length * i as f64 / nu as f64;
        for j in 0..=nv {
            let v = -0.5 * b.width + b.width * j as f64 / nv as f64;
            out.push([b.center.x + c * u - s * v, b.center.y + s * u + c * v]);
        }
    }
    out
}

/// Overlap decided by dense point sampling of both boxes at `step` meters.
pub fn sampled_overlap(a: &OrientedBox, b: &OrientedBox, step: f64) -> bool {
    grid_points(a, step).into_iter().any(|p| inside(b, p)) || grid_points(b, step).into_iter().any(|p| inside(a, p))
}
