//! Minimum-cost bipartite assignment.

use crate::error::{Error, Result};

/// Optimal one-to-one assignment between the rows and columns of a
/// rectangular cost matrix. Returns `(row, col)` pairs sorted by row;
/// `min(rows, cols)` pairs are produced.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::shape("hungarian_match", "rows have different lengths"));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("hungarian_match: non-finite cost".into()));
    }
    if n <= m {
        Ok(solve(n, m, |i, j| cost[i][j]))
    } else {
        let mut pairs: Vec<(usize, usize)> = solve(m, n, |i, j| cost[j][i])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        Ok(pairs)
    }
}

/// Shortest augmenting paths with row and column potentials; needs
/// `n <= m`.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) matched to column j; column 0 is a sentinel.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

pub fn assignment_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i][j]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classic_three_by_three() {
        let c = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let p = hungarian_match(&c).unwrap();
        assert_eq!(assignment_cost(&c, &p), 5.0);
        assert_eq!(p, vec![(0, 1), (1, 0), (2, 2)]);
    }

    #[test]
    fn rectangular_both_ways() {
        let c = vec![vec![1.0, 9.0], vec![9.0, 1.0], vec![0.5, 0.4]];
        let p = hungarian_match(&c).unwrap();
        assert_eq!(p.len(), 2);
        assert!((assignment_cost(&c, &p) - 1.4).abs() < 1e-12);
        let t: Vec<Vec<f64>> = (0..2).map(|j| c.iter().map(|r| r[j]).collect()).collect();
        let q = hungarian_match(&t).unwrap();
        assert!((assignment_cost(&t, &q) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn empty_and_invalid() {
        assert!(hungarian_match(&[]).unwrap().is_empty());
        assert!(hungarian_match(&[vec![]]).unwrap().is_empty());
        assert!(hungarian_match(&[vec![f64::NAN]]).is_err());
        assert!(hungarian_match(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
