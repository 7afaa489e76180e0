//! Minimum-cost bipartite matching of ground-truth segments to queries.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(segment, query)` pairs ordered by segment.
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

impl Assignment {
    pub fn query_of(&self, segment: usize) -> usize {
        self.pairs[segment].1
    }
}

/// Solves the assignment problem for a row-major `[queries × segments]`
/// cost matrix with `segments ≤ queries`.
///
/// Shortest augmenting paths with dual potentials, `O(G²·N)`. Among equal
/// reduced costs the lowest query index is taken first.
pub fn hungarian_match(cost: &[f64], queries: usize, segments: usize) -> Result<Assignment> {
    if cost.len() != queries * segments {
        return Err(Error::Shape(format!(
            "cost matrix has {} entries, expected {queries}x{segments}",
            cost.len()
        )));
    }
    if segments > queries {
        return Err(Error::TooManySegments { segments, queries });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Shape("cost matrix contains non-finite entries".into()));
    }
    let (n, m) = (segments, queries);
    let a = |i: usize, j: usize| cost[j * segments + i];
    // 1-based: row 0 / column 0 are the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
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
    let total = pairs.iter().map(|&(i, j)| a(i, j)).sum();
    Ok(Assignment { pairs, total })
}
