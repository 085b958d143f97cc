use crate::error::{Error, Result};

/// A minimum-cost injection of rows into columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, column)`, one per row, sorted by row.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the chosen entries, accumulated in row order.
    pub cost: f64,
}

/// Solves the rectangular assignment problem for `cost` (`n` rows of `m`
/// entries, `n ≤ m`) by shortest augmenting paths with dual potentials,
/// in `O(n²m)`.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    if n == 0 {
        return Ok(Assignment { pairs: Vec::new(), cost: 0.0 });
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Usage("cost matrix rows have different lengths".into()));
    }
    if n > m {
        return Err(Error::Usage(format!(
            "cost matrix has more rows ({n}) than columns ({m}); pad the columns"
        )));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Domain("cost matrix contains a non-finite entry".into()));
    }
    // 1-based: column 0 is the virtual start of each augmenting path
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
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    let cost = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
    Ok(Assignment { pairs, cost })
}
