//! Optimal assignment via the potentials method, `O(n^2 m)`.

use crate::error::{Error, Result};

/// Minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`). Returns `ans[row] = col`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if m < n {
        return Err(Error::contract(format!("{n} rows need at least {n} columns, got {m}")));
    }
    for row in cost {
        if row.len() != m {
            return Err(Error::contract("cost matrix is ragged"));
        }
        if row.iter().any(|c| !c.is_finite()) {
            return Err(Error::domain("cost matrix contains non-finite entries"));
        }
    }

    // 1-based arrays; p[j] is the row matched to column j (0 = free).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
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

    let mut ans = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    debug_assert!(ans.iter().all(|&c| c != usize::MAX));
    Ok(ans)
}

/// Maximum-weight assignment (`rows <= cols`); returns the matching and
/// its total weight.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let negated: Vec<Vec<f64>> =
        weights.iter().map(|row| row.iter().map(|w| -w).collect()).collect();
    let ans = min_cost_assignment(&negated)?;
    let total = ans.iter().enumerate().map(|(i, &j)| weights[i][j]).sum();
    Ok((ans, total))
}
