//! Dense linear assignment (Hungarian method with potentials, O(n²m)).

use crate::error::{Error, Result};

/// Minimum-cost assignment on a row-major `rows × cols` cost matrix.
///
/// Returns one `(row, col)` pair per row of the smaller dimension, sorted by
/// row. Every row (or every column when `rows > cols`) is assigned exactly
/// once.
pub fn linear_assignment(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<(usize, usize)>> {
    if cost.len() != rows * cols {
        return Err(Error::DimensionMismatch(format!(
            "cost matrix has {} entries, expected {rows}x{cols}",
            cost.len()
        )));
    }
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    if let Some(bad) = cost.iter().find(|c| !c.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite assignment cost {bad}")));
    }
    if rows <= cols {
        let cols_of_row = solve_short(cost, rows, cols, false);
        Ok(cols_of_row.into_iter().enumerate().collect())
    } else {
        let rows_of_col = solve_short(cost, cols, rows, true);
        let mut pairs: Vec<(usize, usize)> = rows_of_col.into_iter().enumerate().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        Ok(pairs)
    }
}

/// Solves with `n ≤ m`. When `transposed`, entry `(i, j)` is read from
/// `cost[j * n + i]`.
fn solve_short(cost: &[f64], n: usize, m: usize, transposed: bool) -> Vec<usize> {
    let at = |i: usize, j: usize| -> f64 {
        if transposed {
            cost[j * n + i]
        } else {
            cost[i * m + j]
        }
    };
    // 1-based potentials; column 0 is a virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![f64::INFINITY; m + 1];
    let mut used = vec![false; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let ui0 = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - ui0 - v[j];
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

    let mut result = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            result[p[j] - 1] = j - 1;
        }
    }
    result
}
