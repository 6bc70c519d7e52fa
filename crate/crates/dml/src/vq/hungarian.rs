//! Rectangular minimum-cost assignment (captions to codebook entries).
//!
//! `n` rows are matched injectively into `k >= n` columns minimizing the
//! total cost. Among cost-minimal assignments (equality taken as exact f64
//! equality of the row-order cost sum) the lexicographically smallest column
//! sequence is returned, so equal-cost instances resolve deterministically.

use super::VqError;
use crate::scalar::Scalar;

/// Shortest-augmenting-path assignment with row/column potentials.
/// Assumes a validated rectangular matrix (`n <= k`, finite costs).
fn shortest_path_assign<S: Scalar>(costs: &[Vec<S>]) -> Vec<usize> {
    let n = costs.len();
    let k = costs[0].len();
    let inf = S::infinity();
    let mut u = vec![S::zero(); n];
    // v and col_row use index k as the virtual start column.
    let mut v = vec![S::zero(); k + 1];
    let mut col_row: Vec<Option<usize>> = vec![None; k + 1];
    for row in 0..n {
        col_row[k] = Some(row);
        let mut j0 = k;
        let mut min_to = vec![inf; k];
        let mut prev = vec![k; k];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0].expect("visited column is matched");
            let mut delta = inf;
            let mut j1 = k;
            for j in 0..k {
                if used[j] {
                    continue;
                }
                let cur = costs[i0][j] - u[i0] - v[j];
                if cur < min_to[j] {
                    min_to[j] = cur;
                    prev[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    if let Some(r) = col_row[j] {
                        u[r] += delta;
                    }
                    v[j] -= delta;
                } else if j < k {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0].is_none() {
                break;
            }
        }
        // Augment along the alternating path back to the virtual column.
        while j0 != k {
            let j1 = prev[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
        }
    }
    let mut row_col = vec![0usize; n];
    for j in 0..k {
        if let Some(r) = col_row[j] {
            row_col[r] = j;
        }
    }
    row_col
}

/// Total cost of an assignment summed in row order (the canonical order for
/// exact-equality comparisons).
pub fn assignment_cost<S: Scalar>(costs: &[Vec<S>], assignment: &[usize]) -> S {
    let mut total = S::zero();
    for (row, &col) in assignment.iter().enumerate() {
        total += costs[row][col];
    }
    total
}

fn validate<S: Scalar>(costs: &[Vec<S>]) -> Result<(usize, usize), VqError> {
    let n = costs.len();
    if n == 0 {
        return Ok((0, 0));
    }
    let k = costs[0].len();
    if k == 0 || costs.iter().any(|r| r.len() != k) {
        return Err(VqError::BadCosts);
    }
    if n > k {
        return Err(VqError::TooManyRows { n, k });
    }
    if costs.iter().flatten().any(|c| !c.is_finite()) {
        return Err(VqError::NonFiniteCost);
    }
    Ok((n, k))
}

/// Minimum-cost injective assignment of each row to a distinct column.
///
/// Returns `assignment[row] = column`. Requires `n <= k`; every row is
/// matched. Ties on total cost break toward the lexicographically smallest
/// column sequence by sequentially fixing the cheapest-achieving column per
/// row, verified through exact re-solves of the remaining subproblem.
pub fn hungarian_assign<S: Scalar>(costs: &[Vec<S>]) -> Result<Vec<usize>, VqError> {
    let (n, k) = validate(costs)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut witness = shortest_path_assign(costs);
    let mut best_total = assignment_cost(costs, &witness);
    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut used = vec![false; k];
    for row in 0..n {
        let mut prefix = S::zero();
        for (r, &c) in fixed.iter().enumerate() {
            prefix += costs[r][c];
        }
        for cand in 0..witness[row] {
            if used[cand] {
                continue;
            }
            // Solve the completion for rows below with this column taken.
            let free_cols: Vec<usize> = (0..k)
                .filter(|&j| !used[j] && j != cand)
                .collect();
            let tail_rows = n - row - 1;
            let completion: Vec<usize> = if tail_rows == 0 {
                Vec::new()
            } else {
                let sub: Vec<Vec<S>> = (row + 1..n)
                    .map(|r| free_cols.iter().map(|&j| costs[r][j]).collect())
                    .collect();
                shortest_path_assign(&sub)
                    .into_iter()
                    .map(|local| free_cols[local])
                    .collect()
            };
            let mut total = prefix + costs[row][cand];
            for (offset, &c) in completion.iter().enumerate() {
                total += costs[row + 1 + offset][c];
            }
            if total <= best_total {
                best_total = total;
                witness[row] = cand;
                for (offset, &c) in completion.iter().enumerate() {
                    witness[row + 1 + offset] = c;
                }
                break;
            }
        }
        used[witness[row]] = true;
        fixed.push(witness[row]);
    }
    Ok(witness)
}
