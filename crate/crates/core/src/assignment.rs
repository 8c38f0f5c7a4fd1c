//! Rectangular linear assignment (Hungarian method with potentials).

use crate::scalar::Real;

/// Minimum-cost assignment for a `rows x cols` cost matrix.
///
/// Every row is assigned when `rows <= cols`, every column otherwise. The
/// result maps each row to its column, or `None`.
pub fn min_cost_assignment<T: Real>(cost: &[Vec<T>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = cost[0].len();
    if cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let transposed: Vec<Vec<T>> = (0..cols)
            .map(|c| (0..rows).map(|r| cost[r][c]).collect())
            .collect();
        let col_to_row = min_cost_assignment(&transposed);
        let mut out = vec![None; rows];
        for (c, r) in col_to_row.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return out;
    }

    // 1-based potentials formulation; column 0 is a virtual sink.
    let n = rows;
    let m = cols;
    let inf = T::infinity();
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
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
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Maximum-weight partial matching over non-negative weights. Entries that
/// are `None` are inadmissible. Only pairs with positive weight are
/// returned, as `(row, col)` sorted by row.
pub fn max_weight_matching<T: Real>(weights: &[Vec<Option<T>>]) -> Vec<(usize, usize)> {
    let rows = weights.len();
    if rows == 0 || weights[0].is_empty() {
        return Vec::new();
    }
    let cols = weights[0].len();
    // Padding with zero-weight dummy columns makes the square formulation
    // equivalent to a partial matching.
    let cost: Vec<Vec<T>> = (0..rows)
        .map(|r| {
            (0..cols + rows)
                .map(|c| {
                    if c < cols {
                        -weights[r][c].unwrap_or(T::zero())
                    } else {
                        T::zero()
                    }
                })
                .collect()
        })
        .collect();
    let assignment = min_cost_assignment(&cost);
    let mut pairs: Vec<(usize, usize)> = assignment
        .into_iter()
        .enumerate()
        .filter_map(|(r, c)| c.filter(|&c| c < cols).map(|c| (r, c)))
        .filter(|&(r, c)| weights[r][c].is_some_and(|w| w > T::zero()))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Total weight of a matching, summed in row order.
pub fn matching_weight<T: Real>(weights: &[Vec<Option<T>>], pairs: &[(usize, usize)]) -> T {
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    sorted
        .iter()
        .map(|&(r, c)| weights[r][c].unwrap_or(T::zero()))
        .fold(T::zero(), |a, b| a + b)
}

/// Maximum-weight matching with ties broken toward the lexicographically
/// smallest `(row, col)` pair list.
///
/// Rows are fixed one at a time to the smallest column that still admits an
/// optimal completion (within a relative `1e-12` of the optimum).
pub fn max_weight_matching_lex<T: Real>(weights: &[Vec<Option<T>>]) -> Vec<(usize, usize)> {
    let rows = weights.len();
    if rows == 0 || weights[0].is_empty() {
        return Vec::new();
    }
    let cols = weights[0].len();
    let best = matching_weight(weights, &max_weight_matching(weights));
    let tol = T::lit(1e-12) * best.abs().max(T::one());

    let mut fixed: Vec<(usize, usize)> = Vec::new();
    let mut fixed_weight = T::zero();
    let mut row_done = vec![false; rows];
    let mut col_used = vec![false; cols];
    for r in 0..rows {
        row_done[r] = true;
        let mut chosen = None;
        for c in 0..cols {
            if col_used[c] {
                continue;
            }
            let Some(w) = weights[r][c].filter(|w| *w > T::zero()) else {
                continue;
            };
            col_used[c] = true;
            let rest = restricted(weights, &row_done, &col_used);
            let rest_best = matching_weight(&rest, &max_weight_matching(&rest));
            col_used[c] = false;
            if fixed_weight + w + rest_best >= best - tol {
                chosen = Some((c, w));
                break;
            }
        }
        if let Some((c, w)) = chosen {
            col_used[c] = true;
            fixed_weight += w;
            fixed.push((r, c));
        }
    }
    fixed
}

fn restricted<T: Real>(
    weights: &[Vec<Option<T>>],
    row_blocked: &[bool],
    col_blocked: &[bool],
) -> Vec<Vec<Option<T>>> {
    weights
        .iter()
        .enumerate()
        .map(|(r, row)| {
            row.iter()
                .enumerate()
                .map(|(c, w)| if row_blocked[r] || col_blocked[c] { None } else { *w })
                .collect()
        })
        .collect()
}
