//! Minimum-cost rectangular assignment.

use crate::error::{CoreError, Result};

/// Optimal assignment of each row to a distinct column of an `n x m` matrix, `n <= m`.
///
/// Shortest augmenting paths with dual potentials, `O(n^2 m)`. Among
/// several optimal assignments an arbitrary one is returned; use
/// [`hungarian`] for the lexicographically smallest.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(CoreError::Invalid("cost matrix rows differ in length".into()));
    }
    if n > m {
        return Err(CoreError::TooManyRows { rows: n, cols: m });
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CoreError::Invalid("cost matrix has non-finite entries".into()));
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
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
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// Total cost of `assignment`, summed in row order.
pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Optimal assignment with ties broken toward the lexicographically smallest column vector.
///
/// Rows are fixed in order to the smallest column that still admits an
/// optimal completion (within `1e-9 · (1 + |optimum|)`).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let first = min_cost_assignment(cost)?;
    let n = cost.len();
    if n == 0 {
        return Ok(first);
    }
    let m = cost[0].len();
    let optimum = assignment_cost(cost, &first);
    let tol = 1e-9 * (1.0 + optimum.abs());
    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut fixed_cost = 0.0;
    for i in 0..n {
        let mut chosen = None;
        for j in (0..m).filter(|j| !fixed.contains(j)) {
            let free_cols: Vec<usize> = (0..m).filter(|c| *c != j && !fixed.contains(c)).collect();
            let sub: Vec<Vec<f64>> = cost[i + 1..]
                .iter()
                .map(|row| free_cols.iter().map(|&c| row[c]).collect())
                .collect();
            let rest = min_cost_assignment(&sub)?;
            let total = fixed_cost + cost[i][j] + assignment_cost(&sub, &rest);
            if total <= optimum + tol {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.unwrap_or(first[i]);
        fixed_cost += cost[i][j];
        fixed.push(j);
    }
    Ok(fixed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let c = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        let a = hungarian(&c).unwrap();
        assert_eq!(a, vec![1, 0]);
        assert_eq!(assignment_cost(&c, &a), 4.0);
    }

    #[test]
    fn diagonal_zero() {
        let c: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 0.0 } else { 1.0 + (i * j) as f64 }).collect())
            .collect();
        assert_eq!(hungarian(&c).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn lexicographic_ties() {
        let c = vec![vec![1.0; 3]; 3];
        assert_eq!(hungarian(&c).unwrap(), vec![0, 1, 2]);
        let c = vec![vec![0.0, 0.0, 5.0], vec![0.0, 0.0, 5.0]];
        assert_eq!(hungarian(&c).unwrap(), vec![0, 1]);
    }

    #[test]
    fn rectangular_and_errors() {
        let c = vec![vec![5.0, 1.0, 3.0]];
        assert_eq!(hungarian(&c).unwrap(), vec![1]);
        let tall = vec![vec![1.0], vec![2.0]];
        assert!(matches!(hungarian(&tall), Err(CoreError::TooManyRows { rows: 2, cols: 1 })));
        assert!(hungarian(&[vec![f64::NAN]]).is_err());
        assert!(hungarian(&[]).unwrap().is_empty());
    }
}
