//! Minimum-cost perfect matching on square cost matrices.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Sum of the matched costs, accumulated in row order.
    pub total: f64,
    /// `assignment[row]` is the column matched to `row`.
    pub assignment: Vec<usize>,
}

/// Hungarian algorithm (shortest augmenting paths with row/column
/// potentials), O(n^3).
pub fn bipartite_match_cost<R: AsRef<[f64]>>(cost: &[R]) -> Result<Matching> {
    let n = cost.len();
    for (i, row) in cost.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != n {
            return Err(Error::InvalidMatrix(format!(
                "row {i} has {} entries, expected {n}",
                row.len()
            )));
        }
        if let Some(j) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidMatrix(format!("entry ({i}, {j}) is not finite")));
        }
    }
    if n == 0 {
        return Ok(Matching {
            total: 0.0,
            assignment: Vec::new(),
        });
    }

    // 1-based columns; column 0 is the virtual start of each augmenting path.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        row_of_col[0] = row;
        let mut col0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = row_of_col[col0];
            let mut delta = f64::INFINITY;
            let mut next = 0usize;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = cost[r - 1].as_ref()[col - 1] - u[r] - v[col];
                if reduced < min_slack[col] {
                    min_slack[col] = reduced;
                    way[col] = col0;
                }
                if min_slack[col] < delta {
                    delta = min_slack[col];
                    next = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[row_of_col[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_slack[col] -= delta;
                }
            }
            col0 = next;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            row_of_col[col0] = row_of_col[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for col in 1..=n {
        assignment[row_of_col[col] - 1] = col - 1;
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(r, &c)| cost[r].as_ref()[c])
        .sum();
    Ok(Matching { total, assignment })
}
