//! Dense optimal bipartite assignment (Hungarian algorithm with potentials,
//! O(n^2 m)). Shared by frame association and metric matching, which both
//! need exact optima on small dense score matrices.

/// Row-major view of a rows x cols cost/score matrix.
#[derive(Debug, Clone)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        assert!(data.iter().all(|v| v.is_finite()), "assignment costs must be finite");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn transposed(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.at(j, i))
    }
}

/// Minimum-total-cost assignment. Every row is matched when rows <= cols,
/// every column when cols <= rows; the rest stay `None`.
pub fn min_cost_assignment(cost: &Matrix) -> Vec<Option<usize>> {
    if cost.rows == 0 || cost.cols == 0 {
        return vec![None; cost.rows];
    }
    if cost.rows > cost.cols {
        let inv = solve_rows_le_cols(&cost.transposed());
        let mut out = vec![None; cost.rows];
        for (col, row) in inv.into_iter().enumerate() {
            out[row] = Some(col);
        }
        return out;
    }
    solve_rows_le_cols(cost).into_iter().map(Some).collect()
}

/// Maximum-total-score assignment (negated minimization).
pub fn max_score_assignment(score: &Matrix) -> Vec<Option<usize>> {
    let neg = Matrix::new(
        score.rows,
        score.cols,
        score.data.iter().map(|v| -v).collect(),
    );
    min_cost_assignment(&neg)
}

/// Among equal-total assignments, canonicalize so that lower row indices take
/// lower column indices. Swaps pairs only when the exchange keeps the total
/// exactly equal, so the optimum is untouched.
pub fn refine_ties_lexicographic(assignment: &mut [Option<usize>], score: &Matrix) {
    loop {
        let mut changed = false;
        for i1 in 0..assignment.len() {
            let Some(j1) = assignment[i1] else { continue };
            for i2 in (i1 + 1)..assignment.len() {
                let Some(j2) = assignment[i2] else { continue };
                if j2 < j1
                    && score.at(i1, j1) + score.at(i2, j2) == score.at(i1, j2) + score.at(i2, j1)
                {
                    assignment[i1] = Some(j2);
                    assignment[i2] = Some(j1);
                    changed = true;
                }
            }
        }
        if !changed {
            return;
        }
    }
}

/// Potentials-based shortest augmenting path; requires rows <= cols and
/// returns a complete row -> col matching. Indices are 1-based internally
/// with column 0 as the virtual start of each augmenting search.
fn solve_rows_le_cols(cost: &Matrix) -> Vec<usize> {
    let n = cost.rows;
    let m = cost.cols;
    debug_assert!(n <= m);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut matched_row = vec![0usize; m + 1]; // 0 = free column
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        // Unwind the augmenting path.
        while j0 != 0 {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
        }
    }

    let mut out = vec![usize::MAX; n];
    for j in 1..=m {
        if matched_row[j] != 0 {
            out[matched_row[j] - 1] = j - 1;
        }
    }
    debug_assert!(out.iter().all(|&j| j != usize::MAX));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive minimum over all row -> column injections.
    fn brute_force_min(cost: &Matrix) -> f64 {
        fn rec(cost: &Matrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.rows() {
                if acc < *best {
                    *best = acc;
                }
                return;
            }
            if cost.rows() <= cost.cols() {
                for j in 0..cost.cols() {
                    if !used[j] {
                        used[j] = true;
                        rec(cost, row + 1, used, acc + cost.at(row, j), best);
                        used[j] = false;
                    }
                }
            } else {
                // More rows than columns: rows may stay unassigned.
                rec(cost, row + 1, used, acc, best);
                for j in 0..cost.cols() {
                    if !used[j] {
                        used[j] = true;
                        rec(cost, row + 1, used, acc + cost.at(row, j), best);
                        used[j] = false;
                    }
                }
            }
        }
        let mut best = f64::INFINITY;
        let mut used = vec![false; cost.cols()];
        rec(cost, 0, &mut used, 0.0, &mut best);
        best
    }

    fn total(cost: &Matrix, assignment: &[Option<usize>]) -> f64 {
        assignment
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| cost.at(i, j)))
            .sum()
    }

    #[test]
    fn square_known_case() {
        let cost = Matrix::new(3, 3, vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]);
        let a = min_cost_assignment(&cost);
        assert_eq!(a, vec![Some(1), Some(0), Some(2)]);
        assert_eq!(total(&cost, &a), 5.0);
    }

    #[test]
    fn rectangular_wide() {
        let cost = Matrix::new(2, 3, vec![10.0, 2.0, 9.0, 3.0, 7.0, 1.0]);
        let a = min_cost_assignment(&cost);
        assert_eq!(total(&cost, &a), 3.0);
        assert_eq!(a, vec![Some(1), Some(2)]);
    }

    #[test]
    fn rectangular_tall_leaves_rows_unassigned() {
        let cost = Matrix::new(3, 1, vec![5.0, 1.0, 3.0]);
        let a = min_cost_assignment(&cost);
        assert_eq!(a, vec![None, Some(0), None]);
    }

    #[test]
    fn maximization_crossed() {
        let score = Matrix::new(2, 2, vec![0.9, 0.7, 0.7, 0.9]);
        let a = max_score_assignment(&score);
        assert_eq!(a, vec![Some(0), Some(1)]);
    }

    #[test]
    fn tie_refinement_prefers_low_indices() {
        let score = Matrix::new(2, 2, vec![0.5, 0.5, 0.5, 0.5]);
        let mut a = vec![Some(1), Some(0)];
        refine_ties_lexicographic(&mut a, &score);
        assert_eq!(a, vec![Some(0), Some(1)]);
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            rows in 1usize..6,
            cols in 1usize..6,
            seed in proptest::collection::vec(-10.0f64..10.0, 36),
        ) {
            let cost = Matrix::from_fn(rows, cols, |i, j| seed[i * 6 + j]);
            let a = min_cost_assignment(&cost);
            let assigned = a.iter().filter(|x| x.is_some()).count();
            prop_assert_eq!(assigned, rows.min(cols));
            // One-to-one.
            let mut seen = std::collections::HashSet::new();
            for j in a.iter().flatten() {
                prop_assert!(seen.insert(*j));
            }
            // Optimal. Note brute force allows skipping rows in the tall case,
            // which can only help, so the solver total must not exceed it plus
            // a tolerance for accumulated potential arithmetic.
            if rows <= cols {
                let best = brute_force_min(&cost);
                prop_assert!((total(&cost, &a) - best).abs() < 1e-9);
            }
        }
    }
}
