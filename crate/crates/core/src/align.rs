//! Per-timestep alignment of predicted slots to inferred slots.
//!
//! The cost of pairing predicted slot `i` with inferred slot `j` is the
//! matching cost `‖Δwhere‖₁ (+ ‖Δdepth‖₁) − p̂^z (1 − p̂)^(1−z)`. The square
//! assignment problem is solved with the Hungarian method; among optimal
//! assignments the lexicographically smallest one is returned.

use std::fmt::Write as _;

use crate::latents::{LatentFrame, ObjectLatent};
use crate::scalar::Scalar;

pub fn match_cost<S: Scalar>(
    pred: &ObjectLatent<S>,
    inferred: &ObjectLatent<S>,
    include_depth: bool,
) -> S {
    let mut cost: S = pred
        .bbox
        .iter()
        .zip(&inferred.bbox)
        .map(|(&a, &b)| (a - b).abs())
        .sum();
    if include_depth {
        cost += (pred.depth - inferred.depth).abs();
    }
    let p = pred.pres;
    let z = inferred.pres;
    let likelihood = if z == S::one() {
        p
    } else if z == S::zero() {
        S::one() - p
    } else {
        // powf(0, 0) == 1
        p.powf(z) * (S::one() - p).powf(S::one() - z)
    };
    cost - likelihood
}

/// Dense square cost matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n, "cost matrix must be square");
        assert!(data.iter().all(|c| c.is_finite()), "costs must be finite");
        CostMatrix { n, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        CostMatrix::new(n, rows.iter().flat_map(|r| {
            assert_eq!(r.len(), n, "cost matrix must be square");
            r.iter().copied()
        }).collect())
    }

    pub fn between<S: Scalar>(
        pred: &LatentFrame<S>,
        inferred: &LatentFrame<S>,
        include_depth: bool,
    ) -> Self {
        let n = pred.k();
        assert_eq!(n, inferred.k(), "frames must have the same slot count");
        let mut data = Vec::with_capacity(n * n);
        for p in &pred.slots {
            for z in &inferred.slots {
                data.push(match_cost(p, z, include_depth).f64());
            }
        }
        CostMatrix::new(n, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Total cost of `perm`, summed in row order.
    pub fn total(&self, perm: &PermutationMatrix) -> f64 {
        perm.assignment
            .iter()
            .enumerate()
            .map(|(i, &j)| self.get(i, j))
            .sum()
    }

    /// Whitespace-separated grid, one row per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format!("{:.6}", self.get(i, j))).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }
}

/// Permutation stored as `assignment[row] = column`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PermutationMatrix {
    pub assignment: Vec<usize>,
}

impl PermutationMatrix {
    pub fn identity(n: usize) -> Self {
        PermutationMatrix {
            assignment: (0..n).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn entry(&self, i: usize, j: usize) -> u8 {
        u8::from(self.assignment[i] == j)
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        (0..self.n())
            .map(|i| (0..self.n()).map(|j| self.entry(i, j)).collect())
            .collect()
    }

    pub fn is_valid(&self) -> bool {
        let mut seen = vec![false; self.n()];
        self.assignment.iter().all(|&j| j < seen.len() && !std::mem::replace(&mut seen[j], true))
    }
}

/// Minimum-cost assignment; ties resolve to the lexicographically smallest
/// assignment vector.
pub fn hungarian(cost: &CostMatrix) -> PermutationMatrix {
    let n = cost.n;
    if n == 0 {
        return PermutationMatrix { assignment: vec![] };
    }
    let (row_of_col, u, v) = solve_with_potentials(cost);
    let mut col_of_row = vec![0; n];
    for (j, &i) in row_of_col.iter().enumerate() {
        col_of_row[i] = j;
    }

    let scale = cost.data.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale;
    let tight = |i: usize, j: usize| cost.get(i, j) - u[i] - v[j] <= tol;

    lexicographic_matching(n, &tight, col_of_row)
}

/// O(n³) shortest augmenting path with row/column potentials.
///
/// Returns `row_of_col` and the dual potentials; every matched edge has zero
/// reduced cost and all reduced costs are non-negative (up to rounding).
fn solve_with_potentials(cost: &CostMatrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.n;
    // 1-based, index 0 is a virtual column/row
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
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
            for j in 0..=n {
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
    let row_of_col = (1..=n).map(|j| p[j] - 1).collect();
    (row_of_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Lexicographically smallest perfect matching in the tight-edge graph,
/// starting from the perfect matching `col_of_row`.
fn lexicographic_matching(
    n: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    mut col_of_row: Vec<usize>,
) -> PermutationMatrix {
    let mut row_of_col = vec![0; n];
    for (i, &j) in col_of_row.iter().enumerate() {
        row_of_col[j] = i;
    }
    for i in 0..n {
        let current = col_of_row[i];
        for j in 0..current {
            // columns of rows < i are fixed
            if row_of_col[j] < i || !tight(i, j) {
                continue;
            }
            // give j to i; its owner must reach `current` along an alternating path
            let owner = row_of_col[j];
            let mut visited = vec![false; n];
            visited[j] = true;
            let mut path = Vec::new();
            if find_path(owner, current, i, tight, &row_of_col, &mut visited, &mut path) {
                // path: (row, new column) pairs
                for &(r, c) in &path {
                    col_of_row[r] = c;
                    row_of_col[c] = r;
                }
                col_of_row[i] = j;
                row_of_col[j] = i;
                break;
            }
        }
    }
    PermutationMatrix {
        assignment: col_of_row,
    }
}

fn find_path(
    row: usize,
    target: usize,
    fixed_upto: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    row_of_col: &[usize],
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    for c in 0..visited.len() {
        if visited[c] || !tight(row, c) {
            continue;
        }
        if c == target {
            path.push((row, c));
            return true;
        }
        let next = row_of_col[c];
        if next <= fixed_upto {
            continue;
        }
        visited[c] = true;
        if find_path(next, target, fixed_upto, tight, row_of_col, visited, path) {
            path.push((row, c));
            return true;
        }
    }
    false
}

/// Slot `i` of the result is the inferred slot assigned to predicted slot `i`.
pub fn apply_permutation<S: Clone>(perm: &PermutationMatrix, slots: &[S]) -> Vec<S> {
    assert_eq!(perm.n(), slots.len(), "permutation size must match slot count");
    perm.assignment.iter().map(|&j| slots[j].clone()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment<S> {
    pub permutation: PermutationMatrix,
    pub aligned: LatentFrame<S>,
    pub total_cost: f64,
}

/// Cost matrix → Hungarian → permuted inferred frame. Pure value computation;
/// it never touches an autodiff tape.
pub fn align_frame<S: Scalar>(
    pred: &LatentFrame<S>,
    inferred: &LatentFrame<S>,
    include_depth: bool,
) -> Alignment<S> {
    let cost = CostMatrix::between(pred, inferred, include_depth);
    let permutation = hungarian(&cost);
    let total_cost = cost.total(&permutation);
    Alignment {
        aligned: LatentFrame {
            slots: apply_permutation(&permutation, &inferred.slots),
        },
        permutation,
        total_cost,
    }
}
