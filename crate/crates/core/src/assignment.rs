//! Exact linear assignment (minimum-cost perfect matching on a dense square
//! cost matrix).
//!
//! The solver is the Jonker–Volgenant-style shortest augmenting path
//! algorithm with dual potentials, O(n³) time and O(n²) memory. It is exact
//! up to floating-point dual arithmetic, which is what the transport layer
//! needs: distances computed from it must satisfy metric identities to ~1e-9,
//! where an approximate solver would not.
//!
//! A factorial brute-force enumerator is provided for cross-checking small
//! instances in tests.

use crate::{Error, Result};

/// Dense row-major square cost matrix.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("cost matrix must be non-empty".into()));
        }
        if data.len() != n * n {
            return Err(Error::Shape(format!(
                "cost matrix data length {} != {n}x{n}",
                data.len()
            )));
        }
        if data.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain("cost matrix holds non-finite entries".into()));
        }
        Ok(CostMatrix { n, data })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        CostMatrix::new(n, data)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }
}

/// Minimum-cost assignment; `result[i]` is the column matched to row `i`.
pub fn solve(cost: &CostMatrix) -> Vec<usize> {
    let n = cost.n;
    // 1-based internals; index 0 is the virtual unmatched column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row currently matched to column j
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
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
        // Unwind the augmenting path.
        while j0 != 0 {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        }
    }

    let mut result = vec![0usize; n];
    for j in 1..=n {
        result[p[j] - 1] = j - 1;
    }
    result
}

/// Total cost of an assignment. Pair costs are sorted before summation so the
/// value is bit-identical under any reordering of equal-cost pairs (summation
/// order independence matters for exact symmetry checks).
pub fn assignment_cost(cost: &CostMatrix, assignment: &[usize]) -> f64 {
    let mut pair_costs: Vec<f64> =
        assignment.iter().enumerate().map(|(i, &j)| cost.at(i, j)).collect();
    pair_costs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pair_costs.iter().sum()
}

/// Exhaustive minimum over all permutations; O(n!) — for n ≲ 9 only.
pub fn brute_force(cost: &CostMatrix) -> (Vec<usize>, f64) {
    let n = cost.n;
    assert!(n <= 9, "brute force assignment is factorial; use solve()");
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = assignment_cost(cost, &perm);
    // Heap's algorithm.
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let total = assignment_cost(cost, &perm);
            if total < best_cost {
                best_cost = total;
                best = perm.clone();
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    (best, best_cost)
}
