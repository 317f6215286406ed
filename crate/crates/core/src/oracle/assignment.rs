use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Largest point count accepted by [`exact_w1_assignment`].
pub const MAX_ASSIGNMENT_N: usize = 10;
/// Up to this size the exhaustive search is used instead of Hungarian.
pub const BRUTE_FORCE_MAX_N: usize = 6;

/// Square matrix of pairwise Euclidean distances between the rows of two
/// point sets.
#[derive(Debug, Clone)]
pub struct AssignmentProblem {
    n: usize,
    cost: Vec<f64>,
}

impl AssignmentProblem {
    pub fn from_points(a: &Tensor, b: &Tensor) -> Result<Self> {
        if a.rank() != 2 || a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "assignment needs two [N×d] sets of equal shape, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let n = a.shape()[0];
        let mut cost = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let d2: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y).powi(2)).sum();
                cost.push(d2.sqrt());
            }
        }
        Ok(Self { n, cost })
    }

    pub fn from_costs(n: usize, cost: Vec<f64>) -> Result<Self> {
        if cost.len() != n * n {
            return Err(Error::Shape("cost matrix must be square".into()));
        }
        if cost.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Usage("costs must be finite and non-negative".into()));
        }
        Ok(Self { n, cost })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cost(&self, i: usize, j: usize) -> f64 {
        self.cost[i * self.n + j]
    }

    fn total(&self, assignment: &[usize]) -> f64 {
        assignment.iter().enumerate().map(|(i, &j)| self.cost(i, j)).sum()
    }

    /// Minimum total cost by enumerating all `n!` matchings.
    pub fn brute_force(&self) -> f64 {
        let mut perm: Vec<usize> = (0..self.n).collect();
        let mut best = self.total(&perm);
        // Heap's algorithm, iterative form
        let mut c = vec![0usize; self.n];
        let mut i = 0;
        while i < self.n {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                best = best.min(self.total(&perm));
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        best
    }

    /// Minimum total cost via the Hungarian method with row/column
    /// potentials, `O(n³)`. Returns the cost and the row → column matching.
    pub fn hungarian(&self) -> (f64, Vec<usize>) {
        let n = self.n;
        if n == 0 {
            return (0.0, Vec::new());
        }
        // 1-based arrays; column 0 is a sentinel
        let mut u = vec![0.0; n + 1];
        let mut v = vec![0.0; n + 1];
        let mut way = vec![0usize; n + 1];
        let mut matched_row = vec![0usize; n + 1];
        for row in 1..=n {
            matched_row[0] = row;
            let mut j0 = 0;
            let mut minv = vec![f64::INFINITY; n + 1];
            let mut used = vec![false; n + 1];
            loop {
                used[j0] = true;
                let i0 = matched_row[j0];
                let mut delta = f64::INFINITY;
                let mut j1 = 0;
                for j in 1..=n {
                    if used[j] {
                        continue;
                    }
                    let cur = self.cost(i0 - 1, j - 1) - u[i0] - v[j];
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
            loop {
                let j1 = way[j0];
                matched_row[j0] = matched_row[j1];
                j0 = j1;
                if j0 == 0 {
                    break;
                }
            }
        }
        let mut assignment = vec![0usize; n];
        for j in 1..=n {
            assignment[matched_row[j] - 1] = j - 1;
        }
        (self.total(&assignment), assignment)
    }
}

/// Exact empirical W1 between the rows of `y_fp` and `y_q` (uniform
/// weights): the minimum mean Euclidean cost over all one-to-one matchings.
pub fn exact_w1_assignment(y_fp: &Tensor, y_q: &Tensor) -> Result<f64> {
    let problem = AssignmentProblem::from_points(y_fp, y_q)?;
    let n = problem.n();
    if n > MAX_ASSIGNMENT_N {
        return Err(Error::Usage(format!(
            "exact assignment limited to N <= {MAX_ASSIGNMENT_N}, got {n}"
        )));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let total = if n <= BRUTE_FORCE_MAX_N {
        problem.brute_force()
    } else {
        problem.hungarian().0
    };
    Ok(total / n as f64)
}
