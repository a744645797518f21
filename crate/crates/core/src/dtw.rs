//! Hard DTW, Soft-DTW forward/backward and an exhaustive path oracle.
//!
//! Boundary convention for every recursion in this module: the virtual
//! predecessor of cell `(1, 1)` has cumulative cost 0 and every other
//! out-of-range predecessor is `+inf`, so `r(1, 1) = δ(1, 1)` and every path
//! starts at `(1, 1)` and ends at `(n, m)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Largest side length accepted by [`dtw_bruteforce`].
pub const BRUTEFORCE_MAX_SIDE: usize = 12;

/// Soft minimum `-γ log Σ exp(-a_i / γ)`, exact `min` at `γ = 0`.
///
/// `+inf` entries carry zero weight; if every entry is `+inf` the result is `+inf`.
pub fn softmin(values: &[f64], gamma: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Argument("softmin of an empty set".into()));
    }
    if gamma.is_nan() || gamma < 0.0 {
        return Err(Error::Argument(format!("softmin requires γ >= 0, got {gamma}")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmin received NaN".into()));
    }
    Ok(softmin_unchecked(values, gamma))
}

pub(crate) fn softmin_unchecked(values: &[f64], gamma: f64) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    if gamma == 0.0 || lo == f64::INFINITY || lo == f64::NEG_INFINITY {
        return lo;
    }
    let s: f64 = values
        .iter()
        .filter(|v| v.is_finite())
        .map(|&v| (-(v - lo) / gamma).exp())
        .sum();
    lo - gamma * s.ln()
}

#[inline]
pub(crate) fn softmin3(a: f64, b: f64, c: f64, gamma: f64) -> f64 {
    softmin_unchecked(&[a, b, c], gamma)
}

/// A monotone alignment path, stored as 1-based `(i, j)` pairs from `(1, 1)` to `(n, m)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPath(pub Vec<(usize, usize)>);

impl AlignmentPath {
    pub fn steps(&self) -> &[(usize, usize)] {
        &self.0
    }

    /// Checks start, end and the three allowed moves.
    pub fn is_valid(&self, n: usize, m: usize) -> bool {
        let s = &self.0;
        if s.first() != Some(&(1, 1)) || s.last() != Some(&(n, m)) {
            return false;
        }
        s.windows(2).all(|w| {
            let (di, dj) = (w[1].0 as isize - w[0].0 as isize, w[1].1 as isize - w[0].1 as isize);
            matches!((di, dj), (1, 0) | (0, 1) | (1, 1))
        })
    }

    /// Sum of `delta` along the path, accumulated from `(1, 1)` onwards.
    pub fn cost(&self, delta: &Matrix) -> f64 {
        self.0
            .iter()
            .fold(0.0, |acc, &(i, j)| acc + delta.get(i - 1, j - 1))
    }
}

/// Cumulative cost table `R` (n x m) and the smoothing parameter that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DpTables {
    pub r: Matrix,
    pub gamma: f64,
}

impl DpTables {
    pub fn cost(&self) -> f64 {
        self.r.get(self.r.rows() - 1, self.r.cols() - 1)
    }
}

fn check_input(delta: &Matrix) -> Result<()> {
    if delta.rows() == 0 || delta.cols() == 0 {
        return Err(Error::Argument("empty distance matrix".into()));
    }
    if let Some((i, j)) = delta.find_nan() {
        return Err(Error::Numeric(format!("NaN distance at ({}, {})", i + 1, j + 1)));
    }
    Ok(())
}

/// Cumulative-cost recursion shared by hard DTW (`γ = 0`) and Soft-DTW.
pub(crate) fn soft_dp(delta: &Matrix, gamma: f64) -> Result<Matrix> {
    check_input(delta)?;
    let (n, m) = delta.shape();
    let mut r = Matrix::zeros(n, m);
    let at = |r: &Matrix, i: usize, j: usize| -> f64 {
        // (i, j) are 1-based into the padded table
        match (i, j) {
            (0, 0) => 0.0,
            (0, _) | (_, 0) => f64::INFINITY,
            _ => r.get(i - 1, j - 1),
        }
    };
    for i in 1..=n {
        for j in 1..=m {
            let prev = softmin3(at(&r, i - 1, j), at(&r, i, j - 1), at(&r, i - 1, j - 1), gamma);
            let v = delta.get(i - 1, j - 1) + prev;
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "cumulative cost at ({i}, {j}) is {v}"
                )));
            }
            r.set(i - 1, j - 1, v);
        }
    }
    Ok(r)
}

/// Reverse recursion `∂r(n,m) / ∂r(i,j)` for a table produced by [`soft_dp`] with `γ > 0`.
///
/// Since `∂r(i,j)/∂δ(i,j) = 1`, this is also the gradient with respect to `delta`.
pub(crate) fn soft_dp_grad(delta: &Matrix, r: &Matrix, gamma: f64) -> Matrix {
    let (n, m) = delta.shape();
    let mut e = Matrix::zeros(n, m);
    e.set(n - 1, m - 1, 1.0);
    // weight of edge (i,j) -> (k,l): exp((softmin of (k,l)'s predecessors - r(i,j)) / γ),
    // where that softmin equals r(k,l) - δ(k,l)
    let edge = |i: usize, j: usize, k: usize, l: usize| -> f64 {
        ((r.get(k, l) - delta.get(k, l) - r.get(i, j)) / gamma).exp()
    };
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            if i == n - 1 && j == m - 1 {
                continue;
            }
            let mut acc = 0.0;
            if i + 1 < n {
                acc += e.get(i + 1, j) * edge(i, j, i + 1, j);
            }
            if j + 1 < m {
                acc += e.get(i, j + 1) * edge(i, j, i, j + 1);
            }
            if i + 1 < n && j + 1 < m {
                acc += e.get(i + 1, j + 1) * edge(i, j, i + 1, j + 1);
            }
            e.set(i, j, acc);
        }
    }
    e
}

/// Exact DTW by dynamic programming.
pub fn dtw(delta: &Matrix) -> Result<(f64, DpTables)> {
    let r = soft_dp(delta, 0.0)?;
    let tables = DpTables { r, gamma: 0.0 };
    Ok((tables.cost(), tables))
}

/// Backtracks one minimum-cost path through hard-DTW tables, preferring the
/// diagonal, then the cell above, on ties.
pub fn optimal_path(tables: &DpTables) -> AlignmentPath {
    let r = &tables.r;
    let (mut i, mut j) = (r.rows() - 1, r.cols() - 1);
    let mut steps = vec![(i + 1, j + 1)];
    while (i, j) != (0, 0) {
        let mut options = Vec::with_capacity(3);
        if i > 0 && j > 0 {
            options.push((i - 1, j - 1));
        }
        if i > 0 {
            options.push((i - 1, j));
        }
        if j > 0 {
            options.push((i, j - 1));
        }
        let mut best = options[0];
        for &c in &options[1..] {
            if r.get(c.0, c.1) < r.get(best.0, best.1) {
                best = c;
            }
        }
        (i, j) = best;
        steps.push((i + 1, j + 1));
    }
    steps.reverse();
    AlignmentPath(steps)
}

/// Soft-DTW forward pass.
pub fn softdtw_forward(delta: &Matrix, gamma: f64) -> Result<(f64, DpTables)> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Argument(format!("Soft-DTW requires γ > 0, got {gamma}")));
    }
    let r = soft_dp(delta, gamma)?;
    let tables = DpTables { r, gamma };
    Ok((tables.cost(), tables))
}

/// Soft-DTW gradient matrix `M`, `μ(i,j) = ∂r(n,m)/∂δ(i,j)`.
pub fn softdtw_backward(delta: &Matrix, tables: &DpTables, gamma: f64) -> Result<Matrix> {
    if delta.shape() != tables.r.shape() {
        return Err(Error::Shape {
            expected: delta.shape(),
            actual: tables.r.shape(),
        });
    }
    if !(gamma > 0.0) {
        return Err(Error::Argument(format!("Soft-DTW requires γ > 0, got {gamma}")));
    }
    let e = soft_dp_grad(delta, &tables.r, gamma);
    if !e.all_finite() {
        return Err(Error::Numeric("Soft-DTW gradient is not finite".into()));
    }
    Ok(e)
}

/// Exhaustive minimum over all monotone paths. Ties go to the lexicographically smallest path.
pub fn dtw_bruteforce(delta: &Matrix) -> Result<(f64, AlignmentPath)> {
    check_input(delta)?;
    let (n, m) = delta.shape();
    let side = n.max(m);
    if side > BRUTEFORCE_MAX_SIDE {
        return Err(Error::Size {
            what: "brute-force DTW side length",
            actual: side as u128,
            limit: BRUTEFORCE_MAX_SIDE as u128,
        });
    }

    struct Search<'a> {
        delta: &'a Matrix,
        n: usize,
        m: usize,
        stack: Vec<(usize, usize)>,
        best: f64,
        best_path: Vec<(usize, usize)>,
    }

    impl Search<'_> {
        fn visit(&mut self, i: usize, j: usize, acc: f64) {
            let acc = acc + self.delta.get(i, j);
            self.stack.push((i + 1, j + 1));
            if i + 1 == self.n && j + 1 == self.m {
                // paths are visited in lexicographic order, so only strict improvements replace
                if acc < self.best {
                    self.best = acc;
                    self.best_path.clone_from(&self.stack);
                }
            } else {
                // lexicographic order of the next pair: right, down, diagonal
                if j + 1 < self.m {
                    self.visit(i, j + 1, acc);
                }
                if i + 1 < self.n {
                    self.visit(i + 1, j, acc);
                }
                if i + 1 < self.n && j + 1 < self.m {
                    self.visit(i + 1, j + 1, acc);
                }
            }
            self.stack.pop();
        }
    }

    let mut search = Search {
        delta,
        n,
        m,
        stack: Vec::with_capacity(n + m),
        best: f64::INFINITY,
        best_path: Vec::new(),
    };
    search.visit(0, 0, 0.0);
    Ok((search.best, AlignmentPath(search.best_path)))
}
