//! Generators, distributions, tangent vectors, and the Markov semigroup.
//!
//! Conventions: distributions are strictly positive row vectors summing to 1
//! (the interior of the probability simplex), the generator acts on the right
//! (`μ ↦ μ e^{tQ}`), and tangent vectors are zero-sum row vectors.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::flowsim::Trajectory;
use crate::linalg;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("matrix must be square with at least 2 states, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("negative off-diagonal rate at ({i},{j})")]
    NegativeOffDiagonal { i: usize, j: usize },
    #[error("row {i} does not sum to zero (sum {sum:e})")]
    RowSumNonzero { i: usize, sum: f64 },
    #[error("chain is not irreducible")]
    NotIrreducible,
    #[error("zero generator has no uniformization")]
    ZeroGenerator,
    #[error("distribution entries must be strictly positive")]
    NotPositive,
    #[error("distribution entries sum to {sum}, expected 1")]
    NotNormalized { sum: f64 },
    #[error("tangent vector entries sum to {sum:e}, expected 0")]
    NotZeroSum { sum: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
}

/// Rate matrix of a continuous-time Markov chain in the row convention:
/// `Q[i][j]` for `i != j` is the jump rate from state `i` to state `j`,
/// diagonal entries make each row sum to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    rates: DMatrix<f64>,
}

impl Generator {
    /// Validates the generator invariants: nonnegative off-diagonal rates and
    /// row sums within `1e-12 * max|Q|` of zero. Row sums inside tolerance are
    /// snapped to exact zero by adjusting the diagonal (JSON inputs carry
    /// decimal round-off).
    pub fn new(raw: DMatrix<f64>) -> Result<Self, MarkovError> {
        let n = raw.nrows();
        if raw.ncols() != n || n < 2 {
            return Err(MarkovError::NotSquare {
                rows: raw.nrows(),
                cols: raw.ncols(),
            });
        }
        for i in 0..n {
            for j in 0..n {
                if i != j && raw[(i, j)] < 0.0 {
                    return Err(MarkovError::NegativeOffDiagonal { i, j });
                }
            }
        }
        let scale = linalg::max_abs(&raw);
        let tol = 1e-12 * scale;
        let mut rates = raw;
        for i in 0..n {
            let sum = rates.row(i).sum();
            if sum.abs() > tol {
                return Err(MarkovError::RowSumNonzero { i, sum });
            }
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| rates[(i, j)]).sum();
            rates[(i, i)] = -off;
        }
        Ok(Self { rates })
    }

    pub fn n_states(&self) -> usize {
        self.rates.nrows()
    }

    pub fn rates(&self) -> &DMatrix<f64> {
        &self.rates
    }

    pub fn max_abs(&self) -> f64 {
        linalg::max_abs(&self.rates)
    }
}

/// Strictly positive probability row vector; a point in the interior of the
/// simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    mass: DVector<f64>,
}

impl Distribution {
    /// Strict constructor: positive entries, sum within 1e-12 of 1.
    pub fn new(mass: DVector<f64>) -> Result<Self, MarkovError> {
        if mass.iter().any(|&x| x <= 0.0) {
            return Err(MarkovError::NotPositive);
        }
        let sum = mass.sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(MarkovError::NotNormalized { sum });
        }
        Ok(Self { mass })
    }

    /// Accepts sum drift up to `tol` and renormalizes exactly. Used for
    /// numerically evolved states.
    pub fn new_renormalized(mass: DVector<f64>, tol: f64) -> Result<Self, MarkovError> {
        if mass.iter().any(|&x| x <= 0.0) {
            return Err(MarkovError::NotPositive);
        }
        let sum = mass.sum();
        if (sum - 1.0).abs() > tol {
            return Err(MarkovError::NotNormalized { sum });
        }
        Ok(Self { mass: mass / sum })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            mass: DVector::from_element(n, 1.0 / n as f64),
        }
    }

    pub fn mass(&self) -> &DVector<f64> {
        &self.mass
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    /// Smallest coordinate (distance to the simplex boundary in the
    /// coordinatewise sense).
    pub fn min_coord(&self) -> f64 {
        self.mass.iter().fold(f64::INFINITY, |m, &x| m.min(x))
    }

    pub fn sup_distance(&self, other: &Distribution) -> f64 {
        linalg::max_abs_vec(&(&self.mass - &other.mass))
    }
}

/// Zero-sum row vector: a velocity on the simplex interior.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    delta: DVector<f64>,
}

impl TangentVector {
    pub fn new(delta: DVector<f64>) -> Result<Self, MarkovError> {
        let sum = delta.sum();
        if sum.abs() > 1e-12 {
            return Err(MarkovError::NotZeroSum { sum });
        }
        Ok(Self { delta })
    }

    /// Projects onto the zero-sum subspace by subtracting the mean; for
    /// vectors that are zero-sum up to rounding this is a no-op up to machine
    /// precision.
    pub fn project(mut delta: DVector<f64>) -> Self {
        let mean = delta.sum() / delta.len() as f64;
        delta.add_scalar_mut(-mean);
        Self { delta }
    }

    pub fn delta(&self) -> &DVector<f64> {
        &self.delta
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }
}

/// Row-stochastic matrix: nonnegative entries, rows summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix {
    entries: DMatrix<f64>,
}

impl StochasticMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self, MarkovError> {
        if entries.iter().any(|&x| x < 0.0) {
            return Err(MarkovError::NotPositive);
        }
        for i in 0..entries.nrows() {
            let sum = entries.row(i).sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(MarkovError::NotNormalized { sum });
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }
}

/// Validates a raw rate matrix; see [`Generator::new`].
pub fn validate_generator(raw: DMatrix<f64>) -> Result<Generator, MarkovError> {
    Generator::new(raw)
}

/// Strong connectivity of the digraph with an edge `i -> j` whenever
/// `Q[i][j] > 0` (two-pass Kosaraju).
pub fn is_irreducible(q: &Generator) -> bool {
    let n = q.n_states();
    let rates = q.rates();
    let edge = |i: usize, j: usize| i != j && rates[(i, j)] > 0.0;

    // First pass: DFS finish order on the forward graph.
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        seen[start] = true;
        while let Some(&mut (v, ref mut next)) = stack.last_mut() {
            if *next < n {
                let j = *next;
                *next += 1;
                if edge(v, j) && !seen[j] {
                    seen[j] = true;
                    stack.push((j, 0));
                }
            } else {
                order.push(v);
                stack.pop();
            }
        }
    }

    // Second pass: one DFS on the reversed graph from the last-finished
    // vertex must reach everything.
    let mut seen = vec![false; n];
    let root = *order.last().expect("n >= 2");
    let mut stack = vec![root];
    seen[root] = true;
    let mut count = 1;
    while let Some(v) = stack.pop() {
        for i in 0..n {
            if edge(i, v) && !seen[i] {
                seen[i] = true;
                count += 1;
                stack.push(i);
            }
        }
    }
    count == n
}

/// Unique stationary distribution of an irreducible chain, by a dense solve
/// of `{πQ = 0, Σπ = 1}` (the last column of Q is replaced by the
/// normalization equation).
pub fn stationary_distribution(q: &Generator) -> Result<Distribution, MarkovError> {
    if !is_irreducible(q) {
        return Err(MarkovError::NotIrreducible);
    }
    let n = q.n_states();
    let mut a = q.rates().clone();
    for i in 0..n {
        a[(i, n - 1)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    // π A = rhs  <=>  Aᵀ πᵀ = rhsᵀ
    let pi = a
        .transpose()
        .lu()
        .solve(&rhs)
        .ok_or(MarkovError::NotIrreducible)?;
    let residual = linalg::max_abs_vec(&(pi.transpose() * q.rates()).transpose());
    debug_assert!(residual <= 1e-10 * q.max_abs().max(1e-300));
    Distribution::new_renormalized(pi, 1e-9)
}

/// Law after time `t`: `μ e^{tQ}` via the scaling-and-squaring matrix
/// exponential.
pub fn semigroup_evolve(q: &Generator, mu: &Distribution, t: f64) -> Distribution {
    assert!(t >= 0.0, "time must be nonnegative");
    assert_eq!(q.n_states(), mu.len(), "dimension mismatch");
    let e = linalg::expm(&(q.rates() * t));
    let evolved = (mu.mass().transpose() * e).transpose();
    Distribution::new_renormalized(evolved, 1e-10)
        .expect("semigroup preserves the simplex interior")
}

/// Samples `t ↦ μ e^{tQ}` at `t_k = k·dt` up to `t_end`, each point evolved
/// from `μ` directly rather than compounded.
pub fn semigroup_trajectory(q: &Generator, mu: &Distribution, t_end: f64, dt: f64) -> Trajectory {
    assert!(t_end > 0.0 && dt > 0.0);
    let mut times = Vec::new();
    let mut states = Vec::new();
    let steps = (t_end / dt + 1e-9).floor() as usize;
    for k in 0..=steps {
        let t = k as f64 * dt;
        times.push(t);
        states.push(semigroup_evolve(q, mu, t));
    }
    Trajectory::new(times, states)
}

/// Uniformization `K = I + αQ` with `α = 1 / max_i |Q_ii|`; K is a valid
/// transition matrix and `e^{tQ} = e^{(t/α)(αQ)}`.
pub fn uniformize(q: &Generator) -> Result<(StochasticMatrix, f64), MarkovError> {
    let n = q.n_states();
    let max_diag = (0..n).map(|i| q.rates()[(i, i)].abs()).fold(0.0, f64::max);
    if max_diag == 0.0 {
        return Err(MarkovError::ZeroGenerator);
    }
    let alpha = 1.0 / max_diag;
    let k = DMatrix::identity(n, n) + q.rates() * alpha;
    Ok((StochasticMatrix::new(k)?, alpha))
}
