//! Explicit and random chain families: the star and coupled-pair generators
//! with prescribed stationary state and eigenvector, seeded random
//! reversible/non-reversible factories, and the cyclic (oscillatory) chain.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg;
use crate::markov_core::{self, Distribution, Generator, TangentVector};
use crate::spectral::{self, Verdict};
use crate::structure;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZooError {
    #[error("stationary distribution must be interior with matching dimension")]
    InvalidPi,
    #[error("coupling rate mu is too large: rate ({i},{j}) would be negative")]
    MuTooLarge { i: usize, j: usize },
    #[error("eigenvector must satisfy v_0 != 0, v_1 != 0, v_d = 0")]
    InvalidV,
    #[error("no non-reversible diagonalisable chain found in {tries} tries")]
    ExhaustedTries { tries: usize },
    #[error("parameters must be positive")]
    InvalidParameter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tag {
    Reversible,
    Diagonalisable,
    Oscillatory,
}

/// A named generator together with its stationary state and verified tags.
#[derive(Debug, Clone)]
pub struct ChainSpec {
    pub name: String,
    pub generator: Generator,
    pub pi: Distribution,
    pub tags: BTreeSet<Tag>,
}

fn verify_tags(name: &str, generator: Generator, pi: Distribution) -> ChainSpec {
    let mut tags = BTreeSet::new();
    if let Ok(db) = structure::check_detailed_balance(&generator) {
        if db.reversible {
            tags.insert(Tag::Reversible);
        }
    }
    if let Ok(dec) = spectral::left_eigen(&generator) {
        if dec.diagonalisable && dec.real {
            tags.insert(Tag::Diagonalisable);
        }
        if !dec.real {
            tags.insert(Tag::Oscillatory);
        }
    }
    ChainSpec {
        name: name.to_string(),
        generator,
        pi,
        tags,
    }
}

fn check_pi(pi: &Distribution) -> Result<(), ZooError> {
    if pi.len() < 2 || pi.min_coord() <= 0.0 {
        return Err(ZooError::InvalidPi);
    }
    Ok(())
}

/// The reversible chain whose every transition passes through the last
/// state; `-λ` has the `(d-1)`-dimensional eigenspace `{u ∈ T : u_d = 0}`.
pub fn star_chain(pi: &Distribution, lambda: f64) -> Result<ChainSpec, ZooError> {
    check_pi(pi)?;
    if lambda <= 0.0 {
        return Err(ZooError::InvalidParameter);
    }
    let n = pi.len();
    let d = n - 1;
    let p = pi.mass();
    let mut s = DMatrix::zeros(n, n);
    for i in 0..d {
        s[(i, i)] = -p[i] * lambda;
        s[(i, d)] = p[i] * lambda;
        s[(d, i)] = p[i] * lambda;
    }
    s[(d, d)] = -(1.0 - p[d]) * lambda;
    let q = pi_inverse_times(pi, &s);
    let generator = Generator::new(q).expect("star construction is a valid generator");
    debug_assert!(eigenspace_residual(&generator, lambda) <= 1e-12 * lambda);
    Ok(verify_tags("star", generator, pi.clone()))
}

fn pi_inverse_times(pi: &Distribution, s: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| s[(i, j)] / pi.mass()[i])
}

#[cfg(debug_assertions)]
fn eigenspace_residual(q: &Generator, lambda: f64) -> f64 {
    // worst residual of uQ = -λu over the tangent-basis vectors with u_d = 0
    let d = q.n_states() - 1;
    let mut worst = 0.0f64;
    for i in 0..d.saturating_sub(1) {
        let mut u = DVector::zeros(d + 1);
        u[i] = 1.0;
        u[d - 1] = -1.0;
        let r = (u.transpose() * q.rates()).transpose() + &u * lambda;
        worst = worst.max(linalg::max_abs_vec(&r));
    }
    worst
}

/// The star chain modified in the (0,1) block so that a prescribed
/// `v ∈ T` with `v_d = 0` is still an eigenvector for `-λ`; `μ` must be
/// small enough to keep all rates nonnegative.
pub fn coupled_pair_chain(
    pi: &Distribution,
    lambda: f64,
    mu: f64,
    v: &TangentVector,
) -> Result<ChainSpec, ZooError> {
    check_pi(pi)?;
    if lambda <= 0.0 || mu <= 0.0 {
        return Err(ZooError::InvalidParameter);
    }
    let n = pi.len();
    if v.len() != n || n < 3 {
        return Err(ZooError::InvalidV);
    }
    let d = n - 1;
    let p = pi.mass();
    let vv = v.delta();
    if vv[0] == 0.0 || vv[1] == 0.0 || vv[d] != 0.0 {
        return Err(ZooError::InvalidV);
    }
    let beta0 = mu * p[0] * vv[1] / (vv[0] * p[1]);
    let beta1 = mu * p[1] * vv[0] / (vv[1] * p[0]);
    let gamma = -(1.0 - p[d]) * lambda - beta0 - beta1 + 2.0 * mu;

    let mut s = DMatrix::zeros(n, n);
    s[(0, 0)] = -p[0] * lambda - beta0;
    s[(0, 1)] = mu;
    s[(0, d)] = p[0] * lambda + beta0 - mu;
    s[(1, 0)] = mu;
    s[(1, 1)] = -p[1] * lambda - beta1;
    s[(1, d)] = p[1] * lambda + beta1 - mu;
    for i in 2..d {
        s[(i, i)] = -p[i] * lambda;
        s[(i, d)] = p[i] * lambda;
    }
    s[(d, 0)] = p[0] * lambda + beta0 - mu;
    s[(d, 1)] = p[1] * lambda + beta1 - mu;
    for i in 2..d {
        s[(d, i)] = p[i] * lambda;
    }
    s[(d, d)] = gamma;

    let q = pi_inverse_times(pi, &s);
    for i in 0..n {
        for j in 0..n {
            if i != j && q[(i, j)] < 0.0 {
                return Err(ZooError::MuTooLarge { i, j });
            }
        }
    }
    let generator = Generator::new(q).map_err(|_| ZooError::MuTooLarge { i: d, j: d })?;

    // vQ = -λv is the whole point of the construction; verify it.
    let residual = {
        let r = (vv.transpose() * generator.rates()).transpose() + vv * lambda;
        linalg::max_abs_vec(&r)
    };
    if residual > 1e-10 * lambda * linalg::max_abs_vec(vv) {
        return Err(ZooError::InvalidV);
    }
    Ok(verify_tags("coupled-pair", generator, pi.clone()))
}

/// Seeded random reversible chain with prescribed stationary state:
/// a symmetric flux matrix with U[0.1, 1] off-diagonals, divided by Π.
pub fn random_reversible(pi: &Distribution, seed: u64) -> Result<ChainSpec, ZooError> {
    check_pi(pi)?;
    let n = pi.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let x = rng.gen_range(0.1..1.0);
            s[(i, j)] = x;
            s[(j, i)] = x;
        }
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| s[(i, j)]).sum();
        s[(i, i)] = -off;
    }
    let q = pi_inverse_times(pi, &s);
    let generator = Generator::new(q).expect("symmetric flux gives a valid generator");
    Ok(verify_tags("random-reversible", generator, pi.clone()))
}

/// Rejection-samples random irreducible generators until one is both clearly
/// non-reversible and real diagonalisable; the witness for the entropy
/// dichotomy.
pub fn random_nonreversible_diagonalisable(
    n_states: usize,
    seed: u64,
    max_tries: usize,
) -> Result<ChainSpec, ZooError> {
    assert!(n_states >= 3, "all 2-state chains are reversible");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..max_tries {
        let mut q = DMatrix::zeros(n_states, n_states);
        for i in 0..n_states {
            for j in 0..n_states {
                if i != j {
                    q[(i, j)] = rng.gen_range(0.1..1.0);
                }
            }
            let off: f64 = (0..n_states).filter(|&j| j != i).map(|j| q[(i, j)]).sum();
            q[(i, i)] = -off;
        }
        let generator = Generator::new(q).expect("positive rates");
        let Ok(pi) = markov_core::stationary_distribution(&generator) else {
            continue;
        };
        let Ok(db) = structure::check_detailed_balance(&generator) else {
            continue;
        };
        let flux_scale = (0..n_states)
            .flat_map(|i| (0..n_states).map(move |j| (i, j)))
            .map(|(i, j)| (pi.mass()[i] * generator.rates()[(i, j)]).abs())
            .fold(0.0f64, f64::max);
        if db.asymmetry <= 1e-3 * flux_scale {
            continue;
        }
        if spectral::is_gradient_flow_representable(&generator) != Ok(Verdict::Yes) {
            continue;
        }
        let mut spec = verify_tags("random-nonreversible-diagonalisable", generator, pi);
        spec.tags.remove(&Tag::Reversible);
        return Ok(spec);
    }
    Err(ZooError::ExhaustedTries { tries: max_tries })
}

/// One-directional cycle: uniformly stationary, complex spectrum
/// `rate · (ω^k - 1)`, never a gradient flow.
pub fn cyclic_chain(n_states: usize, rate: f64) -> Result<ChainSpec, ZooError> {
    assert!(n_states >= 3);
    if rate <= 0.0 {
        return Err(ZooError::InvalidParameter);
    }
    let mut q = DMatrix::zeros(n_states, n_states);
    for i in 0..n_states {
        q[(i, i)] = -rate;
        q[(i, (i + 1) % n_states)] = rate;
    }
    let generator = Generator::new(q).expect("cycle is a valid generator");
    let pi = Distribution::uniform(n_states);
    Ok(verify_tags("cyclic", generator, pi))
}
