//! Left eigenstructure of a generator and the real-diagonalisability verdict.
//!
//! Everything is in the row convention: a left eigenpair satisfies
//! `v Q = λ v`. Eigenvalues come from the real Schur form of `Qᵀ`;
//! eigenvectors from shifted inverse iteration with per-cluster
//! orthogonalization, which also copes with repeated eigenvalues.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg;
use crate::markov_core::{self, Generator, TangentVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("chain is not irreducible")]
    NotIrreducible,
    #[error("eigensolver did not converge")]
    EigenFailure,
}

/// Full left eigenstructure of a generator.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    /// Eigenvalues, the zero eigenvalue first, then sorted by descending real
    /// part (imaginary part as tie-break). Imaginary parts below tolerance
    /// are zeroed.
    pub eigenvalues: Vec<Complex64>,
    /// Left eigenvectors matching `eigenvalues`; the zero eigenvector is the
    /// stationary distribution. Others have unit ∞-norm with the first
    /// significant entry real positive.
    pub left_eigenvectors: Vec<DVector<Complex64>>,
    /// True iff the eigenvector matrix has condition number below 1e8 and
    /// every eigenpair met the residual tolerance.
    pub diagonalisable: bool,
    /// True iff every eigenvalue is real within `1e-9 * max|Q|`.
    pub real: bool,
    /// Largest |Im λ| before cleanup.
    pub max_imag: f64,
    /// Condition number of the eigenvector matrix.
    pub condition: f64,
    /// Worst relative eigenpair residual `‖vQ - λv‖∞ / (max|Q|·‖v‖∞)`.
    pub max_residual: f64,
}

/// Verdict of the gradient-flow representability test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Yes,
    No,
    /// Some test quantity lies within a factor 10 of its threshold; the
    /// floating-point proxy cannot call it either way.
    Borderline,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Yes => write!(f, "yes"),
            Verdict::No => write!(f, "no"),
            Verdict::Borderline => write!(f, "borderline"),
        }
    }
}

const COND_THRESHOLD: f64 = 1e8;

/// Left eigen-analysis of an irreducible generator.
pub fn left_eigen(q: &Generator) -> Result<SpectralDecomposition, SpectralError> {
    if !markov_core::is_irreducible(q) {
        return Err(SpectralError::NotIrreducible);
    }
    let n = q.n_states();
    let scale = q.max_abs().max(f64::MIN_POSITIVE);
    let imag_tol = 1e-9 * scale;

    // Left eigenvectors of Q are right eigenvectors of Qᵀ.
    let a = q.rates().transpose();
    let schur = nalgebra::Schur::try_new(a.clone(), f64::EPSILON, 0)
        .ok_or(SpectralError::EigenFailure)?;
    let mut raw: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();

    let max_imag = raw.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));

    // The zero eigenvalue of an irreducible chain: the one closest to 0.
    let zero_idx = (0..n)
        .min_by(|&i, &j| raw[i].norm().partial_cmp(&raw[j].norm()).unwrap())
        .unwrap();
    let mut order: Vec<usize> = (0..n).filter(|&i| i != zero_idx).collect();
    order.sort_by(|&i, &j| {
        (-raw[i].re, raw[i].im)
            .partial_cmp(&(-raw[j].re, raw[j].im))
            .unwrap()
    });

    // Imaginary-part cleanup before eigenvector extraction.
    for z in raw.iter_mut() {
        if z.im.abs() <= imag_tol {
            z.im = 0.0;
        }
    }

    let pi = markov_core::stationary_distribution(q).map_err(|_| SpectralError::NotIrreducible)?;
    let mut eigenvalues = vec![Complex64::new(0.0, 0.0)];
    let mut vectors: Vec<DVector<Complex64>> =
        vec![pi.mass().map(|x| Complex64::new(x, 0.0))];

    // Clustered inverse iteration for the nonzero eigenvalues. Vectors within
    // a cluster of (numerically) equal eigenvalues are orthogonalized against
    // each other so repeated eigenvalues yield independent eigenvectors.
    let cluster_tol = 1e-8 * scale;
    let mut rng = ChaCha8Rng::seed_from_u64(0x1234_5678);
    let mut max_residual = 0.0f64;
    for &idx in &order {
        let lambda = raw[idx];
        let cluster: Vec<&DVector<Complex64>> = eigenvalues
            .iter()
            .zip(&vectors)
            .skip(1)
            .filter(|(l, _)| (*l - lambda).norm() <= cluster_tol)
            .map(|(_, v)| v)
            .collect();
        let (v, res) = inverse_iteration(&a, lambda, &cluster, scale, &mut rng);
        max_residual = max_residual.max(res / scale);
        eigenvalues.push(lambda);
        vectors.push(normalize_phase(v, imag_tol));
    }

    // Residual of the stationary eigenpair.
    let pi_res = linalg::max_abs_vec(&(pi.mass().transpose() * q.rates()).transpose());
    max_residual = max_residual.max(pi_res / scale);

    // Row-convention eigenvector matrix.
    let mut vmat = DMatrix::<Complex64>::zeros(n, n);
    for (i, v) in vectors.iter().enumerate() {
        for j in 0..n {
            vmat[(i, j)] = v[j];
        }
    }
    let condition = linalg::condition_number_complex(&vmat);

    let real = max_imag <= imag_tol;
    let diagonalisable = condition < COND_THRESHOLD && max_residual <= 1e-9;

    Ok(SpectralDecomposition {
        eigenvalues,
        left_eigenvectors: vectors,
        diagonalisable,
        real,
        max_imag,
        condition,
        max_residual,
    })
}

fn inverse_iteration(
    a: &DMatrix<f64>,
    lambda: Complex64,
    cluster: &[&DVector<Complex64>],
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> (DVector<Complex64>, f64) {
    let n = a.nrows();
    let ac = a.map(|x| Complex64::new(x, 0.0));
    let target = 1e-11 * scale;

    let residual = |v: &DVector<Complex64>| -> f64 {
        let r = &ac * v - v * lambda;
        let vn = v.iter().fold(0.0f64, |m, z| m.max(z.norm()));
        r.iter().fold(0.0f64, |m, z| m.max(z.norm())) / vn.max(f64::MIN_POSITIVE)
    };

    // A slightly off-eigenvalue shift keeps the solve well posed while still
    // amplifying the eigendirection enormously. The unorthogonalized retry
    // covers defective clusters, where no further independent eigenvector
    // exists and the orthogonalized iteration cannot converge.
    let mut best: Option<(DVector<Complex64>, f64)> = None;
    for (attempt, orthogonalize) in [(1u32, true), (2, true), (3, false)] {
        let shift = lambda + Complex64::new(1e-12 * scale * attempt as f64, 1e-13 * scale);
        let b = &ac - DMatrix::<Complex64>::identity(n, n) * shift;
        let lu = b.lu();
        let mut x: DVector<Complex64> =
            DVector::from_fn(n, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), 0.0));
        for _ in 0..30 {
            if orthogonalize {
                for u in cluster {
                    let unorm2: Complex64 = u.iter().map(|z| z * z.conj()).sum();
                    let proj: Complex64 =
                        u.iter().zip(x.iter()).map(|(uz, xz)| uz.conj() * xz).sum();
                    x -= (*u).clone() * (proj / unorm2);
                }
            }
            let xn = x.iter().fold(0.0f64, |m, z| m.max(z.norm()));
            if xn < 1e-200 {
                x = DVector::from_fn(n, |_, _| {
                    Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                });
            } else {
                x /= Complex64::new(xn, 0.0);
            }
            let res = residual(&x);
            if res <= target {
                return (x, res);
            }
            match &best {
                Some((_, r)) if *r <= res => {}
                _ => best = Some((x.clone(), res)),
            }
            x = match lu.solve(&x) {
                Some(y) => y,
                None => break,
            };
        }
    }
    best.expect("at least one iterate recorded")
}

/// Rotate the phase so the first significant entry is real positive; zero
/// imaginary parts below tolerance.
fn normalize_phase(mut v: DVector<Complex64>, imag_tol: f64) -> DVector<Complex64> {
    let norm = v.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    if norm > 0.0 {
        v /= Complex64::new(norm, 0.0);
    }
    if let Some(k) = v.iter().position(|z| z.norm() > 1e-12) {
        let phase = v[k] / v[k].norm();
        let rot = phase.conj();
        v *= rot;
    }
    for z in v.iter_mut() {
        if z.im.abs() <= imag_tol.max(1e-13) {
            z.im = 0.0;
        }
    }
    v
}

/// Theorem-level verdict: the semigroup is some gradient flow iff the
/// generator is real diagonalisable; tolerance-band quantities within a
/// factor 10 of their threshold yield `Borderline`.
pub fn is_gradient_flow_representable(q: &Generator) -> Result<Verdict, SpectralError> {
    let dec = left_eigen(q)?;
    let scale = q.max_abs().max(f64::MIN_POSITIVE);
    let quantities = [
        (dec.max_imag, 1e-9 * scale),
        (dec.condition, COND_THRESHOLD),
        (dec.max_residual, 1e-9),
    ];
    let mut ok = true;
    for (value, threshold) in quantities {
        if value > threshold * 0.1 && value <= threshold * 10.0 {
            return Ok(Verdict::Borderline);
        }
        if value > threshold {
            ok = false;
        }
    }
    Ok(if ok { Verdict::Yes } else { Verdict::No })
}

/// Fixed coordinates on the tangent space: `b_i = e_i - e_d` for
/// `i = 0..d-1`. Every matrix representation of a bilinear form in this crate
/// uses this basis.
pub fn tangent_basis(d: usize) -> Vec<TangentVector> {
    assert!(d >= 1);
    (0..d)
        .map(|i| {
            let mut v = DVector::zeros(d + 1);
            v[i] = 1.0;
            v[d] = -1.0;
            TangentVector::new(v).expect("construction is zero-sum")
        })
        .collect()
}

/// Coordinates of a tangent vector in [`tangent_basis`]: simply its first `d`
/// entries (the last is determined by the zero-sum constraint).
pub fn tangent_coords(v: &TangentVector) -> DVector<f64> {
    let d = v.len() - 1;
    DVector::from_fn(d, |i, _| v.delta()[i])
}

/// Inverse of [`tangent_coords`].
pub fn tangent_from_coords(c: &DVector<f64>) -> TangentVector {
    let d = c.len();
    let mut v = DVector::zeros(d + 1);
    for i in 0..d {
        v[i] = c[i];
        v[d] -= c[i];
    }
    TangentVector::project(v)
}
