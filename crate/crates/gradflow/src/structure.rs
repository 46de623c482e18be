//! Equilibrium metric from (Q, d²𝔉), generator recovery, the canonical
//! gradient structure for real-diagonalisable generators, and detailed
//! balance.
//!
//! The linearisation at equilibrium ties the three objects together:
//! `g|π(wQ, v) = -M(w, v)` for all tangent w, v, with `M = d²𝔉|π`. In the
//! fixed tangent-basis coordinates that is the matrix equation `Q̄ G = -M̄`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::entropy::{BilinearFormOnT, Functional};
use crate::flowsim::MetricField;
use crate::linalg;
use crate::markov_core::{self, Distribution, Generator, TangentVector};
use crate::spectral::{self, tangent_coords, Verdict};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StructureError {
    #[error("chain is not irreducible")]
    NotIrreducible,
    #[error("Q restricted to the tangent space is singular")]
    SingularQbar,
    #[error("metric form is singular")]
    SingularMetric,
    #[error("generator is not gradient-flow representable (verdict {verdict})")]
    NotRepresentable { verdict: Verdict },
    #[error("chain is not reversible (asymmetry {asymmetry:e})")]
    NotReversible { asymmetry: f64 },
    #[error("eigensolver did not converge")]
    EigenFailure,
}

/// Why a candidate equilibrium form fails to be a metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NotAMetricReason {
    Asymmetric,
    NotPositiveDefinite,
}

/// Outcome of [`metric_at_pi`]. The failing case carries the computed form:
/// its asymmetry for the entropy Hessian is exactly the non-reversibility
/// witness of the dichotomy.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricVerdict {
    Metric(BilinearFormOnT),
    NotAMetric {
        reason: NotAMetricReason,
        form: DMatrix<f64>,
    },
}

/// Q restricted to the tangent space, in tangent-basis coordinates:
/// `Q̄[i][j] = Q[i][j] - Q[d][j]` for `i, j < d`.
pub fn restrict_to_tangent(q: &Generator) -> DMatrix<f64> {
    let d = q.n_states() - 1;
    DMatrix::from_fn(d, d, |i, j| q.rates()[(i, j)] - q.rates()[(d, j)])
}

/// Unique solution `G` of `Q̄ G = -M̄` (the equilibrium metric determined by
/// the generator and the functional Hessian), checked for symmetry and
/// positive definiteness.
pub fn metric_at_pi(
    q: &Generator,
    m: &BilinearFormOnT,
) -> Result<MetricVerdict, StructureError> {
    if !markov_core::is_irreducible(q) {
        return Err(StructureError::NotIrreducible);
    }
    let qbar = restrict_to_tangent(q);
    let g = qbar
        .lu()
        .solve(&(-m.matrix()))
        .ok_or(StructureError::SingularQbar)?;

    let scale = linalg::max_abs(&g).max(f64::MIN_POSITIVE);
    let asym = linalg::max_abs(&(&g - g.transpose()));
    if asym > 1e-8 * scale {
        return Ok(MetricVerdict::NotAMetric {
            reason: NotAMetricReason::Asymmetric,
            form: g,
        });
    }
    let min_eig = linalg::symmetric_eigenvalues(&g)[0];
    if min_eig <= 1e-10 * scale {
        return Ok(MetricVerdict::NotAMetric {
            reason: NotAMetricReason::NotPositiveDefinite,
            form: g,
        });
    }
    Ok(MetricVerdict::Metric(BilinearFormOnT::symmetrize(g)))
}

/// Inverse of [`metric_at_pi`]: the unique linear map on T with
/// `g(wQ̄, v) = -m(w, v)`, extended to ambient coordinates by `πQ = 0`.
pub fn recover_generator(
    g_pi: &BilinearFormOnT,
    m: &BilinearFormOnT,
    pi: &Distribution,
) -> Result<DMatrix<f64>, StructureError> {
    let d = g_pi.dim();
    assert_eq!(m.dim(), d);
    assert_eq!(pi.len(), d + 1);
    // Q̄ G = -M̄ with G symmetric: solve G Q̄ᵀ = -M̄ᵀ columnwise.
    let qbar_t = g_pi
        .matrix()
        .clone()
        .lu()
        .solve(&(-m.matrix().transpose()))
        .ok_or(StructureError::SingularMetric)?;
    let qbar = qbar_t.transpose();

    // Ambient extension: e_i = (e_i - π) + π with e_i - π tangent, πQ = 0.
    let n = d + 1;
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let coords = DVector::from_fn(d, |j, _| {
            (if i == j { 1.0 } else { 0.0 }) - pi.mass()[j]
        });
        let image = (coords.transpose() * &qbar).transpose();
        let mut last = 0.0;
        for j in 0..d {
            out[(i, j)] = image[j];
            last -= image[j];
        }
        out[(i, d)] = last;
    }
    Ok(out)
}

/// The converse-proof construction: identity metric in a left eigenbasis of
/// T and the quadratic functional `½ Σ (-λ_i) a_i²` in the eigenbasis
/// coordinates `a`.
#[derive(Debug, Clone)]
pub struct GradientStructure {
    pi: Distribution,
    eigenbasis: Vec<TangentVector>,
    eigenvalues: Vec<f64>,
    /// Constant metric in tangent-basis coordinates (identity in the
    /// eigenbasis).
    metric: BilinearFormOnT,
    basis_inverse: DMatrix<f64>,
}

impl GradientStructure {
    pub fn pi(&self) -> &Distribution {
        &self.pi
    }

    pub fn eigenbasis(&self) -> &[TangentVector] {
        &self.eigenbasis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn metric(&self) -> &BilinearFormOnT {
        &self.metric
    }

    /// Eigenbasis coordinates `a` of `μ - π`.
    pub fn eigen_coords(&self, mu: &Distribution) -> DVector<f64> {
        let v = TangentVector::project(mu.mass() - self.pi.mass());
        let c = tangent_coords(&v);
        self.basis_inverse.transpose() * c
    }

    /// The quadratic functional `𝔉(π + Σ a_i f_i) = ½ Σ (-λ_i) a_i²` with
    /// its analytic gradient.
    pub fn functional(&self) -> Functional {
        let me = self.clone();
        let me2 = self.clone();
        Functional::new(move |mu: &Distribution| {
            let a = me.eigen_coords(mu);
            0.5 * a
                .iter()
                .zip(&me.eigenvalues)
                .map(|(ai, l)| -l * ai * ai)
                .sum::<f64>()
        })
        .with_gradient(move |mu: &Distribution| {
            let a = me2.eigen_coords(mu);
            let scaled = DVector::from_fn(a.len(), |i, _| -me2.eigenvalues[i] * a[i]);
            &me2.basis_inverse * scaled
        })
    }

    /// The constant metric as a field on the simplex.
    pub fn metric_field(&self) -> MetricField {
        let g = self.metric.clone();
        MetricField::new(move |_| g.clone())
    }
}

/// Builds the canonical gradient structure of a real-diagonalisable
/// irreducible generator.
pub fn canonical_structure(q: &Generator) -> Result<GradientStructure, StructureError> {
    let verdict = spectral::is_gradient_flow_representable(q).map_err(|e| match e {
        spectral::SpectralError::NotIrreducible => StructureError::NotIrreducible,
        spectral::SpectralError::EigenFailure => StructureError::EigenFailure,
    })?;
    if verdict != Verdict::Yes {
        return Err(StructureError::NotRepresentable { verdict });
    }
    let dec = spectral::left_eigen(q).map_err(|_| StructureError::NotIrreducible)?;
    let d = q.n_states() - 1;

    let mut eigenvalues = Vec::with_capacity(d);
    let mut eigenbasis = Vec::with_capacity(d);
    for (lambda, vec) in dec
        .eigenvalues
        .iter()
        .zip(&dec.left_eigenvectors)
        .skip(1)
    {
        eigenvalues.push(lambda.re);
        let real = vec.map(|z| z.re);
        eigenbasis.push(TangentVector::project(real));
    }

    let basis_matrix = DMatrix::from_fn(d, d, |i, j| eigenbasis[i].delta()[j]);
    if linalg::condition_number(&basis_matrix) >= 1e8 {
        return Err(StructureError::SingularQbar);
    }
    let basis_inverse = basis_matrix
        .try_inverse()
        .ok_or(StructureError::SingularQbar)?;
    // g = identity in the eigenbasis pulled back to tangent-basis
    // coordinates: G = B⁻¹ B⁻ᵀ.
    let metric = BilinearFormOnT::symmetrize(&basis_inverse * basis_inverse.transpose());

    let pi = markov_core::stationary_distribution(q).map_err(|_| StructureError::NotIrreducible)?;
    Ok(GradientStructure {
        pi,
        eigenbasis,
        eigenvalues,
        metric,
        basis_inverse,
    })
}

/// Detailed-balance verdict: `asymmetry = max |π_i Q_ij - π_j Q_ji|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetailedBalance {
    pub reversible: bool,
    pub asymmetry: f64,
}

pub fn check_detailed_balance(q: &Generator) -> Result<DetailedBalance, StructureError> {
    check_detailed_balance_with_tolerance(q, 1e-10)
}

/// As [`check_detailed_balance`], with an explicit relative tolerance on the
/// asymmetry (measured against the largest probability flux).
pub fn check_detailed_balance_with_tolerance(
    q: &Generator,
    rel_tol: f64,
) -> Result<DetailedBalance, StructureError> {
    let pi =
        markov_core::stationary_distribution(q).map_err(|_| StructureError::NotIrreducible)?;
    let n = q.n_states();
    let mut asymmetry = 0.0f64;
    let mut scale = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let flux = pi.mass()[i] * q.rates()[(i, j)];
            scale = scale.max(flux.abs());
            asymmetry = asymmetry.max((flux - pi.mass()[j] * q.rates()[(j, i)]).abs());
        }
    }
    Ok(DetailedBalance {
        reversible: asymmetry <= rel_tol * scale.max(f64::MIN_POSITIVE),
        asymmetry,
    })
}

/// The symmetric matrix `a = -ΠQ` with zero row and column sums; its
/// symmetry is the detailed balance equation.
pub fn reversibility_witness(q: &Generator) -> Result<DMatrix<f64>, StructureError> {
    let db = check_detailed_balance(q)?;
    if !db.reversible {
        return Err(StructureError::NotReversible {
            asymmetry: db.asymmetry,
        });
    }
    let pi =
        markov_core::stationary_distribution(q).map_err(|_| StructureError::NotIrreducible)?;
    let n = q.n_states();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        -pi.mass()[i] * q.rates()[(i, j)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::{self, entropy_hessian_at_pi};
    use approx::assert_abs_diff_eq;

    fn gen(rows: &[&[f64]]) -> Generator {
        let n = rows.len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Generator::new(DMatrix::from_row_slice(n, n, &flat)).unwrap()
    }

    fn two_state() -> Generator {
        gen(&[&[-1.0, 1.0], &[2.0, -2.0]])
    }

    fn cyclic3() -> Generator {
        gen(&[&[-1.0, 1.0, 0.0], &[0.0, -1.0, 1.0], &[1.0, 0.0, -1.0]])
    }

    #[test]
    fn metric_two_state_entropy_hessian() {
        // wQ = -3w on the 1-d tangent space, so -3 g = -4.5 gives g = 1.5.
        let q = two_state();
        let pi = markov_core::stationary_distribution(&q).unwrap();
        let m = entropy_hessian_at_pi(&pi);
        match metric_at_pi(&q, &m).unwrap() {
            MetricVerdict::Metric(g) => {
                assert_abs_diff_eq!(g.matrix()[(0, 0)], 1.5, epsilon = 1e-12)
            }
            other => panic!("expected metric, got {other:?}"),
        }
    }

    #[test]
    fn metric_identity_when_m_is_minus_qbar() {
        let q = gen(&[
            &[-2.0, 1.0, 1.0],
            &[1.0, -2.0, 1.0],
            &[1.0, 1.0, -2.0],
        ]);
        let qbar = restrict_to_tangent(&q);
        let m = BilinearFormOnT::symmetrize(-&qbar);
        match metric_at_pi(&q, &m).unwrap() {
            MetricVerdict::Metric(g) => {
                assert_abs_diff_eq!(g.matrix(), &DMatrix::identity(2, 2), epsilon = 1e-10)
            }
            other => panic!("expected identity metric, got {other:?}"),
        }
    }

    #[test]
    fn recover_identity_case() {
        let g = BilinearFormOnT::new(DMatrix::identity(2, 2)).unwrap();
        let m = BilinearFormOnT::new(DMatrix::identity(2, 2)).unwrap();
        let pi = Distribution::uniform(3);
        let q = recover_generator(&g, &m, &pi).unwrap();
        // Q̄ = -I on T
        let b = spectral::tangent_basis(2);
        for v in &b {
            let image = (v.delta().transpose() * &q).transpose();
            for k in 0..3 {
                assert_abs_diff_eq!(image[k], -v.delta()[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn roundtrip_two_state() {
        let q = two_state();
        let pi = markov_core::stationary_distribution(&q).unwrap();
        let m = entropy_hessian_at_pi(&pi);
        let g = match metric_at_pi(&q, &m).unwrap() {
            MetricVerdict::Metric(g) => g,
            other => panic!("{other:?}"),
        };
        let rec = recover_generator(&g, &m, &pi).unwrap();
        assert_abs_diff_eq!(&rec, q.rates(), epsilon = 1e-9 * q.max_abs());
    }

    #[test]
    fn recover_explicit_inverse_example() {
        let g = BilinearFormOnT::new(DMatrix::from_element(1, 1, 1.5)).unwrap();
        let m = BilinearFormOnT::new(DMatrix::from_element(1, 1, 4.5)).unwrap();
        let pi = Distribution::new(DVector::from_vec(vec![2.0 / 3.0, 1.0 / 3.0])).unwrap();
        let rec = recover_generator(&g, &m, &pi).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 2.0, -2.0]);
        assert_abs_diff_eq!(&rec, &expected, epsilon = 1e-12);
    }

    #[test]
    fn canonical_two_state() {
        let s = canonical_structure(&two_state()).unwrap();
        assert_eq!(s.eigenvalues().len(), 1);
        assert_abs_diff_eq!(s.eigenvalues()[0], -3.0, epsilon = 1e-10);
        // eigenvector proportional to (1, -1)
        let f = &s.eigenbasis()[0];
        assert_abs_diff_eq!(f.delta()[0], -f.delta()[1], epsilon = 1e-10);
    }

    #[test]
    fn canonical_rejects_cyclic() {
        assert!(matches!(
            canonical_structure(&cyclic3()),
            Err(StructureError::NotRepresentable { .. })
        ));
    }

    #[test]
    fn canonical_verification_identity() {
        // g(μQ, f_j) = λ_j a_j = -d𝔉|μ(f_j) at interior points.
        let q = two_state();
        let s = canonical_structure(&q).unwrap();
        let f = s.functional();
        let mu = Distribution::new(DVector::from_vec(vec![0.4, 0.6])).unwrap();
        let a = s.eigen_coords(&mu);
        let mu_q = TangentVector::project((mu.mass().transpose() * q.rates()).transpose());
        for (j, fj) in s.eigenbasis().iter().enumerate() {
            let lhs = s.metric().apply(&mu_q, fj);
            assert_abs_diff_eq!(lhs, s.eigenvalues()[j] * a[j], epsilon = 1e-10);
            let grad = f.gradient(&mu).unwrap();
            let dfj = grad.dot(&tangent_coords(fj));
            assert_abs_diff_eq!(lhs, -dfj, epsilon = 1e-10);
        }
    }

    #[test]
    fn detailed_balance_two_state() {
        let db = check_detailed_balance(&two_state()).unwrap();
        assert!(db.reversible);
    }

    #[test]
    fn detailed_balance_cyclic_fails() {
        let db = check_detailed_balance(&cyclic3()).unwrap();
        assert!(!db.reversible);
        assert_abs_diff_eq!(db.asymmetry, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn witness_two_state() {
        let a = reversibility_witness(&two_state()).unwrap();
        let expected = DMatrix::from_row_slice(
            2,
            2,
            &[2.0 / 3.0, -2.0 / 3.0, -2.0 / 3.0, 2.0 / 3.0],
        );
        assert_abs_diff_eq!(&a, &expected, epsilon = 1e-12);
        // rows sum to zero
        for i in 0..2 {
            assert_abs_diff_eq!(a.row(i).sum(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn witness_rejects_cyclic() {
        assert!(matches!(
            reversibility_witness(&cyclic3()),
            Err(StructureError::NotReversible { .. })
        ));
    }

    #[test]
    fn entropy_metric_on_nonreversible_is_asymmetric() {
        // A non-reversible but real-diagonalisable 3-state chain; the
        // dichotomy says the solved form cannot be symmetric.
        let q = gen(&[
            &[-3.0, 2.0, 1.0],
            &[0.5, -1.0, 0.5],
            &[1.5, 0.3, -1.8],
        ]);
        let db = check_detailed_balance(&q).unwrap();
        assert!(!db.reversible);
        let pi = markov_core::stationary_distribution(&q).unwrap();
        let m = entropy::entropy_hessian_at_pi(&pi);
        match metric_at_pi(&q, &m).unwrap() {
            MetricVerdict::NotAMetric { reason, .. } => {
                assert_eq!(reason, NotAMetricReason::Asymmetric)
            }
            MetricVerdict::Metric(_) => panic!("non-reversible chain produced a metric"),
        }
    }
}
