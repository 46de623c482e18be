//! Relative entropy, derivative probes, and the entropy-rigidity checker for
//! candidate functionals.
//!
//! Functionals are carried as black-box evaluators (plus an optional analytic
//! gradient) so the compatibility checker works on user-supplied 𝔉, not just
//! the relative entropy; central finite differences are the fallback
//! derivative. All bilinear forms are matrices in the fixed
//! [`crate::spectral::tangent_basis`] coordinates.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;
use crate::markov_core::{Distribution, TangentVector};
use crate::spectral::{tangent_basis, tangent_coords};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EntropyError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("probe point too close to the simplex boundary (margin {margin:e}, need > {need:e})")]
    BoundaryTooClose { margin: f64, need: f64 },
    #[error("N(v,·) vanishes; the profile is undefined")]
    DegenerateN,
    #[error("bilinear form is not symmetric (asymmetry {asymmetry:e})")]
    AsymmetricForm { asymmetry: f64 },
}

/// Symmetric bilinear form on the tangent space, as a `d x d` matrix in the
/// fixed tangent-basis coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearFormOnT {
    matrix: DMatrix<f64>,
}

impl BilinearFormOnT {
    /// Requires symmetry within `1e-10 * max|entries|`; stores the
    /// symmetrised matrix.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self, EntropyError> {
        assert_eq!(matrix.nrows(), matrix.ncols());
        let scale = linalg::max_abs(&matrix);
        let asym = linalg::max_abs(&(&matrix - matrix.transpose()));
        if asym > 1e-10 * scale.max(f64::MIN_POSITIVE) {
            return Err(EntropyError::AsymmetricForm { asymmetry: asym });
        }
        Ok(Self::symmetrize(matrix))
    }

    /// Symmetrises unconditionally; for numerically produced forms.
    pub fn symmetrize(matrix: DMatrix<f64>) -> Self {
        let sym = (&matrix + matrix.transpose()) * 0.5;
        Self { matrix: sym }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Evaluates the form on two tangent vectors (ambient representation).
    pub fn apply(&self, w: &TangentVector, v: &TangentVector) -> f64 {
        let cw = tangent_coords(w);
        let cv = tangent_coords(v);
        (cw.transpose() * &self.matrix * cv)[(0, 0)]
    }

    /// Smallest eigenvalue (the form is symmetric).
    pub fn min_eigenvalue(&self) -> f64 {
        linalg::symmetric_eigenvalues(&self.matrix)[0]
    }
}

type Evaluator = Arc<dyn Fn(&Distribution) -> f64 + Send + Sync>;
type GradientFn = Arc<dyn Fn(&Distribution) -> DVector<f64> + Send + Sync>;

/// A functional on the simplex interior: a black-box evaluator plus an
/// optional analytic gradient returning a covector in tangent-basis
/// coordinates. Evaluators must be safe for concurrent calls.
#[derive(Clone)]
pub struct Functional {
    evaluate: Evaluator,
    gradient: Option<GradientFn>,
}

impl Functional {
    pub fn new(evaluate: impl Fn(&Distribution) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            evaluate: Arc::new(evaluate),
            gradient: None,
        }
    }

    pub fn with_gradient(
        mut self,
        gradient: impl Fn(&Distribution) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    pub fn evaluate(&self, rho: &Distribution) -> f64 {
        (self.evaluate)(rho)
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    /// Analytic gradient if present, else central differences with the
    /// default step.
    pub fn gradient(&self, rho: &Distribution) -> Result<DVector<f64>, EntropyError> {
        match &self.gradient {
            Some(g) => Ok(g(rho)),
            None => fd_gradient(self, rho, DEFAULT_GRADIENT_STEP),
        }
    }

    /// Relative entropy `ℋ(· | π)` with its analytic gradient.
    pub fn relative_entropy(pi: &Distribution) -> Self {
        let pi_eval = pi.clone();
        let pi_grad = pi.clone();
        Self::new(move |rho| rel_entropy(rho, &pi_eval).expect("dimensions fixed at build"))
            .with_gradient(move |rho| {
                let d = rho.len() - 1;
                let last = (rho.mass()[d] / pi_grad.mass()[d]).ln();
                DVector::from_fn(d, |i, _| (rho.mass()[i] / pi_grad.mass()[i]).ln() - last)
            })
    }

    /// `c · f`, keeping the analytic gradient when present.
    pub fn scaled(&self, c: f64) -> Self {
        let eval = self.evaluate.clone();
        let grad = self.gradient.clone();
        Self {
            evaluate: Arc::new(move |rho| c * eval(rho)),
            gradient: grad.map(|g| {
                let g: GradientFn = Arc::new(move |rho: &Distribution| g(rho) * c);
                g
            }),
        }
    }
}

impl std::fmt::Debug for Functional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Functional")
            .field("analytic_gradient", &self.gradient.is_some())
            .finish()
    }
}

pub const DEFAULT_GRADIENT_STEP: f64 = 1e-5;
pub const DEFAULT_HESSIAN_STEP: f64 = 1e-4;

/// Relative entropy `ℋ(ρ) = -Σ ρ_i log(π_i / ρ_i)`; nonnegative, zero iff
/// `ρ = π`.
pub fn rel_entropy(rho: &Distribution, pi: &Distribution) -> Result<f64, EntropyError> {
    if rho.len() != pi.len() {
        return Err(EntropyError::DimensionMismatch {
            left: rho.len(),
            right: pi.len(),
        });
    }
    Ok(rho
        .mass()
        .iter()
        .zip(pi.mass().iter())
        .map(|(&r, &p)| -r * (p / r).ln())
        .sum())
}

/// The entropy Hessian at π restricted to the tangent space:
/// `N(w, v) = Σ_α w_α v_α / π_α` in tangent-basis coordinates, i.e.
/// `N_ij = δ_ij / π_i + 1 / π_d`.
pub fn entropy_hessian_at_pi(pi: &Distribution) -> BilinearFormOnT {
    let d = pi.len() - 1;
    let last = 1.0 / pi.mass()[d];
    let m = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0 / pi.mass()[i] + last
        } else {
            last
        }
    });
    BilinearFormOnT::symmetrize(m)
}

fn check_margin(rho: &Distribution, need: f64) -> Result<(), EntropyError> {
    let margin = rho.min_coord();
    if margin <= need {
        return Err(EntropyError::BoundaryTooClose { margin, need });
    }
    Ok(())
}

fn shifted(rho: &Distribution, dirs: &[(f64, &TangentVector)]) -> Distribution {
    let mut mass = rho.mass().clone();
    for (step, v) in dirs {
        mass += v.delta() * *step;
    }
    Distribution::new(mass).expect("margin precondition keeps the point interior")
}

/// Central-difference gradient along the tangent basis; covector in
/// tangent-basis coordinates.
pub fn fd_gradient(
    f: &Functional,
    rho: &Distribution,
    h: f64,
) -> Result<DVector<f64>, EntropyError> {
    assert!(h > 0.0);
    check_margin(rho, 2.0 * h)?;
    let d = rho.len() - 1;
    let basis = tangent_basis(d);
    Ok(DVector::from_fn(d, |i, _| {
        let plus = f.evaluate(&shifted(rho, &[(h, &basis[i])]));
        let minus = f.evaluate(&shifted(rho, &[(-h, &basis[i])]));
        (plus - minus) / (2.0 * h)
    }))
}

/// Second-order central-difference Hessian over tangent-basis pairs,
/// symmetrised.
pub fn fd_hessian(
    f: &Functional,
    rho: &Distribution,
    h: f64,
) -> Result<BilinearFormOnT, EntropyError> {
    assert!(h > 0.0);
    check_margin(rho, 4.0 * h)?;
    let d = rho.len() - 1;
    let basis = tangent_basis(d);
    let f0 = f.evaluate(rho);
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        let plus = f.evaluate(&shifted(rho, &[(h, &basis[i])]));
        let minus = f.evaluate(&shifted(rho, &[(-h, &basis[i])]));
        m[(i, i)] = (plus - 2.0 * f0 + minus) / (h * h);
        for j in (i + 1)..d {
            let pp = f.evaluate(&shifted(rho, &[(h, &basis[i]), (h, &basis[j])]));
            let pm = f.evaluate(&shifted(rho, &[(h, &basis[i]), (-h, &basis[j])]));
            let mp = f.evaluate(&shifted(rho, &[(-h, &basis[i]), (h, &basis[j])]));
            let mm = f.evaluate(&shifted(rho, &[(-h, &basis[i]), (-h, &basis[j])]));
            let v = (pp - pm - mp + mm) / (4.0 * h * h);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(BilinearFormOnT::symmetrize(m))
}

/// Outcome of the slice-proportionality probe `M(v,·) =? α N(v,·)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Proportionality {
    Ratio(f64),
    NotProportional,
}

/// Compares the covectors `M(v,·)` and `N(v,·)` on T; returns the ratio when
/// they are parallel within relative tolerance 1e-8.
pub fn proportionality_profile(
    m: &BilinearFormOnT,
    n: &BilinearFormOnT,
    v: &TangentVector,
) -> Result<Proportionality, EntropyError> {
    let c = tangent_coords(v);
    let mv = m.matrix() * &c;
    let nv = n.matrix() * &c;
    let n_scale = linalg::max_abs(n.matrix()) * linalg::max_abs_vec(&c);
    if linalg::max_abs_vec(&nv) <= 1e-12 * n_scale.max(f64::MIN_POSITIVE) {
        return Err(EntropyError::DegenerateN);
    }
    let alpha = mv.dot(&nv) / nv.dot(&nv);
    let residual = linalg::max_abs_vec(&(&mv - &nv * alpha));
    let m_scale = linalg::max_abs_vec(&mv).max(linalg::max_abs_vec(&nv) * alpha.abs());
    if residual <= 1e-8 * m_scale.max(f64::MIN_POSITIVE) {
        Ok(Proportionality::Ratio(alpha))
    } else {
        Ok(Proportionality::NotProportional)
    }
}

/// Why a functional fails the entropy 2-jet rigidity test at π.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IncompatibilityReason {
    NonzeroGradient,
    HessianNotProportional,
    AlphaNotPositive,
}

impl std::fmt::Display for IncompatibilityReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::NonzeroGradient => write!(f, "NonzeroGradient"),
            Self::HessianNotProportional => write!(f, "HessianNotProportional"),
            Self::AlphaNotPositive => write!(f, "AlphaNotPositive"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Compatibility {
    /// `d𝔉|π = 0` and `d²𝔉|π = α d²ℋ|π` with this positive α.
    Compatible { alpha: f64 },
    Incompatible(IncompatibilityReason),
}

/// Tests the necessary condition for 𝔉 to generate gradient flows for every
/// reversible chain with stationary state π: vanishing first derivative and
/// second derivative proportional to the entropy Hessian with a single
/// positive constant.
pub fn entropy_compatibility_check(
    f: &Functional,
    pi: &Distribution,
) -> Result<Compatibility, EntropyError> {
    let grad = fd_gradient(f, pi, DEFAULT_GRADIENT_STEP)?;
    let hess = fd_hessian(f, pi, DEFAULT_HESSIAN_STEP)?;
    let scale = linalg::max_abs(hess.matrix()).max(1.0);
    if linalg::max_abs_vec(&grad) > 1e-6 * scale {
        return Ok(Compatibility::Incompatible(
            IncompatibilityReason::NonzeroGradient,
        ));
    }

    // Least-squares fit of α over the d(d+1)/2 independent entries, then a
    // relative-residual test; entrywise ratios would divide by near-zero
    // entries.
    let n_form = entropy_hessian_at_pi(pi);
    let d = n_form.dim();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..d {
        for j in i..d {
            num += hess.matrix()[(i, j)] * n_form.matrix()[(i, j)];
            den += n_form.matrix()[(i, j)] * n_form.matrix()[(i, j)];
        }
    }
    let alpha = num / den;
    let mut res2 = 0.0;
    let mut ref2 = 0.0;
    for i in 0..d {
        for j in i..d {
            let r = hess.matrix()[(i, j)] - alpha * n_form.matrix()[(i, j)];
            res2 += r * r;
            ref2 += hess.matrix()[(i, j)] * hess.matrix()[(i, j)];
        }
    }
    if res2.sqrt() > 1e-4 * ref2.sqrt().max(f64::MIN_POSITIVE) {
        return Ok(Compatibility::Incompatible(
            IncompatibilityReason::HessianNotProportional,
        ));
    }
    if alpha <= 0.0 {
        return Ok(Compatibility::Incompatible(
            IncompatibilityReason::AlphaNotPositive,
        ));
    }
    Ok(Compatibility::Compatible { alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dist(xs: &[f64]) -> Distribution {
        Distribution::new(DVector::from_row_slice(xs)).unwrap()
    }

    #[test]
    fn rel_entropy_zero_at_pi() {
        let pi = dist(&[2.0 / 3.0, 1.0 / 3.0]);
        assert_abs_diff_eq!(rel_entropy(&pi, &pi).unwrap(), 0.0, epsilon = 1e-15);
        let u3 = dist(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        assert_abs_diff_eq!(rel_entropy(&u3, &u3).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn rel_entropy_half_half() {
        let rho = dist(&[0.5, 0.5]);
        let pi = dist(&[2.0 / 3.0, 1.0 / 3.0]);
        // ½ ln(9/8)
        assert_abs_diff_eq!(
            rel_entropy(&rho, &pi).unwrap(),
            0.5 * (9.0f64 / 8.0).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn rel_entropy_dimension_mismatch() {
        let rho = dist(&[0.5, 0.5]);
        let pi = dist(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        assert!(matches!(
            rel_entropy(&rho, &pi),
            Err(EntropyError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn hessian_two_state() {
        let pi = dist(&[2.0 / 3.0, 1.0 / 3.0]);
        let h = entropy_hessian_at_pi(&pi);
        assert_abs_diff_eq!(h.matrix()[(0, 0)], 4.5, epsilon = 1e-12);
    }

    #[test]
    fn hessian_uniform_three_state() {
        let pi = dist(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        let h = entropy_hessian_at_pi(&pi);
        let expected = DMatrix::from_row_slice(2, 2, &[6.0, 3.0, 3.0, 6.0]);
        assert_abs_diff_eq!(h.matrix(), &expected, epsilon = 1e-12);
    }

    #[test]
    fn hessian_positive_definite() {
        let pi = dist(&[0.1, 0.2, 0.3, 0.4]);
        assert!(entropy_hessian_at_pi(&pi).min_eigenvalue() > 0.0);
    }

    #[test]
    fn fd_gradient_constant_is_zero() {
        let f = Functional::new(|_| 42.0);
        let rho = dist(&[0.3, 0.3, 0.4]);
        let g = fd_gradient(&f, &rho, 1e-5).unwrap();
        assert!(linalg::max_abs_vec(&g) < 1e-9);
    }

    #[test]
    fn fd_gradient_of_entropy_vanishes_at_pi() {
        let pi = dist(&[0.25, 0.35, 0.4]);
        let f = Functional::relative_entropy(&pi);
        let g = fd_gradient(&f, &pi, 1e-5).unwrap();
        assert!(linalg::max_abs_vec(&g) < 1e-8);
    }

    #[test]
    fn fd_gradient_exact_on_linear() {
        let c = [0.7, -0.2, 1.3];
        let f = Functional::new(move |rho: &Distribution| {
            rho.mass().iter().zip(c.iter()).map(|(r, k)| r * k).sum()
        });
        let rho = dist(&[0.3, 0.3, 0.4]);
        let g = fd_gradient(&f, &rho, 1e-5).unwrap();
        assert_abs_diff_eq!(g[0], c[0] - c[2], epsilon = 1e-9);
        assert_abs_diff_eq!(g[1], c[1] - c[2], epsilon = 1e-9);
    }

    #[test]
    fn fd_gradient_boundary_guard() {
        let f = Functional::new(|_| 0.0);
        let rho = dist(&[1e-6, 0.5, 0.499999]);
        assert!(matches!(
            fd_gradient(&f, &rho, 1e-5),
            Err(EntropyError::BoundaryTooClose { .. })
        ));
    }

    #[test]
    fn fd_hessian_matches_analytic_entropy_hessian() {
        let pi = dist(&[0.2, 0.3, 0.5]);
        let f = Functional::relative_entropy(&pi);
        let fd = fd_hessian(&f, &pi, 1e-4).unwrap();
        let exact = entropy_hessian_at_pi(&pi);
        let err = linalg::max_abs(&(fd.matrix() - exact.matrix()));
        assert!(err <= 1e-4 * linalg::max_abs(exact.matrix()));
    }

    #[test]
    fn fd_hessian_recovers_quadratic() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let a2 = a.clone();
        let center = dist(&[0.3, 0.3, 0.4]);
        let c2 = center.clone();
        let f = Functional::new(move |rho: &Distribution| {
            let v = TangentVector::project(rho.mass() - c2.mass());
            let c = tangent_coords(&v);
            0.5 * (c.transpose() * &a2 * c)[(0, 0)]
        });
        let fd = fd_hessian(&f, &center, 1e-4).unwrap();
        let err = linalg::max_abs(&(fd.matrix() - &a));
        assert!(err <= 1e-6 * linalg::max_abs(&a), "err {err:e}");
    }

    #[test]
    fn fd_hessian_constant_is_zero() {
        let f = Functional::new(|_| -3.0);
        let rho = dist(&[0.3, 0.3, 0.4]);
        let fd = fd_hessian(&f, &rho, 1e-4).unwrap();
        assert!(linalg::max_abs(fd.matrix()) < 1e-6);
    }

    #[test]
    fn proportionality_scalar_multiple() {
        let n = BilinearFormOnT::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 3.0]))
            .unwrap();
        let m = BilinearFormOnT::symmetrize(n.matrix() * 2.0);
        let v = TangentVector::new(DVector::from_vec(vec![1.0, 0.5, -1.5])).unwrap();
        assert_eq!(
            proportionality_profile(&m, &n, &v).unwrap(),
            Proportionality::Ratio(2.0)
        );
        assert_eq!(
            proportionality_profile(&n, &n, &v).unwrap(),
            Proportionality::Ratio(1.0)
        );
    }

    #[test]
    fn proportionality_detects_mismatch() {
        let m = BilinearFormOnT::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]))
            .unwrap();
        let n = BilinearFormOnT::new(DMatrix::identity(2, 2)).unwrap();
        let v = TangentVector::new(DVector::from_vec(vec![1.0, 1.0, -2.0])).unwrap();
        assert_eq!(
            proportionality_profile(&m, &n, &v).unwrap(),
            Proportionality::NotProportional
        );
    }

    #[test]
    fn compatibility_self() {
        let pi = dist(&[0.2, 0.3, 0.5]);
        let f = Functional::relative_entropy(&pi);
        match entropy_compatibility_check(&f, &pi).unwrap() {
            Compatibility::Compatible { alpha } => {
                assert_abs_diff_eq!(alpha, 1.0, epsilon = 1e-4)
            }
            other => panic!("expected compatible, got {other:?}"),
        }
    }

    #[test]
    fn compatibility_scaled() {
        let pi = dist(&[0.2, 0.3, 0.5]);
        let f = Functional::relative_entropy(&pi).scaled(2.5);
        match entropy_compatibility_check(&f, &pi).unwrap() {
            Compatibility::Compatible { alpha } => {
                assert_abs_diff_eq!(alpha, 2.5, epsilon = 2.5 * 1e-4)
            }
            other => panic!("expected compatible, got {other:?}"),
        }
    }

    #[test]
    fn compatibility_rejects_euclidean_quadratic() {
        // Σ (ρ_i - π_i)² with non-uniform π: ambient identity Hessian is not
        // proportional to diag(1/π) on T.
        let pi = dist(&[0.2, 0.3, 0.5]);
        let pi2 = pi.clone();
        let f = Functional::new(move |rho: &Distribution| {
            rho.mass()
                .iter()
                .zip(pi2.mass().iter())
                .map(|(r, p)| (r - p) * (r - p))
                .sum()
        });
        assert_eq!(
            entropy_compatibility_check(&f, &pi).unwrap(),
            Compatibility::Incompatible(IncompatibilityReason::HessianNotProportional)
        );
    }
}
