//! Gradient-flow integration for arbitrary metric fields and functionals,
//! comparison against the Markov semigroup, and the localized metric
//! perturbation that realises non-uniqueness.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::entropy::{BilinearFormOnT, EntropyError, Functional};
use crate::linalg;
use crate::markov_core::{self, Distribution, Generator, TangentVector};
use crate::spectral::{tangent_basis, tangent_coords, tangent_from_coords};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("trajectory left the simplex interior at t = {t}")]
    LeftSimplex { t: f64 },
    #[error("metric form is singular at t = {t}")]
    SingularMetric { t: f64 },
    #[error("gradient evaluation failed: {0}")]
    Gradient(#[from] EntropyError),
    #[error("frame field undefined at equilibrium (‖μQ‖ ≈ 0)")]
    AtEquilibrium,
    #[error("metric perturbation needs d ≥ 2, got d = {d}")]
    DimensionTooSmall { d: usize },
    #[error("perturbation breaks positive definiteness")]
    PerturbationTooLarge,
    #[error("support ball touches the equilibrium distribution")]
    SupportTouchesEquilibrium,
    #[error("support ball touches the simplex boundary")]
    SupportTouchesBoundary,
}

/// A Riemannian metric on the simplex interior: a map from points to
/// symmetric positive definite forms in tangent-basis coordinates. The
/// evaluator must tolerate concurrent calls.
#[derive(Clone)]
pub struct MetricField {
    at: Arc<dyn Fn(&Distribution) -> BilinearFormOnT + Send + Sync>,
}

impl MetricField {
    pub fn new(at: impl Fn(&Distribution) -> BilinearFormOnT + Send + Sync + 'static) -> Self {
        Self { at: Arc::new(at) }
    }

    pub fn at(&self, rho: &Distribution) -> BilinearFormOnT {
        (self.at)(rho)
    }
}

impl std::fmt::Debug for MetricField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricField").finish()
    }
}

/// A sampled curve on the simplex interior.
#[derive(Debug, Clone)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<Distribution>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<Distribution>) -> Self {
        assert_eq!(times.len(), states.len());
        assert!(!times.is_empty() && times[0] == 0.0);
        assert!(times.windows(2).all(|w| w[0] < w[1]));
        Self { times, states }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Distribution] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

const INTERIOR_FLOOR: f64 = 1e-12;

fn interior_point(mass: DVector<f64>, t: f64) -> Result<Distribution, FlowError> {
    if mass.iter().any(|&x| x < INTERIOR_FLOOR) {
        return Err(FlowError::LeftSimplex { t });
    }
    Distribution::new_renormalized(mass, 1e-9).map_err(|_| FlowError::LeftSimplex { t })
}

/// Integrates `ρ̇ = -G(ρ)⁻¹ ∇𝔉(ρ)` (tangent-basis coordinates) with
/// classical fixed-step RK4. Boundary contact is an error, never clipped:
/// clipping would silently change the flow and mask divergence.
pub fn gradient_flow_integrate(
    g: &MetricField,
    f: &Functional,
    rho0: &Distribution,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory, FlowError> {
    assert!(dt > 0.0 && t_end > 0.0);
    let field = |rho: &Distribution, t: f64| -> Result<DVector<f64>, FlowError> {
        let grad = f.gradient(rho)?;
        let form = g.at(rho);
        let coords = form
            .matrix()
            .clone()
            .lu()
            .solve(&(-grad))
            .ok_or(FlowError::SingularMetric { t })?;
        Ok(tangent_from_coords(&coords).delta().clone())
    };

    let steps = (t_end / dt - 1e-9).ceil().max(1.0) as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut rho = rho0.clone();
    let mut t = 0.0;
    times.push(0.0);
    states.push(rho.clone());
    for k in 0..steps {
        let t_next = if k + 1 == steps { t_end } else { (k + 1) as f64 * dt };
        let h = t_next - t;
        let k1 = field(&rho, t)?;
        let p2 = interior_point(rho.mass() + &k1 * (h / 2.0), t)?;
        let k2 = field(&p2, t + h / 2.0)?;
        let p3 = interior_point(rho.mass() + &k2 * (h / 2.0), t)?;
        let k3 = field(&p3, t + h / 2.0)?;
        let p4 = interior_point(rho.mass() + &k3 * h, t)?;
        let k4 = field(&p4, t_next)?;
        let increment = (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        rho = interior_point(rho.mass() + increment, t_next)?;
        t = t_next;
        times.push(t);
        states.push(rho.clone());
    }
    Ok(Trajectory::new(times, states))
}

/// Sup over sampled times of the ∞-distance between the gradient flow under
/// `(g, f)` and the semigroup law evolution, both from `ρ0`. At most ~100
/// sample times are compared against the matrix-exponential oracle.
pub fn compare_flows(
    q: &Generator,
    g: &MetricField,
    f: &Functional,
    rho0: &Distribution,
    t_end: f64,
    dt: f64,
) -> Result<f64, FlowError> {
    let traj = gradient_flow_integrate(g, f, rho0, t_end, dt)?;
    let stride = (traj.len() / 100).max(1);
    let mut max_dev = 0.0f64;
    let last = traj.len() - 1;
    for idx in (0..traj.len()).step_by(stride).chain([last]) {
        let t = traj.times()[idx];
        let oracle = markov_core::semigroup_evolve(q, rho0, t);
        max_dev = max_dev.max(traj.states()[idx].sup_distance(&oracle));
    }
    Ok(max_dev)
}

/// The moving frame of the non-uniqueness construction: `e₁ = μQ`, completed
/// to a basis of T by Gram–Schmidt over the fixed tangent-basis candidates.
pub fn frame_field(q: &Generator, mu: &Distribution) -> Result<Vec<TangentVector>, FlowError> {
    let d = q.n_states() - 1;
    let e1 = TangentVector::project((mu.mass().transpose() * q.rates()).transpose());
    if linalg::max_abs_vec(e1.delta()) <= 1e-12 * q.max_abs() {
        return Err(FlowError::AtEquilibrium);
    }
    let mut frame = vec![e1];
    for candidate in tangent_basis(d) {
        if frame.len() == d {
            break;
        }
        let mut r = candidate.delta().clone();
        for e in &frame {
            let coef = r.dot(e.delta()) / e.delta().dot(e.delta());
            r -= e.delta() * coef;
        }
        let norm = r.norm();
        if norm >= 1e-10 * candidate.delta().norm() {
            frame.push(TangentVector::project(r / norm));
        }
    }
    debug_assert_eq!(frame.len(), d, "tangent basis candidates span T");
    Ok(frame)
}

/// Smooth cutoff: `exp(1 - 1/(1 - r²))` for `r = ‖μ - center‖₂ / radius < 1`,
/// zero outside; equals 1 at the center.
pub fn bump(mu: &Distribution, center: &Distribution, radius: f64) -> f64 {
    assert!(radius > 0.0);
    let r = (mu.mass() - center.mass()).norm() / radius;
    if r < 1.0 {
        (1.0 - 1.0 / (1.0 - r * r)).exp()
    } else {
        0.0
    }
}

/// The non-uniqueness perturbation: inside the support ball around `ρ` the
/// metric gains `η(μ)·a` on the `(e₂, e₂)` entry of the moving frame, leaving
/// every pairing with `e₁ = μQ` untouched, so the gradient flow is unchanged.
pub fn perturbed_metric(
    g: &MetricField,
    q: &Generator,
    rho: &Distribution,
    a: f64,
    radius: f64,
) -> Result<MetricField, FlowError> {
    let d = q.n_states() - 1;
    if d < 2 {
        return Err(FlowError::DimensionTooSmall { d });
    }
    let pi = markov_core::stationary_distribution(q).map_err(|_| FlowError::AtEquilibrium)?;
    if (rho.mass() - pi.mass()).norm() <= radius {
        return Err(FlowError::SupportTouchesEquilibrium);
    }
    if rho.min_coord() <= radius {
        return Err(FlowError::SupportTouchesBoundary);
    }

    let g_inner = g.clone();
    let q_inner = q.clone();
    let center = rho.clone();
    let field = MetricField::new(move |mu: &Distribution| {
        let base = g_inner.at(mu);
        let eta = bump(mu, &center, radius);
        if eta == 0.0 {
            return base;
        }
        let frame = frame_field(&q_inner, mu)
            .expect("support ball avoids the equilibrium, so the frame exists");
        let dd = frame.len();
        let p = DMatrix::from_fn(dd, dd, |i, j| tangent_coords(&frame[i])[j]);
        // Express the form in the frame, patch the (e₂,e₂) entry, pull back.
        let mut hat = &p * base.matrix() * p.transpose();
        hat[(1, 1)] += eta * a;
        let p_inv = p.try_inverse().expect("frame spans T");
        BilinearFormOnT::symmetrize(&p_inv * hat * p_inv.transpose())
    });

    // Positive-definiteness budget at the center, where η = 1.
    let base_min = g.at(rho).min_eigenvalue();
    let pert_min = field.at(rho).min_eigenvalue();
    if pert_min < 0.5 * base_min {
        return Err(FlowError::PerturbationTooLarge);
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::canonical_structure;
    use approx::assert_abs_diff_eq;

    fn gen(rows: &[&[f64]]) -> Generator {
        let n = rows.len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Generator::new(DMatrix::from_row_slice(n, n, &flat)).unwrap()
    }

    fn two_state() -> Generator {
        gen(&[&[-1.0, 1.0], &[2.0, -2.0]])
    }

    fn reversible3() -> Generator {
        gen(&[
            &[-2.0, 1.0, 1.0],
            &[1.0, -2.0, 1.0],
            &[1.0, 1.0, -2.0],
        ])
    }

    fn dist(xs: &[f64]) -> Distribution {
        Distribution::new(DVector::from_row_slice(xs)).unwrap()
    }

    #[test]
    fn stationary_start_stays_put() {
        let q = two_state();
        let s = canonical_structure(&q).unwrap();
        let traj = gradient_flow_integrate(
            &s.metric_field(),
            &s.functional(),
            s.pi(),
            1.0,
            1e-2,
        )
        .unwrap();
        for state in traj.states() {
            assert!(state.sup_distance(s.pi()) < 1e-12);
        }
    }

    #[test]
    fn canonical_flow_matches_semigroup() {
        let q = two_state();
        let s = canonical_structure(&q).unwrap();
        let eps = 1e-6;
        let rho0 = dist(&[1.0 - eps, eps]);
        let dev = compare_flows(
            &q,
            &s.metric_field(),
            &s.functional(),
            &rho0,
            1.0,
            1e-3,
        )
        .unwrap();
        assert!(dev <= 1e-6, "deviation {dev:e}");
    }

    #[test]
    fn wrong_functional_scaling_diverges() {
        let q = two_state();
        let s = canonical_structure(&q).unwrap();
        let rho0 = dist(&[0.9, 0.1]);
        let dev = compare_flows(
            &q,
            &s.metric_field(),
            &s.functional().scaled(2.0),
            &rho0,
            1.0,
            1e-3,
        )
        .unwrap();
        assert!(dev > 1e-2, "deviation {dev:e}");
    }

    #[test]
    fn reversed_functional_increases_entropy() {
        let q = two_state();
        let s = canonical_structure(&q).unwrap();
        let f = s.functional();
        let rho0 = dist(&[0.5, 0.5]);
        let traj = gradient_flow_integrate(
            &s.metric_field(),
            &f.scaled(-1.0),
            &rho0,
            0.1,
            1e-3,
        )
        .unwrap();
        let first = f.evaluate(&traj.states()[0]);
        let last = f.evaluate(traj.states().last().unwrap());
        assert!(last > first);
    }

    #[test]
    fn mass_conserved_along_integration() {
        let q = reversible3();
        let s = canonical_structure(&q).unwrap();
        let rho0 = dist(&[0.6, 0.3, 0.1]);
        let traj = gradient_flow_integrate(
            &s.metric_field(),
            &s.functional(),
            &rho0,
            1.0,
            1e-3,
        )
        .unwrap();
        for state in traj.states() {
            assert_abs_diff_eq!(state.mass().sum(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn frame_two_state_is_mu_q() {
        let q = two_state();
        let mu = dist(&[0.5, 0.5]);
        let frame = frame_field(&q, &mu).unwrap();
        assert_eq!(frame.len(), 1);
        let expected = (mu.mass().transpose() * q.rates()).transpose();
        for i in 0..2 {
            assert_abs_diff_eq!(frame[0].delta()[i], expected[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn frame_spans_tangent_space() {
        let q = reversible3();
        let mu = dist(&[0.6, 0.3, 0.1]);
        let frame = frame_field(&q, &mu).unwrap();
        assert_eq!(frame.len(), 2);
        let p = DMatrix::from_fn(2, 2, |i, j| tangent_coords(&frame[i])[j]);
        assert!(linalg::condition_number(&p) < 1e8);
    }

    #[test]
    fn frame_fails_at_equilibrium() {
        let q = two_state();
        let pi = markov_core::stationary_distribution(&q).unwrap();
        assert_eq!(frame_field(&q, &pi).unwrap_err(), FlowError::AtEquilibrium);
    }

    #[test]
    fn bump_values() {
        let center = dist(&[0.5, 0.3, 0.2]);
        assert_abs_diff_eq!(bump(&center, &center, 0.1), 1.0, epsilon = 1e-15);
        let far = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(bump(&far, &center, 0.1), 0.0);
        // r = 1/√2 gives exp(1 - 2) = e⁻¹
        let radius = 0.1;
        let r = 1.0 / 2f64.sqrt();
        let mut mass = center.mass().clone();
        let dir = DVector::from_vec(vec![1.0, -1.0, 0.0]).normalize();
        mass += dir * (r * radius);
        let mu = Distribution::new_renormalized(mass, 1e-9).unwrap();
        assert_abs_diff_eq!(bump(&mu, &center, radius), (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn perturbation_zero_is_identity() {
        let q = reversible3();
        let s = canonical_structure(&q).unwrap();
        let rho = dist(&[0.6, 0.3, 0.1]);
        let g = s.metric_field();
        let tilde = perturbed_metric(&g, &q, &rho, 0.0, 0.05).unwrap();
        let diff = linalg::max_abs(&(g.at(&rho).matrix() - tilde.at(&rho).matrix()));
        assert!(diff < 1e-12);
    }

    #[test]
    fn perturbation_changes_metric_at_center() {
        let q = reversible3();
        let s = canonical_structure(&q).unwrap();
        let rho = dist(&[0.6, 0.3, 0.1]);
        let g = s.metric_field();
        let tilde = perturbed_metric(&g, &q, &rho, 0.05, 0.05).unwrap();
        let diff = linalg::max_abs(&(g.at(&rho).matrix() - tilde.at(&rho).matrix()));
        assert!(diff > 1e-4, "diff {diff:e}");
    }

    #[test]
    fn perturbation_preserves_generator_pairing() {
        let q = reversible3();
        let s = canonical_structure(&q).unwrap();
        let rho = dist(&[0.6, 0.3, 0.1]);
        let g = s.metric_field();
        let tilde = perturbed_metric(&g, &q, &rho, 0.05, 0.05).unwrap();
        // g̃(μQ, v) = g(μQ, v) inside the ball
        let mu = rho.clone();
        let mu_q = TangentVector::project((mu.mass().transpose() * q.rates()).transpose());
        for v in tangent_basis(2) {
            let lhs = tilde.at(&mu).apply(&mu_q, &v);
            let rhs = g.at(&mu).apply(&mu_q, &v);
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
        }
    }

    #[test]
    fn perturbation_rejects_two_state() {
        let q = two_state();
        let s = canonical_structure(&q).unwrap();
        let rho = dist(&[0.9, 0.1]);
        assert_eq!(
            perturbed_metric(&s.metric_field(), &q, &rho, 0.01, 0.01).unwrap_err(),
            FlowError::DimensionTooSmall { d: 1 }
        );
    }

    #[test]
    fn perturbation_rejects_ball_over_equilibrium() {
        let q = reversible3();
        let s = canonical_structure(&q).unwrap();
        let err = perturbed_metric(&s.metric_field(), &q, s.pi(), 0.01, 0.05).unwrap_err();
        assert_eq!(err, FlowError::SupportTouchesEquilibrium);
    }

    #[test]
    fn perturbation_rejects_oversized_a() {
        let q = reversible3();
        let s = canonical_structure(&q).unwrap();
        let rho = dist(&[0.6, 0.3, 0.1]);
        let err =
            perturbed_metric(&s.metric_field(), &q, &rho, -1e6, 0.05).unwrap_err();
        assert_eq!(err, FlowError::PerturbationTooLarge);
    }
}
