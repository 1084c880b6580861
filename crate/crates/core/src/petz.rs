//! Petz reversal of Lindblad dynamics.
//!
//! Given a forward model and a full-rank reference trajectory gamma_t, the
//! reversed generator is again of Lindblad form with
//!   H~ = -1/2 (G H G^-1 + i hbar Gdot G^-1 + (i hbar / 2) sum G L^dag L G^-1) + h.c.
//!   L~_a = G L_a^dag G^-1,      G = gamma^{1/2}.
//! Integrating it backward from the forward endpoint recovers the reference
//! exactly and generic states approximately.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{CoreError, Result};
use crate::lindblad::{
    integrate_forward, rk4_matrix, IntegrateOptions, LindbladModel, SampledGenerator,
    StateTrajectory,
};
use crate::operator::{eigh, eigvalsh, DensityOperator, Operator};

/// Square root and inverse square root of a Hermitian PSD operator from one
/// eigendecomposition, with floor clamping.
fn sqrt_pair(op: &Operator, eps: f64) -> Result<(Operator, Operator, usize)> {
    let (vals, vecs) = eigh(op);
    let mut clamped = 0usize;
    for &v in &vals {
        if v < -1e-8 {
            return Err(CoreError::NegativeEigenvalue { value: v, floor: eps });
        }
        if v < eps {
            clamped += 1;
        }
    }
    let d = op.dim();
    let build = |f: &dyn Fn(f64) -> f64| -> Operator {
        let diag = nalgebra::DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                Complex64::new(f(vals[i].max(eps)), 0.0)
            } else {
                Complex64::ZERO
            }
        });
        let m = &vecs * diag * vecs.adjoint();
        let data = Array2::from_shape_fn((d, d), |(i, j)| m[(i, j)]);
        let mut out = Operator::from_array(op.space().clone(), data).unwrap();
        out.hermitize();
        out
    };
    Ok((build(&f64::sqrt), build(&|v| 1.0 / v.sqrt()), clamped))
}

/// Dense trajectory of the reference state with lazily computed
/// G_t = gamma_t^{1/2}, its inverse, and finite-difference Gdot_t.
pub struct ReferenceTrajectory {
    trajectory: StateTrajectory,
    eps: f64,
    /// Number of eigenvalues raised to the floor across the whole trajectory.
    pub clamp_events: usize,
    cache: Mutex<HashMap<usize, Arc<(Operator, Operator)>>>,
}

impl ReferenceTrajectory {
    /// Wrap a dense trajectory, validating full rank after eps-clamping.
    pub fn from_trajectory(trajectory: StateTrajectory, eps: f64) -> Result<Self> {
        let mut clamp_events = 0usize;
        for (t, state) in trajectory.times().iter().zip(trajectory.states()) {
            let vals = eigvalsh(state.operator());
            let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            if min < -1e-8 {
                return Err(CoreError::ReferenceDegeneracy { time: *t, value: min });
            }
            clamp_events += vals.iter().filter(|&&v| v < eps).count();
        }
        if clamp_events > 0 {
            log::warn!(
                "reference trajectory: {clamp_events} eigenvalue floor events at eps = {eps:.3e}"
            );
        }
        Ok(Self { trajectory, eps, clamp_events, cache: Mutex::new(HashMap::new()) })
    }

    pub fn times(&self) -> &[f64] {
        self.trajectory.times()
    }

    pub fn dt(&self) -> f64 {
        self.trajectory.dt
    }

    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }

    pub fn gamma(&self, index: usize) -> &DensityOperator {
        &self.trajectory.states()[index]
    }

    pub fn t_range(&self) -> (f64, f64) {
        let times = self.trajectory.times();
        (times[0], *times.last().unwrap())
    }

    /// Map a time to its grid index (must lie on the grid up to roundoff).
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let (t0, t1) = self.t_range();
        let dt = self.dt();
        let k = ((t - t0) / dt).round();
        let idx = k as isize;
        if idx < 0 || idx as usize >= self.len() || (t - (t0 + k * dt)).abs() > 1e-9 * dt.max(1.0) {
            return Err(CoreError::OutOfRange { time: t, t0, t1 });
        }
        Ok(idx as usize)
    }

    /// Bracketing indices and interpolation weight for an arbitrary time.
    fn bracket(&self, t: f64) -> Result<(usize, usize, f64)> {
        let (t0, t1) = self.t_range();
        let tol = 1e-9 * self.dt().max(1.0);
        if t < t0 - tol || t > t1 + tol {
            return Err(CoreError::OutOfRange { time: t, t0, t1 });
        }
        let x = ((t - t0) / self.dt()).clamp(0.0, (self.len() - 1) as f64);
        let lo = (x.floor() as usize).min(self.len() - 1);
        let hi = (lo + 1).min(self.len() - 1);
        Ok((lo, hi, x - lo as f64))
    }

    /// (G, G^{-1}) at a grid index, cached.
    pub fn g_pair(&self, index: usize) -> Result<Arc<(Operator, Operator)>> {
        if let Some(hit) = self.cache.lock().unwrap().get(&index) {
            return Ok(hit.clone());
        }
        let (g, g_inv, _) = sqrt_pair(self.gamma(index).operator(), self.eps)?;
        let pair = Arc::new((g, g_inv));
        let mut cache = self.cache.lock().unwrap();
        if cache.len() > 32 {
            cache.clear();
        }
        cache.insert(index, pair.clone());
        Ok(pair)
    }

    /// Gdot at a grid index: central differences inside, one-sided second
    /// order at the endpoints.
    pub fn g_dot(&self, index: usize) -> Result<Operator> {
        let n = self.len();
        let dt = self.dt();
        let g = |k: usize| -> Result<Operator> { Ok(self.g_pair(k)?.0.clone()) };
        let op = if n == 1 {
            Operator::zeros(self.gamma(0).space().clone())
        } else if index == 0 {
            let (g0, g1, g2) = (g(0)?, g(1)?, g(2.min(n - 1))?);
            if n == 2 {
                g1.sub(&g0)?.scale(Complex64::new(1.0 / dt, 0.0))
            } else {
                g0.scale(Complex64::new(-1.5, 0.0))
                    .add(&g1.scale(Complex64::new(2.0, 0.0)))?
                    .add(&g2.scale(Complex64::new(-0.5, 0.0)))?
                    .scale(Complex64::new(1.0 / dt, 0.0))
            }
        } else if index == n - 1 {
            if n == 2 {
                g(1)?.sub(&g(0)?)?.scale(Complex64::new(1.0 / dt, 0.0))
            } else {
                g(n - 1)?
                    .scale(Complex64::new(1.5, 0.0))
                    .add(&g(n - 2)?.scale(Complex64::new(-2.0, 0.0)))?
                    .add(&g(n - 3)?.scale(Complex64::new(0.5, 0.0)))?
                    .scale(Complex64::new(1.0 / dt, 0.0))
            }
        } else {
            g(index + 1)?
                .sub(&g(index - 1)?)?
                .scale(Complex64::new(0.5 / dt, 0.0))
        };
        Ok(op)
    }
}

/// Default eigenvalue floor for a reference state.
pub fn default_reference_floor(gamma: &DensityOperator) -> f64 {
    crate::operator::DEFAULT_EIG_FLOOR * gamma.operator().norm_max()
}

/// Forward-integrate the reference state densely and prepare the Petz data.
pub fn build_reference(
    model: &LindbladModel,
    gamma0: &DensityOperator,
    t0: f64,
    t1: f64,
    dt: f64,
    eps: f64,
) -> Result<ReferenceTrajectory> {
    let opts = IntegrateOptions { stride: 1, check_positivity: false, ..Default::default() };
    let trajectory = integrate_forward(model, gamma0, t0, t1, dt, &opts)?;
    ReferenceTrajectory::from_trajectory(trajectory, eps)
}

fn reversed_pair_at_index(
    model: &LindbladModel,
    reference: &ReferenceTrajectory,
    index: usize,
) -> Result<(Operator, Vec<Operator>)> {
    let t = reference.times()[index];
    let pair = reference.g_pair(index)?;
    let (g, g_inv) = (&pair.0, &pair.1);
    let g_dot = reference.g_dot(index)?;
    let hbar = model.hbar;

    let h = model.hamiltonian_at(t);
    let ls = model.lindblad_ops_at(t);

    let mut ldagl_sum = Operator::zeros(h.space().clone());
    for l in &ls {
        ldagl_sum = ldagl_sum.add(&l.dagger().matmul(l)?)?;
    }

    // X = -1/2 (G H G^-1 + i hbar Gdot G^-1 + (i hbar/2) G (sum L^dag L) G^-1)
    let ghg = g.matmul(&h)?.matmul(g_inv)?;
    let gdotg = g_dot.matmul(g_inv)?.scale(Complex64::new(0.0, hbar));
    let gmg = g
        .matmul(&ldagl_sum)?
        .matmul(g_inv)?
        .scale(Complex64::new(0.0, 0.5 * hbar));
    let x = ghg.add(&gdotg)?.add(&gmg)?.scale(Complex64::new(-0.5, 0.0));
    let mut h_tilde = x.add(&x.dagger())?;
    h_tilde.hermitize();

    let l_tilde: Result<Vec<Operator>> = ls
        .iter()
        .map(|l| g.matmul(&l.dagger())?.matmul(g_inv))
        .collect();
    Ok((h_tilde, l_tilde?))
}

/// Reversed Hamiltonian H~ at time t (grid-snapped construction with linear
/// interpolation between grid points).
pub fn reversed_hamiltonian(
    model: &LindbladModel,
    reference: &ReferenceTrajectory,
    t: f64,
) -> Result<Operator> {
    let (lo, hi, w) = reference.bracket(t)?;
    let (h_lo, _) = reversed_pair_at_index(model, reference, lo)?;
    if lo == hi || w == 0.0 {
        return Ok(h_lo);
    }
    let (h_hi, _) = reversed_pair_at_index(model, reference, hi)?;
    h_lo.scale(Complex64::new(1.0 - w, 0.0)).add(&h_hi.scale(Complex64::new(w, 0.0)))
}

/// Reversed Lindblad operators L~_a at time t, in forward list order.
pub fn reversed_lindblad_ops(
    model: &LindbladModel,
    reference: &ReferenceTrajectory,
    t: f64,
) -> Result<Vec<Operator>> {
    let (lo, hi, w) = reference.bracket(t)?;
    let (_, ls_lo) = reversed_pair_at_index(model, reference, lo)?;
    if lo == hi || w == 0.0 {
        return Ok(ls_lo);
    }
    let (_, ls_hi) = reversed_pair_at_index(model, reference, hi)?;
    ls_lo
        .into_iter()
        .zip(ls_hi)
        .map(|(a, b)| a.scale(Complex64::new(1.0 - w, 0.0)).add(&b.scale(Complex64::new(w, 0.0))))
        .collect()
}

/// The Petz-reversed model: reversed operators built on the reference grid
/// and interpolated between grid points.
pub struct ReversedModel {
    forward: LindbladModel,
    reference: Arc<ReferenceTrajectory>,
    grid_cache: Mutex<HashMap<usize, Arc<(Operator, Vec<Operator>)>>>,
}

impl ReversedModel {
    pub fn new(forward: LindbladModel, reference: Arc<ReferenceTrajectory>) -> Self {
        Self { forward, reference, grid_cache: Mutex::new(HashMap::new()) }
    }

    pub fn reference(&self) -> &ReferenceTrajectory {
        &self.reference
    }

    pub fn forward(&self) -> &LindbladModel {
        &self.forward
    }

    pub fn hbar(&self) -> f64 {
        self.forward.hbar
    }

    fn at_index(&self, index: usize) -> Result<Arc<(Operator, Vec<Operator>)>> {
        if let Some(hit) = self.grid_cache.lock().unwrap().get(&index) {
            return Ok(hit.clone());
        }
        let pair = Arc::new(reversed_pair_at_index(&self.forward, &self.reference, index)?);
        let mut cache = self.grid_cache.lock().unwrap();
        if cache.len() > 32 {
            cache.clear();
        }
        cache.insert(index, pair.clone());
        Ok(pair)
    }

    /// (H~, {L~}) at an arbitrary time within the reference range.
    pub fn operators_at(&self, t: f64) -> Result<(Operator, Vec<Operator>)> {
        let (lo, hi, w) = self.reference.bracket(t)?;
        let at_lo = self.at_index(lo)?;
        if lo == hi || w == 0.0 {
            return Ok((at_lo.0.clone(), at_lo.1.clone()));
        }
        let at_hi = self.at_index(hi)?;
        let cw = Complex64::new(1.0 - w, 0.0);
        let cv = Complex64::new(w, 0.0);
        let h = at_lo.0.scale(cw).add(&at_hi.0.scale(cv))?;
        let ls: Result<Vec<Operator>> = at_lo
            .1
            .iter()
            .zip(&at_hi.1)
            .map(|(a, b)| a.scale(cw).add(&b.scale(cv)))
            .collect();
        Ok((h, ls?))
    }

    fn generator_at(&self, t: f64) -> Result<SampledGenerator> {
        let (h, ls) = self.operators_at(t)?;
        Ok(SampledGenerator::new(&h, &ls, self.forward.hbar))
    }
}

/// Integrate the reversed Lindblad equation from physical time T down to t0.
///
/// Internally re-parametrized by s = T - t so the same RK4 core serves both
/// directions; the returned trajectory is indexed by physical time,
/// decreasing from T to t0.
pub fn integrate_reversed(
    reversed: &ReversedModel,
    rho_t: &DensityOperator,
    t_end: f64,
    t0: f64,
    dt: f64,
    opts: &IntegrateOptions,
) -> Result<StateTrajectory> {
    if rho_t.space() != reversed.forward.space() {
        return Err(CoreError::ShapeMismatch {
            context: "terminal state vs model Hilbert space",
            left: (rho_t.space().dim, rho_t.space().dim),
            right: (reversed.forward.space().dim, reversed.forward.space().dim),
        });
    }
    if t_end == t0 {
        return Ok(StateTrajectory::new(vec![t_end], vec![rho_t.clone()], dt));
    }
    if !(dt > 0.0) || !(t_end > t0) {
        return Err(CoreError::Config(crate::error::ConfigError::Constraint(
            format!("reversed integration needs dt > 0 and T > t0 (got dt = {dt}, T = {t_end}, t0 = {t0})"),
        )));
    }
    let n_steps = (((t_end - t0) / dt).round() as usize).max(1);
    let dt = (t_end - t0) / n_steps as f64;
    let stride = opts.stride.max(1);
    let space = reversed.forward.space().clone();

    let rhs = |s: f64, y: &Array2<Complex64>| -> Array2<Complex64> {
        let t = (t_end - s).max(t0);
        match reversed.generator_at(t) {
            Ok(gen) => gen.apply(y),
            Err(e) => panic!("reversed generator evaluation failed at t = {t}: {e}"),
        }
    };

    let mut times = Vec::new();
    let mut states = Vec::new();
    for (k, (s, y)) in
        rk4_matrix(rhs, rho_t.operator().data().clone(), 0.0, n_steps, dt).enumerate()
    {
        if k % stride == 0 || k == n_steps {
            let t = t_end - s;
            let op = Operator::from_array(space.clone(), y)?;
            if opts.check_positivity {
                let min = eigvalsh(&op).into_iter().fold(f64::INFINITY, f64::min);
                if min < -opts.positivity_floor {
                    return Err(CoreError::IntegratorInstability {
                        time: t,
                        what: format!("state eigenvalue {min:.3e} in reversed integration"),
                        suggested_dt: dt / 2.0,
                    });
                }
            }
            times.push(t);
            states.push(DensityOperator::new(op)?);
        }
    }
    Ok(StateTrajectory::new(times, states, dt))
}

/// Trace distance between rho0 and its forward-then-Petz-reversed image.
///
/// For rho0 = gamma0 (the reference itself) this is the recovery metric of
/// the Petz identity; it vanishes in the continuum limit.
pub fn recovery_error(
    model: &LindbladModel,
    gamma0: &DensityOperator,
    rho0: &DensityOperator,
    t_end: f64,
    dt: f64,
) -> Result<f64> {
    if t_end == 0.0 {
        return Ok(0.0);
    }
    let eps = default_reference_floor(gamma0);
    let reference = Arc::new(build_reference(model, gamma0, 0.0, t_end, dt, eps)?);
    let forward = integrate_forward(
        model,
        rho0,
        0.0,
        t_end,
        dt,
        &IntegrateOptions { stride: usize::MAX, check_positivity: false, ..Default::default() },
    )?;
    let reversed = ReversedModel::new(model.clone(), reference);
    let back = integrate_reversed(
        &reversed,
        forward.last(),
        t_end,
        0.0,
        dt,
        &IntegrateOptions { stride: usize::MAX, check_positivity: false, ..Default::default() },
    )?;
    crate::operator::trace_distance(rho0, back.last())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lindblad::TimeDep;
    use crate::operator::{
        annihilation, coherent_state, harmonic_hamiltonian, maximally_mixed, thermal_state,
        trace_distance, HilbertSpace,
    };
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn fock(d: usize) -> HilbertSpace {
        HilbertSpace::fock(d, 1.0, 1.0, 1.0).unwrap()
    }

    fn damped_ho(d: usize, kappa: f64) -> LindbladModel {
        let space = fock(d);
        let h = harmonic_hamiltonian(&space);
        let l = annihilation(&space).scale(c(kappa.sqrt(), 0.0));
        LindbladModel::new_static(space, h, vec![l], None).unwrap()
    }

    fn random_full_rank_density(space: &HilbertSpace, rng: &mut ChaCha8Rng) -> DensityOperator {
        let d = space.dim;
        let b = Operator::from_array(
            space.clone(),
            Array2::from_shape_fn((d, d), |_| {
                c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            }),
        )
        .unwrap();
        let mut psd = b.matmul(&b.dagger()).unwrap();
        psd.hermitize();
        let padded = psd
            .add(&Operator::identity(space.clone()).scale(c(0.5, 0.0)))
            .unwrap();
        DensityOperator::from_unnormalized(padded).unwrap()
    }

    fn random_model(space: &HilbertSpace, rng: &mut ChaCha8Rng) -> LindbladModel {
        let d = space.dim;
        let mut h = Operator::from_array(
            space.clone(),
            Array2::from_shape_fn((d, d), |_| {
                c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            }),
        )
        .unwrap();
        h.hermitize();
        let l = Operator::from_array(
            space.clone(),
            Array2::from_shape_fn((d, d), |_| {
                c(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5))
            }),
        )
        .unwrap();
        LindbladModel::new_static(space.clone(), h, vec![l], None).unwrap()
    }

    #[test]
    fn static_thermal_reference_has_zero_g_dot() {
        // L = 0 and [gamma, H] = 0: the reference is stationary.
        let space = fock(12);
        let h = harmonic_hamiltonian(&space);
        let model = LindbladModel::new_static(space.clone(), h, vec![], None).unwrap();
        let gamma0 = thermal_state(&space, 1.0).unwrap();
        let reference = build_reference(&model, &gamma0, 0.0, 0.2, 1e-3, 1e-14).unwrap();
        for k in [0, reference.len() / 2, reference.len() - 1] {
            assert!(reference.g_dot(k).unwrap().norm_max() < 1e-8, "index {k}");
        }
    }

    #[test]
    fn unital_maximally_mixed_reference_has_zero_g_dot() {
        let space = fock(8);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = space.dim;
        let mut l = Operator::from_array(
            space.clone(),
            Array2::from_shape_fn((d, d), |_| {
                c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            }),
        )
        .unwrap();
        l.hermitize(); // Hermitian L makes the channel unital
        let h = harmonic_hamiltonian(&space);
        let model = LindbladModel::new_static(space.clone(), h, vec![l], None).unwrap();
        let gamma0 = maximally_mixed(&space);
        let reference = build_reference(&model, &gamma0, 0.0, 0.2, 1e-3, 1e-14).unwrap();
        for k in [0, reference.len() / 2, reference.len() - 1] {
            assert!(reference.g_dot(k).unwrap().norm_max() < 1e-8, "index {k}");
        }
    }

    #[test]
    fn g_squares_back_to_gamma() {
        let model = damped_ho(10, 0.4);
        let space = model.space().clone();
        let gamma0 = thermal_state(&space, 1.0).unwrap();
        let reference = build_reference(&model, &gamma0, 0.0, 0.5, 1e-3, 1e-16).unwrap();
        for k in [0, reference.len() / 2, reference.len() - 1] {
            let g = &reference.g_pair(k).unwrap().0;
            let g2 = g.matmul(g).unwrap();
            let diff = g2.sub(reference.gamma(k).operator()).unwrap().norm_max();
            assert!(diff <= 1e-8, "index {k}: |G^2 - gamma| = {diff}");
        }
    }

    #[test]
    fn reversed_hamiltonian_is_minus_h_for_static_thermal() {
        let space = fock(12);
        let h = harmonic_hamiltonian(&space);
        let model = LindbladModel::new_static(space.clone(), h.clone(), vec![], None).unwrap();
        let gamma0 = thermal_state(&space, 1.0).unwrap();
        let reference = build_reference(&model, &gamma0, 0.0, 0.2, 1e-3, 1e-14).unwrap();
        let h_tilde = reversed_hamiltonian(&model, &reference, 0.1).unwrap();
        let diff = h_tilde.add(&h).unwrap().norm_max();
        assert!(diff <= 1e-8 * h.norm_max(), "|H~ + H| = {diff}");
    }

    #[test]
    fn reversed_hamiltonian_is_minus_h_for_identity_reference() {
        let space = fock(8);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let d = space.dim;
        let mut l = Operator::from_array(
            space.clone(),
            Array2::from_shape_fn((d, d), |_| {
                c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            }),
        )
        .unwrap();
        l.hermitize();
        let h = harmonic_hamiltonian(&space);
        let model = LindbladModel::new_static(space.clone(), h.clone(), vec![l], None).unwrap();
        let gamma0 = maximally_mixed(&space);
        let reference = build_reference(&model, &gamma0, 0.0, 0.1, 1e-3, 1e-14).unwrap();
        let h_tilde = reversed_hamiltonian(&model, &reference, 0.05).unwrap();
        let diff = h_tilde.add(&h).unwrap().norm_max();
        assert!(diff <= 1e-10 * h.norm_max(), "|H~ + H| = {diff}");
    }

    #[test]
    fn reversed_hamiltonian_is_hermitian_for_generic_reference() {
        let model = damped_ho(14, 0.6);
        let space = model.space().clone();
        let gamma0 = thermal_state(&space, 0.8).unwrap();
        let reference = build_reference(&model, &gamma0, 0.0, 1.0, 1e-3, 1e-15).unwrap();
        let h_tilde = reversed_hamiltonian(&model, &reference, 0.5).unwrap();
        let dev = h_tilde.hermiticity_deviation();
        assert!(dev <= 1e-10 * h_tilde.norm_max(), "deviation {dev}");
    }

    #[test]
    fn reversed_lindblad_ops_special_cases() {
        // G = I: L~ = L^dag.
        let space = fock(8);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let d = space.dim;
        let mut l = Operator::from_array(
            space.clone(),
            Array2::from_shape_fn((d, d), |_| {
                c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            }),
        )
        .unwrap();
        l.hermitize();
        let h = harmonic_hamiltonian(&space);
        let model =
            LindbladModel::new_static(space.clone(), h.clone(), vec![l.clone()], None).unwrap();
        let gamma0 = maximally_mixed(&space);
        let reference = build_reference(&model, &gamma0, 0.0, 0.1, 1e-3, 1e-14).unwrap();
        let lt = reversed_lindblad_ops(&model, &reference, 0.05).unwrap();
        assert!(lt[0].sub(&l.dagger()).unwrap().norm_max() < 1e-8);

        // Hermitian L commuting with gamma: L~ = L. Take L = f(H), gamma thermal.
        let model2 = LindbladModel::new_static(
            space.clone(),
            h.clone(),
            vec![h.scale(c(0.3, 0.0))],
            None,
        )
        .unwrap();
        let gamma_th = thermal_state(&space, 1.0).unwrap();
        let reference2 = build_reference(&model2, &gamma_th, 0.0, 0.1, 1e-3, 1e-16).unwrap();
        let lt2 = reversed_lindblad_ops(&model2, &reference2, 0.0).unwrap();
        let expected = h.scale(c(0.3, 0.0));
        assert!(lt2[0].sub(&expected).unwrap().norm_max() <= 1e-8 * expected.norm_max());
    }

    #[test]
    fn reversed_lindblad_ops_match_dense_triple_product() {
        let model = damped_ho(12, 0.5);
        let space = model.space().clone();
        let gamma0 = thermal_state(&space, 1.0).unwrap();
        let reference = build_reference(&model, &gamma0, 0.0, 1.0, 1e-2, 1e-16).unwrap();
        let t = 1.0;
        let k = reference.index_of(t).unwrap();
        let lt = reversed_lindblad_ops(&model, &reference, t).unwrap();
        // independent dense-matrix oracle
        let gamma_t = reference.gamma(k).operator();
        let g = crate::operator::hermitian_sqrt(gamma_t, 1e-16).unwrap();
        let g_inv = crate::operator::hermitian_inv(&g, 1e-16).unwrap();
        let l = model.lindblad_ops_at(t).remove(0);
        let oracle = g.matmul(&l.dagger()).unwrap().matmul(&g_inv).unwrap();
        assert!(lt[0].sub(&oracle).unwrap().norm_max() <= 1e-10 * oracle.norm_max().max(1.0));
    }

    #[test]
    fn reversed_generator_reverses_reference_flow() {
        // The reference itself satisfies -d gamma/dt = L~(gamma): the reversed
        // generator applied to gamma_t must equal minus the forward drift,
        // up to the O(dt^2) finite-difference error in Gdot.
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let space = fock(4);
        let model = random_model(&space, &mut rng);
        let gamma0 = random_full_rank_density(&space, &mut rng);
        let dt = 5e-4;
        let reference = build_reference(&model, &gamma0, 0.0, 0.02, dt, 1e-14).unwrap();
        let k = reference.len() / 2;
        let t = reference.times()[k];
        let gamma_t = reference.gamma(k).clone();

        let (h_tilde, l_tilde) = {
            let rm = ReversedModel::new(model.clone(), Arc::new(reference));
            rm.operators_at(t).unwrap()
        };
        let gen = SampledGenerator::new(&h_tilde, &l_tilde, model.hbar);
        let reversed_drift = gen.apply(gamma_t.operator().data());
        let forward_drift = crate::lindblad::lindblad_rhs(&model, &gamma_t, t).unwrap();
        let mut err: f64 = 0.0;
        for (a, b) in reversed_drift.iter().zip(forward_drift.data().iter()) {
            err = err.max((a + b).norm());
        }
        let scale = forward_drift.norm_max().max(1.0);
        assert!(err <= 1e-5 * scale, "|L~(gamma) + L(gamma)| = {err}, scale {scale}");
    }

    #[test]
    fn reversed_generator_is_trace_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let space = fock(6);
        let model = random_model(&space, &mut rng);
        let gamma0 = random_full_rank_density(&space, &mut rng);
        let reference = build_reference(&model, &gamma0, 0.0, 0.1, 1e-3, 1e-14).unwrap();
        let rm = ReversedModel::new(model.clone(), Arc::new(reference));
        let (h_tilde, l_tilde) = rm.operators_at(0.05).unwrap();
        let gen = SampledGenerator::new(&h_tilde, &l_tilde, model.hbar);
        for _ in 0..5 {
            let rho = random_full_rank_density(&space, &mut rng);
            let out = gen.apply(rho.operator().data());
            let tr: Complex64 = (0..space.dim).map(|i| out[[i, i]]).sum();
            let scale = out.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1.0);
            assert!(tr.norm() <= 1e-12 * scale, "trace {tr}");
        }
    }

    #[test]
    fn unitary_round_trip_recovers_pure_state() {
        // L = 0 with thermal reference: H~ = -H and the reversal is exact
        // backward unitary evolution.
        let space = fock(16);
        let h = harmonic_hamiltonian(&space);
        let model = LindbladModel::new_static(space.clone(), h, vec![], None).unwrap();
        let gamma0 = thermal_state(&space, 1.0).unwrap();
        let rho0 = coherent_state(&space, 0.6, -0.4);
        let err = recovery_error(&model, &gamma0, &rho0, 1.0, 1e-3).unwrap();
        assert!(err <= 1e-6, "round-trip trace distance {err}");
    }

    #[test]
    fn reference_round_trip_small_scale() {
        let model = damped_ho(8, 0.5);
        let space = model.space().clone();
        let gamma0 = thermal_state(&space, 1.0).unwrap();
        let err = recovery_error(&model, &gamma0, &gamma0, 0.5, 2.5e-4).unwrap();
        assert!(err <= 1e-6, "reference recovery error {err}");
    }

    #[test]
    fn zero_duration_reversal_is_identity() {
        let model = damped_ho(6, 0.3);
        let space = model.space().clone();
        let gamma0 = thermal_state(&space, 1.0).unwrap();
        let reference =
            Arc::new(build_reference(&model, &gamma0, 0.0, 0.1, 1e-3, 1e-14).unwrap());
        let rm = ReversedModel::new(model.clone(), reference);
        let rho = coherent_state(&space, 0.3, 0.1);
        let traj =
            integrate_reversed(&rm, &rho, 0.1, 0.1, 1e-3, &IntegrateOptions::default()).unwrap();
        assert_eq!(traj.len(), 1);
        assert!(trace_distance(traj.last(), &rho).unwrap() == 0.0);
    }

    #[test]
    fn out_of_range_time_is_rejected() {
        let model = damped_ho(6, 0.3);
        let space = model.space().clone();
        let gamma0 = thermal_state(&space, 1.0).unwrap();
        let reference = build_reference(&model, &gamma0, 0.0, 0.1, 1e-3, 1e-14).unwrap();
        assert!(matches!(
            reversed_hamiltonian(&model, &reference, 0.5),
            Err(CoreError::OutOfRange { .. })
        ));
    }

    #[test]
    fn recovery_error_edge_cases() {
        let model = damped_ho(8, 0.5);
        let space = model.space().clone();
        let gamma0 = thermal_state(&space, 1.0).unwrap();
        assert_eq!(recovery_error(&model, &gamma0, &gamma0, 0.0, 1e-3).unwrap(), 0.0);

        let rho0 = coherent_state(&space, 0.8, 0.2);
        let err = recovery_error(&model, &gamma0, &rho0, 0.5, 1e-3).unwrap();
        assert!((0.0..=1.0).contains(&err), "metric out of range: {err}");
    }

    #[test]
    fn petz_recovery_converges_as_dt_shrinks() {
        let model = damped_ho(8, 0.5);
        let space = model.space().clone();
        let gamma0 = thermal_state(&space, 1.0).unwrap();
        let dts = [4e-3, 2e-3, 1e-3];
        let errs: Vec<f64> = dts
            .iter()
            .map(|&dt| recovery_error(&model, &gamma0, &gamma0, 0.5, dt).unwrap())
            .collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "errors not decreasing: {errs:?}");
        let slope = ((errs[0] / errs[2]).ln()) / ((dts[0] / dts[2]) as f64).ln();
        assert!(slope >= 1.0, "fitted order {slope} below 1, errors {errs:?}");
    }

    #[test]
    fn double_reversal_reproduces_forward_drift() {
        // Rebuild a forward model from the reversed one with the reversed
        // reference gamma~_s = gamma_{T-s}; its drift on gamma~ matches the
        // original forward drift.
        let model = damped_ho(8, 0.5);
        let space = model.space().clone();
        let gamma0 = thermal_state(&space, 1.0).unwrap();
        let t_end = 0.2;
        let dt = 1e-3;
        let reference =
            Arc::new(build_reference(&model, &gamma0, 0.0, t_end, dt, 1e-15).unwrap());
        let rm = Arc::new(ReversedModel::new(model.clone(), reference.clone()));

        // Reversed model as a forward LindbladModel in s = T - t.
        let rm_h = rm.clone();
        let rm_l = rm.clone();
        let tilde_model = LindbladModel::new(
            space.clone(),
            TimeDep::Callable(Arc::new(move |s: f64| {
                rm_h.operators_at(t_end - s).unwrap().0
            })),
            vec![TimeDep::Callable(Arc::new(move |s: f64| {
                rm_l.operators_at(t_end - s).unwrap().1.remove(0)
            }))],
            None,
        )
        .unwrap();

        // Reference for the tilde model: gamma~_s = gamma_{T-s}.
        let n = reference.len();
        let times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        let states: Vec<DensityOperator> =
            (0..n).map(|k| reference.gamma(n - 1 - k).clone()).collect();
        let tilde_ref = Arc::new(
            ReferenceTrajectory::from_trajectory(
                StateTrajectory::new(times, states, dt),
                1e-15,
            )
            .unwrap(),
        );

        let double = ReversedModel::new(tilde_model, tilde_ref.clone());
        let s_mid = t_end / 2.0;
        let k = tilde_ref.index_of(s_mid).unwrap();
        let gamma_mid = tilde_ref.gamma(k).clone();
        let (h2, l2) = double.operators_at(s_mid).unwrap();
        let gen = SampledGenerator::new(&h2, &l2, model.hbar);
        let doubly_reversed = gen.apply(gamma_mid.operator().data());
        let forward = crate::lindblad::lindblad_rhs(&model, &gamma_mid, t_end - s_mid).unwrap();
        let mut err: f64 = 0.0;
        for (a, b) in doubly_reversed.iter().zip(forward.data().iter()) {
            err = err.max((a - b).norm());
        }
        assert!(err <= 1e-4, "double-reversal drift deviation {err}");
    }
}
