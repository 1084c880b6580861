//! Forward Lindblad dynamics: the generator and a fixed-step RK4 integrator.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{CoreError, Result};
use crate::operator::{eigvalsh, DensityOperator, HilbertSpace, Operator};
use crate::symbols::ModelSymbols;

/// A possibly time-dependent operator.
#[derive(Clone)]
pub enum TimeDep {
    Static(Operator),
    Callable(Arc<dyn Fn(f64) -> Operator + Send + Sync>),
}

impl TimeDep {
    pub fn at(&self, t: f64) -> Operator {
        match self {
            TimeDep::Static(op) => op.clone(),
            TimeDep::Callable(f) => f(t),
        }
    }

    fn is_static(&self) -> bool {
        matches!(self, TimeDep::Static(_))
    }
}

impl std::fmt::Debug for TimeDep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TimeDep::Static(_) => write!(f, "TimeDep::Static"),
            TimeDep::Callable(_) => write!(f, "TimeDep::Callable"),
        }
    }
}

/// Hamiltonian plus Lindblad operators, optionally with closed-form
/// phase-space symbols consumed by the semiclassical reduction.
#[derive(Debug, Clone)]
pub struct LindbladModel {
    space: HilbertSpace,
    hamiltonian: TimeDep,
    lindblad_ops: Vec<TimeDep>,
    pub hbar: f64,
    pub symbols: Option<ModelSymbols>,
}

impl LindbladModel {
    pub fn new(
        space: HilbertSpace,
        hamiltonian: TimeDep,
        lindblad_ops: Vec<TimeDep>,
        symbols: Option<ModelSymbols>,
    ) -> Result<Self> {
        let hbar = space.hbar;
        if let TimeDep::Static(h) = &hamiltonian {
            h.clone().tagged_hermitian()?;
        }
        if let Some(sym) = &symbols {
            if sym.lindblad.len() != lindblad_ops.len() {
                return Err(CoreError::ShapeMismatch {
                    context: "symbol list vs Lindblad operator list",
                    left: (sym.lindblad.len(), 0),
                    right: (lindblad_ops.len(), 0),
                });
            }
        }
        Ok(Self { space, hamiltonian, lindblad_ops, hbar, symbols })
    }

    /// Static model from fixed operators.
    pub fn new_static(
        space: HilbertSpace,
        hamiltonian: Operator,
        lindblad_ops: Vec<Operator>,
        symbols: Option<ModelSymbols>,
    ) -> Result<Self> {
        Self::new(
            space,
            TimeDep::Static(hamiltonian),
            lindblad_ops.into_iter().map(TimeDep::Static).collect(),
            symbols,
        )
    }

    pub fn space(&self) -> &HilbertSpace {
        &self.space
    }

    pub fn hamiltonian_at(&self, t: f64) -> Operator {
        self.hamiltonian.at(t)
    }

    pub fn lindblad_ops_at(&self, t: f64) -> Vec<Operator> {
        self.lindblad_ops.iter().map(|l| l.at(t)).collect()
    }

    pub fn num_channels(&self) -> usize {
        self.lindblad_ops.len()
    }

    pub fn is_static(&self) -> bool {
        self.hamiltonian.is_static() && self.lindblad_ops.iter().all(|l| l.is_static())
    }

    /// Sample H, L_alpha and sum L^dag L at a given time.
    pub(crate) fn sample(&self, t: f64) -> SampledGenerator {
        let h = self.hamiltonian.at(t);
        let ls: Vec<Operator> = self.lindblad_ops.iter().map(|l| l.at(t)).collect();
        SampledGenerator::new(&h, &ls, self.hbar)
    }
}

/// Generator frozen at one time: matrices ready for repeated application.
pub(crate) struct SampledGenerator {
    h: Array2<Complex64>,
    ls: Vec<Array2<Complex64>>,
    ldags: Vec<Array2<Complex64>>,
    ldagl_sum: Array2<Complex64>,
    hbar: f64,
}

impl SampledGenerator {
    pub(crate) fn new(h: &Operator, ls: &[Operator], hbar: f64) -> Self {
        let d = h.dim();
        let mut ldagl_sum = Array2::<Complex64>::zeros((d, d));
        let mut ldags = Vec::with_capacity(ls.len());
        for l in ls {
            let ldag = l.dagger();
            ldagl_sum = ldagl_sum + ldag.data().dot(l.data());
            ldags.push(ldag.into_data());
        }
        Self {
            h: h.data().clone(),
            ls: ls.iter().map(|l| l.data().clone()).collect(),
            ldags,
            ldagl_sum,
            hbar,
        }
    }

    /// Apply the generator to a (not necessarily valid density) matrix.
    pub(crate) fn apply(&self, rho: &Array2<Complex64>) -> Array2<Complex64> {
        let minus_i_over_hbar = Complex64::new(0.0, -1.0 / self.hbar);
        let mut out = (self.h.dot(rho) - rho.dot(&self.h)).mapv(|z| z * minus_i_over_hbar);
        if !self.ls.is_empty() {
            for (l, ldag) in self.ls.iter().zip(&self.ldags) {
                out = out + l.dot(rho).dot(ldag);
            }
            let half = Complex64::new(0.5, 0.0);
            out = out - (self.ldagl_sum.dot(rho) + rho.dot(&self.ldagl_sum)).mapv(|z| z * half);
        }
        out
    }
}

/// Right-hand side of the Lindblad equation at time t.
pub fn lindblad_rhs(model: &LindbladModel, rho: &DensityOperator, t: f64) -> Result<Operator> {
    if rho.space() != model.space() {
        return Err(CoreError::ShapeMismatch {
            context: "state vs model Hilbert space",
            left: (rho.space().dim, rho.space().dim),
            right: (model.space().dim, model.space().dim),
        });
    }
    let gen = model.sample(t);
    let out = gen.apply(rho.operator().data());
    Operator::from_array(model.space().clone(), out)
}

/// Integration options for [`integrate_forward`].
#[derive(Debug, Clone)]
pub struct IntegrateOptions {
    /// Keep every `stride`-th step in the trajectory (the initial and final
    /// states are always kept).
    pub stride: usize,
    /// Check the smallest eigenvalue of each stored state.
    pub check_positivity: bool,
    /// Tolerated negativity of stored states.
    pub positivity_floor: f64,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self { stride: 1, check_positivity: true, positivity_floor: 1e-8 }
    }
}

/// Density-operator trajectory with integrator metadata.
#[derive(Debug, Clone)]
pub struct StateTrajectory {
    times: Vec<f64>,
    states: Vec<DensityOperator>,
    pub dt: f64,
    pub scheme: &'static str,
}

impl StateTrajectory {
    pub(crate) fn new(times: Vec<f64>, states: Vec<DensityOperator>, dt: f64) -> Self {
        // Forward trajectories are increasing; reversed ones are indexed by
        // decreasing physical time. Either way, strictly monotonic.
        debug_assert!(
            times.windows(2).all(|w| w[1] > w[0]) || times.windows(2).all(|w| w[1] < w[0])
        );
        Self { times, states, dt, scheme: "rk4" }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[DensityOperator] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn first(&self) -> &DensityOperator {
        &self.states[0]
    }

    pub fn last(&self) -> &DensityOperator {
        self.states.last().expect("non-empty trajectory")
    }
}

/// Classic fixed-step RK4 on matrices, with a per-step fixup hook.
pub(crate) fn rk4_matrix<F>(
    rhs: F,
    y0: Array2<Complex64>,
    t0: f64,
    n_steps: usize,
    dt: f64,
) -> impl Iterator<Item = (f64, Array2<Complex64>)>
where
    F: Fn(f64, &Array2<Complex64>) -> Array2<Complex64>,
{
    let mut y = y0;
    let mut step = 0usize;
    std::iter::from_fn(move || {
        if step > n_steps {
            return None;
        }
        let t = t0 + step as f64 * dt;
        let current = (t, y.clone());
        if step < n_steps {
            let k1 = rhs(t, &y);
            let y2 = &y + &k1.mapv(|z| z * Complex64::new(0.5 * dt, 0.0));
            let k2 = rhs(t + 0.5 * dt, &y2);
            let y3 = &y + &k2.mapv(|z| z * Complex64::new(0.5 * dt, 0.0));
            let k3 = rhs(t + 0.5 * dt, &y3);
            let y4 = &y + &k3.mapv(|z| z * Complex64::new(dt, 0.0));
            let k4 = rhs(t + dt, &y4);
            let incr = (k1 + k2.mapv(|z| z * 2.0) + k3.mapv(|z| z * 2.0) + k4)
                .mapv(|z| z * Complex64::new(dt / 6.0, 0.0));
            y = &y + &incr;
            // Hermitize in place: the exact flow preserves Hermiticity.
            let d = y.nrows();
            for i in 0..d {
                for j in i..d {
                    let avg = 0.5 * (y[[i, j]] + y[[j, i]].conj());
                    y[[i, j]] = avg;
                    y[[j, i]] = avg.conj();
                }
            }
        }
        step += 1;
        Some(current)
    })
}

fn store_state(
    space: &HilbertSpace,
    m: Array2<Complex64>,
    t: f64,
    dt: f64,
    opts: &IntegrateOptions,
) -> Result<DensityOperator> {
    let op = Operator::from_array(space.clone(), m)?;
    if opts.check_positivity {
        let min = eigvalsh(&op).into_iter().fold(f64::INFINITY, f64::min);
        if min < -opts.positivity_floor {
            return Err(CoreError::IntegratorInstability {
                time: t,
                what: format!("state eigenvalue {min:.3e} below -{:.1e}", opts.positivity_floor),
                suggested_dt: dt / 2.0,
            });
        }
    }
    let tr = op.trace();
    if (tr.re - 1.0).abs() > 1e-6 {
        return Err(CoreError::IntegratorInstability {
            time: t,
            what: format!("trace drifted to {tr}"),
            suggested_dt: dt / 2.0,
        });
    }
    // Renormalization is deliberately not applied; the generator is
    // trace-preserving and drift stays at roundoff.
    DensityOperator::new(op)
}

/// Integrate the Lindblad equation from t0 to t1 with fixed-step RK4.
///
/// Time-dependent models are sampled at the RK4 stage times. Each step is
/// Hermitized; stored states are validated as density operators.
pub fn integrate_forward(
    model: &LindbladModel,
    rho0: &DensityOperator,
    t0: f64,
    t1: f64,
    dt: f64,
    opts: &IntegrateOptions,
) -> Result<StateTrajectory> {
    if !(dt > 0.0) || !(t1 > t0) {
        return Err(CoreError::Config(crate::error::ConfigError::Constraint(
            format!("integration needs dt > 0 and t1 > t0 (got dt = {dt}, t0 = {t0}, t1 = {t1})"),
        )));
    }
    if rho0.space() != model.space() {
        return Err(CoreError::ShapeMismatch {
            context: "initial state vs model Hilbert space",
            left: (rho0.space().dim, rho0.space().dim),
            right: (model.space().dim, model.space().dim),
        });
    }
    let n_steps = ((t1 - t0) / dt).round() as usize;
    let n_steps = n_steps.max(1);
    let dt = (t1 - t0) / n_steps as f64;
    let stride = opts.stride.max(1);

    let space = model.space().clone();
    let is_static = model.is_static();
    let static_gen = is_static.then(|| model.sample(t0));
    let rhs = |t: f64, y: &Array2<Complex64>| -> Array2<Complex64> {
        match &static_gen {
            Some(g) => g.apply(y),
            None => model.sample(t).apply(y),
        }
    };

    let mut times = Vec::new();
    let mut states = Vec::new();
    for (k, (t, y)) in rk4_matrix(rhs, rho0.operator().data().clone(), t0, n_steps, dt).enumerate()
    {
        if k % stride == 0 || k == n_steps {
            times.push(t);
            states.push(store_state(&space, y, t, dt, opts)?);
        }
    }
    Ok(StateTrajectory::new(times, states, dt))
}

/// Expectation value Tr(rho A).
pub fn expectation(rho: &DensityOperator, a: &Operator) -> Result<Complex64> {
    Ok(rho.operator().matmul(a)?.trace())
}
