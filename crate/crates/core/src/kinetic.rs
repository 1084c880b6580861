//! Classical kinetic solvers: conservative Fokker-Planck integration forward
//! and in reversed time, Euler-Maruyama particle ensembles, reverse-time SDE
//! sampling, kernel density estimation, and the Monte-Carlo Bayes-identity
//! check on binned transitions.

use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::phase_space::{Field, PhaseGrid};

/// Classical phase-space density: nonnegative real field with unit mass
/// under the plain dQ dP measure (no 2 pi hbar factor).
#[derive(Debug, Clone)]
pub struct DistributionField {
    field: Field,
    pub mass: f64,
}

impl DistributionField {
    /// Validate mass and positivity (floor for constructed inputs: -1e-10).
    pub fn new(field: Field) -> Result<Self> {
        Self::with_floor(field, -1e-10)
    }

    pub(crate) fn with_floor(field: Field, floor: f64) -> Result<Self> {
        let mass = Self::mass_of(&field);
        if (mass - 1.0).abs() > 1e-6 {
            return Err(CoreError::Resolution(format!(
                "distribution mass {mass} deviates from 1"
            )));
        }
        let min = field.data().iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
        if min < floor {
            return Err(CoreError::Instability { min });
        }
        Ok(Self { field, mass })
    }

    /// Normalize a nonnegative field to unit mass.
    pub fn from_unnormalized(field: Field) -> Result<Self> {
        let mass = Self::mass_of(&field);
        if mass <= 0.0 {
            return Err(CoreError::Resolution("cannot normalize zero-mass field".into()));
        }
        Self::new(field.scale(Complex64::new(1.0 / mass, 0.0)))
    }

    fn mass_of(field: &Field) -> f64 {
        field.data().iter().map(|z| z.re).sum::<f64>() * field.grid().cell_area()
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn grid(&self) -> &PhaseGrid {
        self.field.grid()
    }

    pub fn min_value(&self) -> f64 {
        self.field.data().iter().map(|z| z.re).fold(f64::INFINITY, f64::min)
    }

    /// L1 distance with the dQ dP measure.
    pub fn l1_distance(&self, other: &DistributionField) -> Result<f64> {
        self.field.check_grid(&other.field)?;
        Ok(self
            .field
            .data()
            .iter()
            .zip(other.field.data().iter())
            .map(|(a, b)| (a.re - b.re).abs())
            .sum::<f64>()
            * self.grid().cell_area())
    }

    /// Discrete mean and covariance diag of the density.
    pub fn moments(&self) -> ([f64; 2], [f64; 2]) {
        let grid = self.grid();
        let area = grid.cell_area();
        let mut mean = [0.0f64; 2];
        let mut m2 = [0.0f64; 2];
        let mut mass = 0.0f64;
        for i in 0..grid.n_q {
            for j in 0..grid.n_p {
                let w = self.field.data()[[i, j]].re * area;
                let (q, p) = (grid.q_at(i), grid.p_at(j));
                mass += w;
                mean[0] += w * q;
                mean[1] += w * p;
                m2[0] += w * q * q;
                m2[1] += w * p * p;
            }
        }
        mean[0] /= mass;
        mean[1] /= mass;
        (
            mean,
            [m2[0] / mass - mean[0] * mean[0], m2[1] / mass - mean[1] * mean[1]],
        )
    }
}

/// Drift fields, either static or piecewise-linear in time between stored
/// snapshots (ascending snapshot times).
pub enum DriftField {
    Static([Field; 2]),
    Series(Vec<(f64, [Field; 2])>),
}

impl DriftField {
    fn grid(&self) -> &PhaseGrid {
        match self {
            DriftField::Static(f) => f[0].grid(),
            DriftField::Series(s) => s[0].1[0].grid(),
        }
    }

    fn max_abs(&self) -> f64 {
        match self {
            DriftField::Static(f) => f[0].max_abs().max(f[1].max_abs()),
            DriftField::Series(s) => s
                .iter()
                .map(|(_, f)| f[0].max_abs().max(f[1].max_abs()))
                .fold(0.0, f64::max),
        }
    }

    /// Real drift arrays at time t (linear interpolation for a series).
    fn eval(&self, t: f64) -> [Array2<f64>; 2] {
        match self {
            DriftField::Static(f) => [f[0].data().mapv(|z| z.re), f[1].data().mapv(|z| z.re)],
            DriftField::Series(snaps) => {
                let n = snaps.len();
                if t <= snaps[0].0 {
                    return [
                        snaps[0].1[0].data().mapv(|z| z.re),
                        snaps[0].1[1].data().mapv(|z| z.re),
                    ];
                }
                if t >= snaps[n - 1].0 {
                    return [
                        snaps[n - 1].1[0].data().mapv(|z| z.re),
                        snaps[n - 1].1[1].data().mapv(|z| z.re),
                    ];
                }
                let hi = snaps.partition_point(|(ts, _)| *ts <= t).min(n - 1);
                let lo = hi - 1;
                let w = (t - snaps[lo].0) / (snaps[hi].0 - snaps[lo].0);
                let lerp = |a: &Field, b: &Field| {
                    let aa = a.data();
                    let bb = b.data();
                    Array2::from_shape_fn(aa.dim(), |idx| {
                        (1.0 - w) * aa[idx].re + w * bb[idx].re
                    })
                };
                [
                    lerp(&snaps[lo].1[0], &snaps[hi].1[0]),
                    lerp(&snaps[lo].1[1], &snaps[hi].1[1]),
                ]
            }
        }
    }
}

/// Boundary handling of the conservative flux form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    /// Mirrored ghost cells: boundary face fluxes vanish, mass is conserved
    /// exactly.
    #[default]
    ZeroFlux,
    Periodic,
}

/// Options for the Fokker-Planck integrators.
#[derive(Debug, Clone)]
pub struct FpOptions {
    pub boundary: Boundary,
    /// Keep every `stride`-th step (first and last always kept).
    pub stride: usize,
    /// Tolerated negative undershoot of stored snapshots.
    pub negativity_tol: f64,
}

impl Default for FpOptions {
    fn default() -> Self {
        Self { boundary: Boundary::ZeroFlux, stride: usize::MAX, negativity_tol: 1e-6 }
    }
}

/// Fokker-Planck solution snapshots plus conservation diagnostics.
pub struct FpSolution {
    pub times: Vec<f64>,
    pub snapshots: Vec<DistributionField>,
    /// max |mass(t) - mass(0)| over stored snapshots.
    pub mass_drift: f64,
    /// most negative value seen in stored snapshots.
    pub min_value: f64,
}

impl FpSolution {
    pub fn last(&self) -> &DistributionField {
        self.snapshots.last().expect("non-empty FP solution")
    }
}

struct FluxWorkspace {
    grid: PhaseGrid,
    boundary: Boundary,
    g: [[Array2<f64>; 2]; 2],
}

impl FluxWorkspace {
    /// Conservative right-hand side: rhs = -div F with
    /// F^mu = f^mu W - (1/2) sum_nu d_nu (G^{mu nu} W) evaluated at faces.
    /// Interior stencils are fourth order, falling back to second order at
    /// the two faces nearest a zero-flux boundary.
    fn rhs(&self, f: &[Array2<f64>; 2], w: &Array2<f64>, out: &mut Array2<f64>) {
        let (nq, np) = (self.grid.n_q, self.grid.n_p);
        let dq = self.grid.dq();
        let dp = self.grid.dp();

        // cell products
        let c_qq = &self.g[0][0] * w;
        let c_qp = &self.g[0][1] * w;
        let c_pp = &self.g[1][1] * w;
        let a_q = &f[0].view() * w;
        let a_p = &f[1].view() * w;

        // cell-centered cross derivatives of the mixed products
        let dp_cqp = central_derivative(&c_qp, 1, dp, self.boundary);
        let dq_cqp = central_derivative(&c_qp, 0, dq, self.boundary);

        let periodic = self.boundary == Boundary::Periodic;

        // Q-direction face fluxes: flux_q[i][j] is the face between rows
        // i-1 and i (i = 0..=nq), so rhs row i gets (flux[i] - flux[i+1])/dq.
        let mut flux_q = Array2::<f64>::zeros((nq + 1, np));
        let zone = |i: usize, n: usize| -> bool {
            // true when a fourth-order face stencil fits
            periodic || (i >= 2 && i + 1 < n)
        };
        for i in 0..=nq {
            if !periodic && (i == 0 || i == nq) {
                continue; // zero-flux boundary faces
            }
            let im2 = (i + nq - 2) % nq;
            let im1 = (i + nq - 1) % nq;
            let i0 = i % nq;
            let ip1 = (i + 1) % nq;
            for j in 0..np {
                let (adv, grad, cross);
                if zone(i, nq) {
                    adv = (-a_q[[im2, j]] + 7.0 * a_q[[im1, j]] + 7.0 * a_q[[i0, j]]
                        - a_q[[ip1, j]])
                        / 12.0;
                    grad = (c_qq[[im2, j]] - 15.0 * c_qq[[im1, j]] + 15.0 * c_qq[[i0, j]]
                        - c_qq[[ip1, j]])
                        / (12.0 * dq);
                    cross = (-dp_cqp[[im2, j]] + 7.0 * dp_cqp[[im1, j]] + 7.0 * dp_cqp[[i0, j]]
                        - dp_cqp[[ip1, j]])
                        / 12.0;
                } else {
                    adv = 0.5 * (a_q[[im1, j]] + a_q[[i0, j]]);
                    grad = (c_qq[[i0, j]] - c_qq[[im1, j]]) / dq;
                    cross = 0.5 * (dp_cqp[[im1, j]] + dp_cqp[[i0, j]]);
                }
                flux_q[[i, j]] = adv - 0.5 * (grad + cross);
            }
        }

        // P-direction face fluxes
        let mut flux_p = Array2::<f64>::zeros((nq, np + 1));
        for j in 0..=np {
            if !periodic && (j == 0 || j == np) {
                continue;
            }
            let jm2 = (j + np - 2) % np;
            let jm1 = (j + np - 1) % np;
            let j0 = j % np;
            let jp1 = (j + 1) % np;
            for i in 0..nq {
                let (adv, grad, cross);
                if zone(j, np) {
                    adv = (-a_p[[i, jm2]] + 7.0 * a_p[[i, jm1]] + 7.0 * a_p[[i, j0]]
                        - a_p[[i, jp1]])
                        / 12.0;
                    grad = (c_pp[[i, jm2]] - 15.0 * c_pp[[i, jm1]] + 15.0 * c_pp[[i, j0]]
                        - c_pp[[i, jp1]])
                        / (12.0 * dp);
                    cross = (-dq_cqp[[i, jm2]] + 7.0 * dq_cqp[[i, jm1]] + 7.0 * dq_cqp[[i, j0]]
                        - dq_cqp[[i, jp1]])
                        / 12.0;
                } else {
                    adv = 0.5 * (a_p[[i, jm1]] + a_p[[i, j0]]);
                    grad = (c_pp[[i, j0]] - c_pp[[i, jm1]]) / dp;
                    cross = 0.5 * (dq_cqp[[i, jm1]] + dq_cqp[[i, j0]]);
                }
                flux_p[[i, j]] = adv - 0.5 * (grad + cross);
            }
        }

        for i in 0..nq {
            for j in 0..np {
                out[[i, j]] = (flux_q[[i, j]] - flux_q[[i + 1, j]]) / dq
                    + (flux_p[[i, j]] - flux_p[[i, j + 1]]) / dp;
            }
        }
    }
}

/// Second-order central derivative of an array along an axis, one-sided at
/// zero-flux boundaries, wrapped when periodic.
fn central_derivative(a: &Array2<f64>, axis: usize, h: f64, boundary: Boundary) -> Array2<f64> {
    let (nq, np) = a.dim();
    let n = if axis == 0 { nq } else { np };
    let periodic = boundary == Boundary::Periodic;
    let get = |i: usize, other: usize| -> f64 {
        if axis == 0 {
            a[[i, other]]
        } else {
            a[[other, i]]
        }
    };
    let mut out = Array2::<f64>::zeros((nq, np));
    let others = if axis == 0 { np } else { nq };
    for other in 0..others {
        for i in 0..n {
            let d = if periodic {
                (get((i + 1) % n, other) - get((i + n - 1) % n, other)) / (2.0 * h)
            } else if i == 0 {
                (-3.0 * get(0, other) + 4.0 * get(1, other) - get(2, other)) / (2.0 * h)
            } else if i == n - 1 {
                (3.0 * get(n - 1, other) - 4.0 * get(n - 2, other) + get(n - 3, other)) / (2.0 * h)
            } else {
                (get(i + 1, other) - get(i - 1, other)) / (2.0 * h)
            };
            if axis == 0 {
                out[[i, other]] = d;
            } else {
                out[[other, i]] = d;
            }
        }
    }
    out
}

fn real_g(g: &[[Field; 2]; 2]) -> [[Array2<f64>; 2]; 2] {
    [
        [g[0][0].data().mapv(|z| z.re), g[0][1].data().mapv(|z| z.re)],
        [g[1][0].data().mapv(|z| z.re), g[1][1].data().mapv(|z| z.re)],
    ]
}

fn check_cfl(grid: &PhaseGrid, drift: &DriftField, g: &[[Field; 2]; 2], dt: f64) -> Result<()> {
    let dx = grid.dq().min(grid.dp());
    let max_g = g
        .iter()
        .flat_map(|row| row.iter())
        .map(|f| f.max_abs())
        .fold(0.0f64, f64::max);
    let max_f = drift.max_abs();
    let mut limit = f64::INFINITY;
    if max_g > 0.0 {
        limit = limit.min(0.5 * dx * dx / max_g);
    }
    if max_f > 0.0 {
        limit = limit.min(0.5 * dx / max_f);
    }
    if dt > limit {
        return Err(CoreError::CflViolation { dt, limit });
    }
    Ok(())
}

fn fp_core(
    drift: &DriftField,
    g: &[[Field; 2]; 2],
    p0: &DistributionField,
    t0: f64,
    t1: f64,
    dt: f64,
    opts: &FpOptions,
    time_map: impl Fn(f64) -> f64,
) -> Result<(Vec<f64>, Vec<DistributionField>, f64, f64)> {
    let grid = p0.grid().clone();
    if drift.grid() != &grid || g[0][0].grid() != &grid {
        return Err(CoreError::GridMismatch(
            "drift/diffusion grids differ from the density grid".into(),
        ));
    }
    if !(dt > 0.0) || !(t1 > t0) {
        return Err(CoreError::Config(crate::error::ConfigError::Constraint(
            format!("FP integration needs dt > 0 and t1 > t0 (got dt = {dt})"),
        )));
    }
    check_cfl(&grid, drift, g, dt)?;

    let n_steps = (((t1 - t0) / dt).round() as usize).max(1);
    let dt = (t1 - t0) / n_steps as f64;
    let stride = opts.stride.max(1);
    let ws = FluxWorkspace { grid: grid.clone(), boundary: opts.boundary, g: real_g(g) };

    let mut w = p0.field().data().mapv(|z| z.re);
    let mass0 = w.sum() * grid.cell_area();
    let mut times = Vec::new();
    let mut snapshots = Vec::new();
    let mut mass_drift = 0.0f64;
    let mut min_value = f64::INFINITY;

    let store = |w: &Array2<f64>,
                     s: f64,
                     mass_drift: &mut f64,
                     min_value: &mut f64,
                     times: &mut Vec<f64>,
                     snaps: &mut Vec<DistributionField>|
     -> Result<()> {
        let mass = w.sum() * grid.cell_area();
        *mass_drift = mass_drift.max((mass - mass0).abs());
        let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
        *min_value = min_value.min(min);
        if min < -opts.negativity_tol {
            return Err(CoreError::Instability { min });
        }
        let field = Field::from_data(
            grid.clone(),
            w.mapv(|x| Complex64::new(x, 0.0)),
        )?;
        times.push(time_map(s));
        snaps.push(DistributionField { field, mass });
        Ok(())
    };

    store(&w, t0, &mut mass_drift, &mut min_value, &mut times, &mut snapshots)?;

    let mut k1 = Array2::<f64>::zeros(w.dim());
    let mut k2 = Array2::<f64>::zeros(w.dim());
    let mut k3 = Array2::<f64>::zeros(w.dim());
    let mut k4 = Array2::<f64>::zeros(w.dim());
    for step in 0..n_steps {
        let t = t0 + step as f64 * dt;
        let f_a = drift.eval(t);
        let f_m = drift.eval(t + 0.5 * dt);
        let f_b = drift.eval(t + dt);
        ws.rhs(&f_a, &w, &mut k1);
        let y2 = &w + &(&k1 * (0.5 * dt));
        ws.rhs(&f_m, &y2, &mut k2);
        let y3 = &w + &(&k2 * (0.5 * dt));
        ws.rhs(&f_m, &y3, &mut k3);
        let y4 = &w + &(&k3 * dt);
        ws.rhs(&f_b, &y4, &mut k4);
        w = &w + &((&k1 + &(&k2 * 2.0) + &(&k3 * 2.0) + &k4) * (dt / 6.0));

        let done = step + 1 == n_steps;
        if (step + 1) % stride == 0 || done {
            store(
                &w,
                t0 + (step + 1) as f64 * dt,
                &mut mass_drift,
                &mut min_value,
                &mut times,
                &mut snapshots,
            )?;
        }
    }
    Ok((times, snapshots, mass_drift, min_value))
}

/// Integrate the Fokker-Planck equation
/// dP/dt = -d_mu(f^mu P) + (1/2) d_mu d_nu (G^{mu nu} P)
/// with conservative central differencing and explicit RK4.
pub fn integrate_fp(
    drift: &DriftField,
    g: &[[Field; 2]; 2],
    p0: &DistributionField,
    t0: f64,
    t1: f64,
    dt: f64,
    opts: &FpOptions,
) -> Result<FpSolution> {
    let (times, snapshots, mass_drift, min_value) =
        fp_core(drift, g, p0, t0, t1, dt, opts, |s| s)?;
    Ok(FpSolution { times, snapshots, mass_drift, min_value })
}

/// Integrate the reverse-time diffusion equation backward from t = T to t0.
///
/// `drift` holds the reversed drift in forward-time parametrization (the
/// object of the phase-space reversal); internally the equation is
/// re-parametrized by s = T - t and stepped with the same forward scheme:
/// dP/ds = -d_mu(fbar^mu(x, T - s) P) + (1/2) d_mu d_nu (G^{mu nu} P).
/// Snapshot times are physical, decreasing from T to t0.
pub fn integrate_reverse_fp(
    drift: &DriftField,
    g: &[[Field; 2]; 2],
    p_end: &DistributionField,
    t_end: f64,
    t0: f64,
    dt: f64,
    opts: &FpOptions,
) -> Result<FpSolution> {
    // drift in s: fbar evaluated at physical time T - s
    let s_drift = match drift {
        DriftField::Static(f) => DriftField::Static(f.clone()),
        DriftField::Series(snaps) => {
            let mut mapped: Vec<(f64, [Field; 2])> =
                snaps.iter().map(|(t, f)| (t_end - t, f.clone())).collect();
            mapped.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            DriftField::Series(mapped)
        }
    };
    let (times, snapshots, mass_drift, min_value) =
        fp_core(&s_drift, g, p_end, 0.0, t_end - t0, dt, opts, |s| t_end - s)?;
    Ok(FpSolution { times, snapshots, mass_drift, min_value })
}

// ---------------------------------------------------------------------------
// Noise factorization
// ---------------------------------------------------------------------------

/// Pointwise symmetric PSD square root g of the diffusion matrix, so that
/// g g^T = G. Eigenvalues below -1e-10 * scale are a PSD violation; small
/// negative eigenvalues are clamped to zero.
pub fn noise_factor(g: &[[Field; 2]; 2]) -> Result<[[Field; 2]; 2]> {
    let grid = g[0][0].grid().clone();
    let scale = g
        .iter()
        .flat_map(|r| r.iter())
        .map(|f| f.max_abs())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut out = [
        [Array2::zeros((grid.n_q, grid.n_p)), Array2::zeros((grid.n_q, grid.n_p))],
        [Array2::zeros((grid.n_q, grid.n_p)), Array2::zeros((grid.n_q, grid.n_p))],
    ];
    for i in 0..grid.n_q {
        for j in 0..grid.n_p {
            let a = g[0][0].data()[[i, j]].re;
            let b = g[0][1].data()[[i, j]].re;
            let c = g[1][1].data()[[i, j]].re;
            let m = 0.5 * (a + c);
            let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            let (lo, hi) = (m - r, m + r);
            if lo < -1e-10 * scale {
                return Err(CoreError::PsdViolation { value: lo, i, j });
            }
            let (slo, shi) = (lo.max(0.0).sqrt(), hi.max(0.0).sqrt());
            let root = if r < 1e-300 {
                [[shi, 0.0], [0.0, shi]]
            } else {
                // eigenvector for hi: (b, hi - a) unless degenerate in b
                let (vx, vy) = if b.abs() > 1e-300 {
                    let n = (b * b + (hi - a) * (hi - a)).sqrt();
                    (b / n, (hi - a) / n)
                } else if a >= c {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                };
                [
                    [
                        shi * vx * vx + slo * vy * vy,
                        shi * vx * vy - slo * vx * vy,
                    ],
                    [
                        shi * vx * vy - slo * vx * vy,
                        shi * vy * vy + slo * vx * vx,
                    ],
                ]
            };
            out[0][0][[i, j]] = root[0][0];
            out[0][1][[i, j]] = root[0][1];
            out[1][0][[i, j]] = root[1][0];
            out[1][1][[i, j]] = root[1][1];
        }
    }
    let wrap = |a: Array2<f64>| {
        Field::from_data(grid.clone(), a.mapv(|x| Complex64::new(x, 0.0))).unwrap()
    };
    let [[g00, g01], [g10, g11]] = out;
    Ok([[wrap(g00), wrap(g01)], [wrap(g10), wrap(g11)]])
}

// ---------------------------------------------------------------------------
// Particle ensembles
// ---------------------------------------------------------------------------

/// Particle swarm with its RNG seed and time stamp.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub positions: Vec<[f64; 2]>,
    pub seed: u64,
    pub time: f64,
}

impl Ensemble {
    pub fn new(positions: Vec<[f64; 2]>, seed: u64, time: f64) -> Result<Self> {
        if positions.is_empty() {
            return Err(CoreError::EmptyEnsemble);
        }
        if positions.iter().any(|x| !x[0].is_finite() || !x[1].is_finite()) {
            return Err(CoreError::Divergence { particle: 0, step: 0 });
        }
        Ok(Self { positions, seed, time })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn sample_mean(&self) -> [f64; 2] {
        let n = self.len() as f64;
        let mut m = [0.0f64; 2];
        for x in &self.positions {
            m[0] += x[0];
            m[1] += x[1];
        }
        [m[0] / n, m[1] / n]
    }

    pub fn sample_variance(&self) -> [f64; 2] {
        let n = self.len() as f64;
        let mean = self.sample_mean();
        let mut v = [0.0f64; 2];
        for x in &self.positions {
            v[0] += (x[0] - mean[0]) * (x[0] - mean[0]);
            v[1] += (x[1] - mean[1]) * (x[1] - mean[1]);
        }
        [v[0] / n, v[1] / n]
    }
}

/// SDE with drift f and noise gain g (so the diffusion matrix is g g^T).
pub struct SdeModel {
    pub drift: Box<dyn Fn([f64; 2], f64) -> [f64; 2] + Send + Sync>,
    pub noise: Box<dyn Fn([f64; 2], f64) -> [[f64; 2]; 2] + Send + Sync>,
}

impl SdeModel {
    pub fn new(
        drift: impl Fn([f64; 2], f64) -> [f64; 2] + Send + Sync + 'static,
        noise: impl Fn([f64; 2], f64) -> [[f64; 2]; 2] + Send + Sync + 'static,
    ) -> Self {
        Self { drift: Box::new(drift), noise: Box::new(noise) }
    }

    /// Verify g g^T = G at sampled grid points.
    pub fn validate_noise(&self, g: &[[Field; 2]; 2], t: f64, tol: f64) -> Result<()> {
        let grid = g[0][0].grid();
        for i in (0..grid.n_q).step_by((grid.n_q / 8).max(1)) {
            for j in (0..grid.n_p).step_by((grid.n_p / 8).max(1)) {
                let x = [grid.q_at(i), grid.p_at(j)];
                let gn = (self.noise)(x, t);
                for mu in 0..2 {
                    for nu in 0..2 {
                        let got: f64 = (0..2).map(|k| gn[mu][k] * gn[nu][k]).sum();
                        let want = g[mu][nu].data()[[i, j]].re;
                        if (got - want).abs() > tol {
                            return Err(CoreError::PsdViolation { value: got - want, i, j });
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Bilinear interpolation of a real field at an arbitrary point, clamped to
/// the grid hull.
pub fn interp_field(f: &Field, x: [f64; 2]) -> f64 {
    let grid = f.grid();
    let fx = ((x[0] - grid.q_min) / grid.dq()).clamp(0.0, (grid.n_q - 1) as f64);
    let fy = ((x[1] - grid.p_min) / grid.dp()).clamp(0.0, (grid.n_p - 1) as f64);
    let i0 = (fx.floor() as usize).min(grid.n_q - 2);
    let j0 = (fy.floor() as usize).min(grid.n_p - 2);
    let wx = fx - i0 as f64;
    let wy = fy - j0 as f64;
    let v = |i: usize, j: usize| f.data()[[i, j]].re;
    (1.0 - wx) * ((1.0 - wy) * v(i0, j0) + wy * v(i0, j0 + 1))
        + wx * ((1.0 - wy) * v(i0 + 1, j0) + wy * v(i0 + 1, j0 + 1))
}

/// Words of ChaCha stream consumed per (particle, step) slot. Two standard
/// normals cost ~2 u64 draws plus rare ziggurat retries; 64 words leave slack.
const WORDS_PER_STEP: u128 = 64;

/// Derive a use-site-specific seed so that ensemble initialization, forward
/// stepping, and sampling never consume the same (stream, word) slots.
fn domain_seed(seed: u64, domain: u64) -> u64 {
    // splitmix64 round on seed xor domain tag
    let mut z = seed ^ domain.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const DOMAIN_STEPPING: u64 = 0;
const DOMAIN_INIT: u64 = 1;
const DOMAIN_GRID_SAMPLING: u64 = 2;

fn normals_at(seed: u64, stream: u64, step: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(step as u128 * WORDS_PER_STEP);
    let a: f64 = StandardNormal.sample(&mut rng);
    let b: f64 = StandardNormal.sample(&mut rng);
    (a, b)
}

/// Euler-Maruyama on x <- x + f dt + g xi sqrt(dt), with counter-based RNG
/// streams keyed by (seed, particle, step): bit-identical results for a
/// given seed regardless of thread count.
pub fn euler_maruyama(
    model: &SdeModel,
    init: &Ensemble,
    t0: f64,
    t_end: f64,
    dt: f64,
    stride: usize,
) -> Result<Vec<Ensemble>> {
    em_run(model, init, t0, t_end, dt, stride, 0, |t| t)
}

fn em_run(
    model: &SdeModel,
    init: &Ensemble,
    t0: f64,
    t_end: f64,
    dt: f64,
    stride: usize,
    stream_offset: u64,
    time_label: impl Fn(f64) -> f64,
) -> Result<Vec<Ensemble>> {
    if init.is_empty() {
        return Err(CoreError::EmptyEnsemble);
    }
    if !(dt > 0.0) || !(t_end > t0) {
        return Err(CoreError::Config(crate::error::ConfigError::Constraint(
            format!("SDE integration needs dt > 0 and t_end > t0 (got dt = {dt})"),
        )));
    }
    let n_steps = (((t_end - t0) / dt).round() as usize).max(1);
    let dt = (t_end - t0) / n_steps as f64;
    let stride = stride.max(1);
    let sqrt_dt = dt.sqrt();
    let seed = init.seed;
    let step_seed = domain_seed(seed, DOMAIN_STEPPING);

    let mut positions = init.positions.clone();
    let mut out = vec![Ensemble {
        positions: positions.clone(),
        seed,
        time: time_label(t0),
    }];

    let mut step = 0usize;
    while step < n_steps {
        let chunk = stride.min(n_steps - step);
        let errors: Vec<(usize, usize)> = positions
            .par_iter_mut()
            .enumerate()
            .filter_map(|(pid, x)| {
                for k in 0..chunk {
                    let s = step + k;
                    let t = t0 + s as f64 * dt;
                    let f = (model.drift)(*x, t);
                    let g = (model.noise)(*x, t);
                    let (xi0, xi1) = normals_at(step_seed, stream_offset + pid as u64, s);
                    x[0] += f[0] * dt + (g[0][0] * xi0 + g[0][1] * xi1) * sqrt_dt;
                    x[1] += f[1] * dt + (g[1][0] * xi0 + g[1][1] * xi1) * sqrt_dt;
                    if !x[0].is_finite() || !x[1].is_finite() {
                        return Some((pid, s));
                    }
                }
                None
            })
            .collect();
        if let Some(&(particle, s)) = errors.iter().min() {
            return Err(CoreError::Divergence { particle, step: s });
        }
        step += chunk;
        out.push(Ensemble {
            positions: positions.clone(),
            seed,
            time: time_label(t0 + step as f64 * dt),
        });
    }
    Ok(out)
}

/// Sample the reverse-time SDE: Euler-Maruyama in s = T - t with the
/// reversed drift (forward-time parametrization) and noise fields
/// interpolated at particle positions. Ensemble times decrease from T to t0.
pub fn reverse_sde(
    drift: &DriftField,
    noise: &[[Field; 2]; 2],
    terminal: &Ensemble,
    t_end: f64,
    t0: f64,
    dt: f64,
    stride: usize,
) -> Result<Vec<Ensemble>> {
    // Materialize the drift series for closure capture.
    let series: Vec<(f64, [Field; 2])> = match drift {
        DriftField::Static(f) => vec![(t0, f.clone())],
        DriftField::Series(s) => s.clone(),
    };
    let noise = noise.clone();
    let drift_fn = move |x: [f64; 2], s: f64| -> [f64; 2] {
        let t = t_end - s;
        // linear interpolation of the drift snapshots in physical time
        let n = series.len();
        let (lo, hi, w) = if n == 1 || t <= series[0].0 {
            (0, 0, 0.0)
        } else if t >= series[n - 1].0 {
            (n - 1, n - 1, 0.0)
        } else {
            let hi = series.partition_point(|(ts, _)| *ts <= t).min(n - 1);
            let lo = hi - 1;
            (lo, hi, (t - series[lo].0) / (series[hi].0 - series[lo].0))
        };
        let sample = |mu: usize| -> f64 {
            let a = interp_field(&series[lo].1[mu], x);
            if lo == hi {
                a
            } else {
                (1.0 - w) * a + w * interp_field(&series[hi].1[mu], x)
            }
        };
        [sample(0), sample(1)]
    };
    let noise_fn = move |x: [f64; 2], _s: f64| -> [[f64; 2]; 2] {
        [
            [interp_field(&noise[0][0], x), interp_field(&noise[0][1], x)],
            [interp_field(&noise[1][0], x), interp_field(&noise[1][1], x)],
        ]
    };
    let model = SdeModel::new(drift_fn, noise_fn);
    em_run(&model, terminal, 0.0, t_end - t0, dt, stride, 0, |s| t_end - s)
}

// ---------------------------------------------------------------------------
// Density estimation and grid sampling
// ---------------------------------------------------------------------------

/// Kernel bandwidth choice for [`density_estimate`].
#[derive(Debug, Clone, Copy, Default)]
pub enum Bandwidth {
    /// Scott-style rule: std * M^{-1/6} per axis.
    #[default]
    Auto,
    Fixed(f64, f64),
}

/// Gaussian-kernel density of an ensemble on a grid: cloud-in-cell binning
/// followed by a separable truncated-Gaussian blur. Mass is exactly 1 over
/// the grid (particles outside the grid hull are clamped to it).
pub fn density_estimate(
    ensemble: &Ensemble,
    grid: &PhaseGrid,
    bandwidth: Bandwidth,
) -> Result<DistributionField> {
    if ensemble.is_empty() {
        return Err(CoreError::EmptyEnsemble);
    }
    let (hq, hp) = match bandwidth {
        Bandwidth::Fixed(hq, hp) => {
            if !(hq > 0.0) || !(hp > 0.0) {
                return Err(CoreError::Config(crate::error::ConfigError::Constraint(
                    "bandwidth must be positive".into(),
                )));
            }
            (hq, hp)
        }
        Bandwidth::Auto => {
            let m = ensemble.len() as f64;
            let var = ensemble.sample_variance();
            let factor = m.powf(-1.0 / 6.0);
            (
                (var[0].sqrt() * factor).max(grid.dq()),
                (var[1].sqrt() * factor).max(grid.dp()),
            )
        }
    };

    // cloud-in-cell deposit
    let mut hist = Array2::<f64>::zeros((grid.n_q, grid.n_p));
    for x in &ensemble.positions {
        let fx = ((x[0] - grid.q_min) / grid.dq()).clamp(0.0, (grid.n_q - 1) as f64);
        let fy = ((x[1] - grid.p_min) / grid.dp()).clamp(0.0, (grid.n_p - 1) as f64);
        let i0 = (fx.floor() as usize).min(grid.n_q - 2);
        let j0 = (fy.floor() as usize).min(grid.n_p - 2);
        let wx = fx - i0 as f64;
        let wy = fy - j0 as f64;
        hist[[i0, j0]] += (1.0 - wx) * (1.0 - wy);
        hist[[i0 + 1, j0]] += wx * (1.0 - wy);
        hist[[i0, j0 + 1]] += (1.0 - wx) * wy;
        hist[[i0 + 1, j0 + 1]] += wx * wy;
    }

    // separable Gaussian blur, kernel normalized to unit sum
    let blur = |data: &Array2<f64>, axis: usize, h: f64, step: f64| -> Array2<f64> {
        let n_axis = if axis == 0 { data.nrows() } else { data.ncols() };
        let radius = ((4.0 * h / step).ceil() as usize).clamp(1, n_axis - 1);
        let mut kernel: Vec<f64> = (0..=radius)
            .map(|k| (-0.5 * (k as f64 * step / h).powi(2)).exp())
            .collect();
        let total = kernel[0] + 2.0 * kernel[1..].iter().sum::<f64>();
        for k in kernel.iter_mut() {
            *k /= total;
        }
        let (nq, np) = data.dim();
        let n = if axis == 0 { nq } else { np };
        let others = if axis == 0 { np } else { nq };
        let mut out = Array2::<f64>::zeros((nq, np));
        for other in 0..others {
            for i in 0..n {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let lo = i.checked_sub(k);
                    let hi = if i + k < n { Some(i + k) } else { None };
                    let get = |idx: usize| if axis == 0 { data[[idx, other]] } else { data[[other, idx]] };
                    if k == 0 {
                        acc += kv * get(i);
                    } else {
                        // reflect at the boundary to preserve mass
                        let l = lo.unwrap_or_else(|| k - i - 1);
                        let r = hi.unwrap_or_else(|| 2 * n - (i + k) - 1);
                        acc += kv * (get(l) + get(r));
                    }
                }
                if axis == 0 {
                    out[[i, other]] = acc;
                } else {
                    out[[other, i]] = acc;
                }
            }
        }
        out
    };
    let smooth = blur(&hist, 0, hq, grid.dq());
    let smooth = blur(&smooth, 1, hp, grid.dp());

    let norm = 1.0 / (ensemble.len() as f64 * grid.cell_area());
    let field = Field::from_data(
        grid.clone(),
        smooth.mapv(|x| Complex64::new(x * norm, 0.0)),
    )?;
    DistributionField::new(field)
}

/// Draw an ensemble from a grid density by inverse-CDF sampling (marginal in
/// Q, conditional in P) with uniform jitter inside each cell. Deterministic
/// for a given seed.
pub fn sample_distribution(p: &DistributionField, m: usize, seed: u64) -> Result<Ensemble> {
    if m == 0 {
        return Err(CoreError::EmptyEnsemble);
    }
    let grid = p.grid().clone();
    let data = p.field().data();
    let mut row_mass: Vec<f64> = vec![0.0; grid.n_q];
    for i in 0..grid.n_q {
        for j in 0..grid.n_p {
            row_mass[i] += data[[i, j]].re.max(0.0);
        }
    }
    let total: f64 = row_mass.iter().sum();
    if total <= 0.0 {
        return Err(CoreError::Resolution("cannot sample from zero-mass density".into()));
    }
    let mut row_cdf = vec![0.0; grid.n_q + 1];
    for i in 0..grid.n_q {
        row_cdf[i + 1] = row_cdf[i] + row_mass[i] / total;
    }
    let positions: Vec<[f64; 2]> = (0..m)
        .into_par_iter()
        .map(|pid| {
            let mut rng = ChaCha8Rng::seed_from_u64(domain_seed(seed, DOMAIN_GRID_SAMPLING));
            rng.set_stream(pid as u64);
            let u: f64 = rand::Rng::random(&mut rng);
            let i = row_cdf.partition_point(|&c| c <= u).saturating_sub(1).min(grid.n_q - 1);
            // conditional CDF along P in row i
            let v: f64 = rand::Rng::random(&mut rng);
            let mut acc = 0.0;
            let target = v * row_mass[i];
            let mut j = grid.n_p - 1;
            for jj in 0..grid.n_p {
                acc += data[[i, jj]].re.max(0.0);
                if acc >= target {
                    j = jj;
                    break;
                }
            }
            let jq: f64 = rand::Rng::random(&mut rng);
            let jp: f64 = rand::Rng::random(&mut rng);
            [
                grid.q_at(i) + (jq - 0.5) * grid.dq(),
                grid.p_at(j) + (jp - 0.5) * grid.dp(),
            ]
        })
        .collect();
    Ensemble::new(positions, seed, 0.0)
}

// ---------------------------------------------------------------------------
// Bayes transition check
// ---------------------------------------------------------------------------

/// Options for [`bayes_transition_check`].
#[derive(Debug, Clone)]
pub struct BayesCheckOptions {
    pub bins: usize,
    pub q_range: (f64, f64),
    pub p_range: (f64, f64),
    /// Bins qualify when both independent estimates have at least this count.
    pub min_count: usize,
}

impl Default for BayesCheckOptions {
    fn default() -> Self {
        Self { bins: 8, q_range: (-1.5, 1.5), p_range: (-1.5, 1.5), min_count: 100 }
    }
}

/// Report of the Monte-Carlo Bayes-identity check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BayesReport {
    pub max_relative_violation: f64,
    pub qualifying_bins: usize,
    pub transitions: usize,
    pub horizon: f64,
}

fn bin_of(x: [f64; 2], opts: &BayesCheckOptions) -> Option<usize> {
    let n = opts.bins;
    let fx = (x[0] - opts.q_range.0) / (opts.q_range.1 - opts.q_range.0);
    let fy = (x[1] - opts.p_range.0) / (opts.p_range.1 - opts.p_range.0);
    if !(0.0..1.0).contains(&fx) || !(0.0..1.0).contains(&fy) {
        return None;
    }
    Some((fx * n as f64) as usize * n + (fy * n as f64) as usize)
}

/// Empirical check of P(x_t | x_s) P(x_s) = P(x_s | x_t) P(x_t) on coarse
/// bins. The two conditionals come from one simulated copy of the dynamics;
/// the marginal weights come from a second copy of the same initial sample
/// with independent noise streams. The identity then holds exactly for the
/// estimates iff the independently realized marginals are consistent with
/// the empirical kernel, so the violation measures sampling plus binning
/// error and shrinks like 1/sqrt(M).
pub fn bayes_transition_check(
    model: &SdeModel,
    init: &Ensemble,
    dt: f64,
    horizon: f64,
    opts: &BayesCheckOptions,
) -> Result<BayesReport> {
    let m = init.len();
    let copy_a = em_run(model, init, 0.0, horizon, dt, usize::MAX, 0, |t| t)?;
    let copy_b = em_run(model, init, 0.0, horizon, dt, usize::MAX, m as u64, |t| t)?;
    let end_a = &copy_a.last().unwrap().positions;
    let end_b = &copy_b.last().unwrap().positions;

    let nb = opts.bins * opts.bins;
    let mut joint_a = vec![0usize; nb * nb];
    let mut init_b = vec![0usize; nb];
    let mut horizon_b = vec![0usize; nb];
    let mut n_a = 0usize;
    let mut n_b = 0usize;
    for (x0, (xa, xb)) in init.positions.iter().zip(end_a.iter().zip(end_b.iter())) {
        if let Some(i) = bin_of(*x0, opts) {
            if let Some(j) = bin_of(*xa, opts) {
                joint_a[i * nb + j] += 1;
                n_a += 1;
            }
            if let Some(j) = bin_of(*xb, opts) {
                init_b[i] += 1;
                horizon_b[j] += 1;
                n_b += 1;
            }
        }
    }
    if n_a == 0 || n_b == 0 {
        return Err(CoreError::Undersampled { required: opts.min_count, max_count: 0 });
    }

    // copy-A marginals normalize its conditionals
    let mut init_a = vec![0usize; nb];
    let mut horizon_a = vec![0usize; nb];
    for i in 0..nb {
        for j in 0..nb {
            init_a[i] += joint_a[i * nb + j];
            horizon_a[j] += joint_a[i * nb + j];
        }
    }

    let mut max_violation = 0.0f64;
    let mut qualifying = 0usize;
    let mut max_count = 0usize;
    for i in 0..nb {
        for j in 0..nb {
            let c = joint_a[i * nb + j];
            max_count = max_count.max(c);
            if c < opts.min_count || init_b[i] == 0 || horizon_b[j] == 0 {
                continue;
            }
            qualifying += 1;
            // left: P(j, horizon | i, 0) P(i, 0); right: P(i, 0 | j, horizon) P(j, horizon)
            let left = (c as f64 / init_a[i] as f64) * (init_b[i] as f64 / n_b as f64);
            let right = (c as f64 / horizon_a[j] as f64) * (horizon_b[j] as f64 / n_b as f64);
            let mean = 0.5 * (left + right);
            if mean > 0.0 {
                max_violation = max_violation.max((left - right).abs() / mean);
            }
        }
    }
    if qualifying == 0 {
        return Err(CoreError::Undersampled { required: opts.min_count, max_count });
    }
    Ok(BayesReport {
        max_relative_violation: max_violation,
        qualifying_bins: qualifying,
        transitions: n_a,
        horizon,
    })
}

/// Standard-normal-squared ensemble: Gaussian cloud with the given
/// per-axis standard deviations, for initializing SDE runs.
pub fn gaussian_ensemble(
    m: usize,
    center: [f64; 2],
    std: [f64; 2],
    seed: u64,
) -> Result<Ensemble> {
    if m == 0 {
        return Err(CoreError::EmptyEnsemble);
    }
    let positions: Vec<[f64; 2]> = (0..m)
        .into_par_iter()
        .map(|pid| {
            let mut rng = ChaCha8Rng::seed_from_u64(domain_seed(seed, DOMAIN_INIT));
            rng.set_stream(pid as u64);
            rng.set_word_pos(0);
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            [center[0] + std[0] * a, center[1] + std[1] * b]
        })
        .collect();
    Ensemble::new(positions, seed, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semiclassical::{diffusion_coefficients, drift_coefficients, reverse_drift};
    use crate::symbols::Poly2;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn grid(n: usize, l: f64) -> PhaseGrid {
        PhaseGrid::symmetric(n, n, l, l, 1.0).unwrap()
    }

    fn gaussian_density(g: &PhaseGrid, center: [f64; 2], var: f64) -> DistributionField {
        let f = Field::from_real_fn(g.clone(), |q, p| {
            let r2 = (q - center[0]) * (q - center[0]) + (p - center[1]) * (p - center[1]);
            (-r2 / (2.0 * var)).exp()
        });
        DistributionField::from_unnormalized(f).unwrap()
    }

    fn identity_g(g: &PhaseGrid, scale: f64) -> [[Field; 2]; 2] {
        let d = Field::from_real_fn(g.clone(), move |_, _| scale);
        let z = Field::zeros(g.clone());
        [[d.clone(), z.clone()], [z, d]]
    }

    #[test]
    fn heat_kernel_variance_growth() {
        // f = 0, G = I: Var(t) = Var(0) + t per axis.
        let g = grid(256, 6.0);
        let p0 = gaussian_density(&g, [0.0, 0.0], 0.01);
        let zero = Field::zeros(g.clone());
        let drift = DriftField::Static([zero.clone(), zero]);
        let gg = identity_g(&g, 1.0);
        let dt = 4e-4;
        let sol = integrate_fp(&drift, &gg, &p0, 0.0, 1.0, dt, &FpOptions::default()).unwrap();
        let (_, var) = sol.last().moments();
        for v in var {
            assert!(
                (v - 1.01).abs() <= 1e-3 * 1.01,
                "variance {v}, expected 1.01"
            );
        }
        assert!(sol.mass_drift <= 1e-8, "mass drift {}", sol.mass_drift);
        assert!(sol.min_value >= -1e-6, "min value {}", sol.min_value);
    }

    #[test]
    fn ou_relaxes_to_half_variance() {
        // f = -x, G = I: stationary variance 1/2 per axis.
        let g = grid(128, 6.0);
        let p0 = gaussian_density(&g, [0.5, -0.3], 0.3);
        let fq = Field::from_real_fn(g.clone(), |q, _| -q);
        let fp = Field::from_real_fn(g.clone(), |_, p| -p);
        let drift = DriftField::Static([fq, fp]);
        let gg = identity_g(&g, 1.0);
        let sol = integrate_fp(&drift, &gg, &p0, 0.0, 4.0, 2e-3, &FpOptions::default()).unwrap();
        let (mean, var) = sol.last().moments();
        let expected_mean = [0.5 * (-4.0f64).exp(), -0.3 * (-4.0f64).exp()];
        for (m, e) in mean.iter().zip(expected_mean) {
            assert!((m - e).abs() < 1e-3, "mean {m}, expected {e}");
        }
        for v in var {
            assert!((v - 0.5).abs() <= 1e-3, "variance {v}");
        }
    }

    #[test]
    fn pure_advection_translates_density() {
        let g = grid(128, 6.0);
        let p0 = gaussian_density(&g, [-1.0, -0.5], 0.25);
        let cvec = [1.0, 0.5];
        let fq = Field::from_real_fn(g.clone(), move |_, _| cvec[0]);
        let fp = Field::from_real_fn(g.clone(), move |_, _| cvec[1]);
        let drift = DriftField::Static([fq, fp]);
        let zero = Field::zeros(g.clone());
        let gg = [[zero.clone(), zero.clone()], [zero.clone(), zero]];
        let t_end = 1.0;
        let sol =
            integrate_fp(&drift, &gg, &p0, 0.0, t_end, 5e-3, &FpOptions::default()).unwrap();
        let shifted = gaussian_density(&g, [-1.0 + cvec[0], -0.5 + cvec[1]], 0.25);
        let l1 = sol.last().l1_distance(&shifted).unwrap();
        assert!(l1 <= 1e-2, "L1 after shift comparison: {l1}");
    }

    #[test]
    fn cfl_violation_is_reported() {
        let g = grid(64, 6.0);
        let p0 = gaussian_density(&g, [0.0, 0.0], 0.5);
        let zero = Field::zeros(g.clone());
        let drift = DriftField::Static([zero.clone(), zero]);
        let gg = identity_g(&g, 1.0);
        assert!(matches!(
            integrate_fp(&drift, &gg, &p0, 0.0, 1.0, 0.5, &FpOptions::default()),
            Err(CoreError::CflViolation { .. })
        ));
    }

    #[test]
    fn forward_then_reverse_fp_round_trip() {
        // Damped oscillator drift; reference trajectory = the evolving
        // density itself, so the reversal is exact in the continuum.
        let g = grid(128, 6.0);
        let h = Poly2::q()
            .mul(&Poly2::q())
            .add(&Poly2::p().mul(&Poly2::p()))
            .scale(c(0.5, 0.0));
        let ell = Poly2::q()
            .add(&Poly2::p().scale(c(0.0, 1.0)))
            .scale(c((0.5f64).sqrt(), 0.0));
        let f = drift_coefficients(&h, &[ell.clone()], 1.0, &g);
        let gg = diffusion_coefficients(&[ell], 1.0, &g);
        let p0 = gaussian_density(&g, [1.2, -0.6], 0.5);
        let dt = 2e-3;
        let t_end = 0.5;
        let opts = FpOptions { stride: 25, ..Default::default() };
        let forward =
            integrate_fp(&DriftField::Static(f.clone()), &gg, &p0, 0.0, t_end, dt, &opts)
                .unwrap();

        // reversed drift snapshots from the stored forward trajectory
        let series: Vec<(f64, [Field; 2])> = forward
            .times
            .iter()
            .zip(&forward.snapshots)
            .map(|(t, p)| {
                // 1e-8 floor: grid derivatives divided by deeper tails are
                // pure roundoff and would dominate the CFL bound
                let fbar = reverse_drift(&f, &gg, p.field(), 1e-8).unwrap();
                (*t, fbar)
            })
            .collect();
        let back = integrate_reverse_fp(
            &DriftField::Series(series),
            &gg,
            forward.last(),
            t_end,
            0.0,
            dt,
            &FpOptions::default(),
        )
        .unwrap();
        let l1 = back.last().l1_distance(&p0).unwrap();
        assert!(l1 <= 1e-2, "round-trip L1 = {l1}");
    }

    #[test]
    fn stationary_density_is_reverse_invariant() {
        // stationary vacuum of the damped oscillator: P* = e^{-(Q^2+P^2)}/pi,
        // with matching reversed drift the reverse evolution is constant.
        let g = grid(256, 5.0);
        let h = Poly2::q()
            .mul(&Poly2::q())
            .add(&Poly2::p().mul(&Poly2::p()))
            .scale(c(0.5, 0.0));
        let ell = Poly2::q()
            .add(&Poly2::p().scale(c(0.0, 1.0)))
            .scale(c((0.5f64).sqrt(), 0.0));
        let f = drift_coefficients(&h, &[ell.clone()], 1.0, &g);
        let gg = diffusion_coefficients(&[ell], 1.0, &g);
        let p_star = gaussian_density(&g, [0.0, 0.0], 0.5);
        let fbar = reverse_drift(&f, &gg, p_star.field(), 1e-8).unwrap();
        let back = integrate_reverse_fp(
            &DriftField::Static(fbar),
            &gg,
            &p_star,
            0.5,
            0.0,
            1e-3,
            &FpOptions::default(),
        )
        .unwrap();
        let drift_away = back.last().l1_distance(&p_star).unwrap();
        assert!(drift_away <= 1e-6, "stationary reverse drifted by {drift_away}");
    }

    #[test]
    fn noise_factor_examples() {
        let g = grid(16, 3.0);
        let gg = identity_g(&g, 0.5);
        let root = noise_factor(&gg).unwrap();
        for z in root[0][0].data().iter() {
            assert_abs_diff_eq!(z.re, 0.5f64.sqrt(), epsilon = 1e-14);
        }
        assert!(root[0][1].max_abs() < 1e-14);

        let zero = [
            [Field::zeros(g.clone()), Field::zeros(g.clone())],
            [Field::zeros(g.clone()), Field::zeros(g.clone())],
        ];
        let root0 = noise_factor(&zero).unwrap();
        assert_eq!(root0[0][0].max_abs(), 0.0);

        // random PSD per point: reassembly g g^T = G to 1e-10
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut a = Array2::zeros((g.n_q, g.n_p));
        let mut b = Array2::zeros((g.n_q, g.n_p));
        let mut d = Array2::zeros((g.n_q, g.n_p));
        for i in 0..g.n_q {
            for j in 0..g.n_p {
                let m = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                // M M^T is PSD
                a[[i, j]] = c(m[0] * m[0] + m[1] * m[1], 0.0);
                b[[i, j]] = c(m[0] * m[2] + m[1] * m[3], 0.0);
                d[[i, j]] = c(m[2] * m[2] + m[3] * m[3], 0.0);
            }
        }
        let gg2 = [
            [
                Field::from_data(g.clone(), a).unwrap(),
                Field::from_data(g.clone(), b.clone()).unwrap(),
            ],
            [
                Field::from_data(g.clone(), b).unwrap(),
                Field::from_data(g.clone(), d).unwrap(),
            ],
        ];
        let root2 = noise_factor(&gg2).unwrap();
        for i in 0..g.n_q {
            for j in 0..g.n_p {
                for mu in 0..2 {
                    for nu in 0..2 {
                        let got: f64 = (0..2)
                            .map(|k| root2[mu][k].data()[[i, j]].re * root2[nu][k].data()[[i, j]].re)
                            .sum();
                        let want = gg2[mu][nu].data()[[i, j]].re;
                        assert!(
                            (got - want).abs() <= 1e-10,
                            "({i},{j},{mu},{nu}): {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn noise_factor_rejects_indefinite_matrix() {
        let g = grid(8, 2.0);
        let one = Field::from_real_fn(g.clone(), |_, _| 1.0);
        let two = Field::from_real_fn(g.clone(), |_, _| 2.0);
        let bad = [[one.clone(), two.clone()], [two, one]];
        assert!(matches!(noise_factor(&bad), Err(CoreError::PsdViolation { .. })));
    }

    #[test]
    fn frozen_ensemble_stays_put() {
        let init = gaussian_ensemble(100, [0.3, -0.2], [1.0, 1.0], 7).unwrap();
        let model = SdeModel::new(|_, _| [0.0, 0.0], |_, _| [[0.0; 2]; 2]);
        let out = euler_maruyama(&model, &init, 0.0, 1.0, 0.01, usize::MAX).unwrap();
        assert_eq!(out.last().unwrap().positions, init.positions);
    }

    #[test]
    fn ou_ensemble_reaches_half_variance() {
        let m = 100_000;
        let init = gaussian_ensemble(m, [0.0, 0.0], [0.2, 0.2], 11).unwrap();
        let model = SdeModel::new(
            |x, _| [-x[0], -x[1]],
            |_, _| [[1.0, 0.0], [0.0, 1.0]],
        );
        let out = euler_maruyama(&model, &init, 0.0, 5.0, 0.01, usize::MAX).unwrap();
        let var = out.last().unwrap().sample_variance();
        for v in var {
            assert!((v - 0.5).abs() <= 0.01, "sample variance {v}");
        }
    }

    #[test]
    fn fixed_seed_reproduces_bitwise() {
        let init = gaussian_ensemble(5_000, [0.0, 0.0], [1.0, 0.5], 42).unwrap();
        let model = SdeModel::new(
            |x, _| [x[1], -x[0] - 0.3 * x[1]],
            |_, _| [[0.4, 0.0], [0.1, 0.5]],
        );
        let a = euler_maruyama(&model, &init, 0.0, 1.0, 1e-2, usize::MAX).unwrap();
        let b = euler_maruyama(&model, &init, 0.0, 1.0, 1e-2, usize::MAX).unwrap();
        assert_eq!(a.last().unwrap().positions, b.last().unwrap().positions);
    }

    #[test]
    fn divergence_names_particle_and_step() {
        let init = Ensemble::new(vec![[1.0, 0.0], [2.0, 0.0]], 1, 0.0).unwrap();
        // super-exponential blow-up
        let model = SdeModel::new(|x, _| [x[0] * x[0] * x[0] * 1e6, 0.0], |_, _| [[0.0; 2]; 2]);
        match euler_maruyama(&model, &init, 0.0, 10.0, 0.5, usize::MAX) {
            Err(CoreError::Divergence { particle, .. }) => assert!(particle < 2),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn deterministic_reverse_sde_runs_backward_characteristics() {
        // harmonic rotation forward, f-bar = -f, g = 0: particles retrace.
        let g = grid(64, 6.0);
        let init = gaussian_ensemble(200, [1.0, 0.0], [0.3, 0.3], 5).unwrap();
        let model = SdeModel::new(|x, _| [x[1], -x[0]], |_, _| [[0.0; 2]; 2]);
        let dt = 1e-3;
        let t_end = 1.0;
        let fwd = euler_maruyama(&model, &init, 0.0, t_end, dt, usize::MAX).unwrap();
        let fbar = [
            Field::from_real_fn(g.clone(), |_, p| -p),
            Field::from_real_fn(g.clone(), |q, _| q),
        ];
        let zero = Field::zeros(g.clone());
        let noise = [[zero.clone(), zero.clone()], [zero.clone(), zero]];
        let back = reverse_sde(
            &DriftField::Static(fbar),
            &noise,
            fwd.last().unwrap(),
            t_end,
            0.0,
            dt,
            usize::MAX,
        )
        .unwrap();
        let mut max_err: f64 = 0.0;
        for (a, b) in back.last().unwrap().positions.iter().zip(&init.positions) {
            max_err = max_err.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
        }
        assert!(max_err <= 5e-3, "max particle return error {max_err}");
    }

    #[test]
    fn kde_single_particle_is_normalized_bump() {
        let g = grid(64, 4.0);
        let e = Ensemble::new(vec![[0.5, -0.5]], 1, 0.0).unwrap();
        let d = density_estimate(&e, &g, Bandwidth::Fixed(0.3, 0.3)).unwrap();
        assert_abs_diff_eq!(d.mass, 1.0, epsilon = 1e-6);
        // peak near the particle
        let (mean, _) = d.moments();
        assert!((mean[0] - 0.5).abs() < 0.05 && (mean[1] + 0.5).abs() < 0.05);
    }

    #[test]
    fn kde_of_standard_normal_matches_analytic() {
        let g = grid(128, 6.0);
        let m = 100_000;
        let e = gaussian_ensemble(m, [0.0, 0.0], [1.0, 1.0], 23).unwrap();
        let d = density_estimate(&e, &g, Bandwidth::Auto).unwrap();
        let analytic = gaussian_density(&g, [0.0, 0.0], 1.0);
        let l1 = d.l1_distance(&analytic).unwrap();
        assert!(l1 <= 3e-2, "L1 distance {l1}");
        assert_abs_diff_eq!(d.mass, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn sampling_from_grid_density_is_consistent() {
        let g = grid(128, 6.0);
        let p = gaussian_density(&g, [0.8, -0.4], 0.7);
        let e = sample_distribution(&p, 100_000, 31).unwrap();
        let mean = e.sample_mean();
        let var = e.sample_variance();
        assert!((mean[0] - 0.8).abs() < 0.01, "mean Q {}", mean[0]);
        assert!((mean[1] + 0.4).abs() < 0.01, "mean P {}", mean[1]);
        assert!((var[0] - 0.7).abs() < 0.02, "var Q {}", var[0]);
        assert!((var[1] - 0.7).abs() < 0.02, "var P {}", var[1]);
    }

    #[test]
    fn ensemble_and_pde_agree_for_ou() {
        let g = grid(128, 6.0);
        let m = 100_000;
        let var0 = 0.09f64;
        let init = gaussian_ensemble(m, [0.0, 0.0], [var0.sqrt(), var0.sqrt()], 17).unwrap();
        let model = SdeModel::new(
            |x, _| [-x[0], -x[1]],
            |_, _| [[1.0, 0.0], [0.0, 1.0]],
        );
        let t_end = 1.0;
        let ens = euler_maruyama(&model, &init, 0.0, t_end, 5e-3, usize::MAX).unwrap();
        let kde = density_estimate(ens.last().unwrap(), &g, Bandwidth::Auto).unwrap();

        let p0 = gaussian_density(&g, [0.0, 0.0], var0);
        let fq = Field::from_real_fn(g.clone(), |q, _| -q);
        let fp = Field::from_real_fn(g.clone(), |_, p| -p);
        let gg = identity_g(&g, 1.0);
        let sol = integrate_fp(
            &DriftField::Static([fq, fp]),
            &gg,
            &p0,
            0.0,
            t_end,
            2e-3,
            &FpOptions::default(),
        )
        .unwrap();
        let l1 = kde.l1_distance(sol.last()).unwrap();
        assert!(l1 <= 5e-2, "ensemble vs PDE L1 = {l1}");
    }

    #[test]
    fn bayes_identity_on_ou_transitions() {
        let m = 1_000_000;
        let init = gaussian_ensemble(m, [0.0, 0.0], [0.7, 0.7], 101).unwrap();
        let model = SdeModel::new(
            |x, _| [-x[0], -x[1]],
            |_, _| [[1.0, 0.0], [0.0, 1.0]],
        );
        let report = bayes_transition_check(
            &model,
            &init,
            0.02,
            0.5,
            &BayesCheckOptions::default(),
        )
        .unwrap();
        assert!(report.qualifying_bins > 0);
        assert!(
            report.max_relative_violation <= 0.1,
            "violation {} over {} bins",
            report.max_relative_violation,
            report.qualifying_bins
        );
    }

    #[test]
    fn bayes_identity_exact_for_deterministic_map() {
        let m = 100_000;
        let init = gaussian_ensemble(m, [0.0, 0.0], [0.8, 0.8], 7).unwrap();
        let model = SdeModel::new(|x, _| [x[1], -x[0]], |_, _| [[0.0; 2]; 2]);
        let report = bayes_transition_check(
            &model,
            &init,
            0.01,
            0.4,
            &BayesCheckOptions { min_count: 50, ..Default::default() },
        )
        .unwrap();
        assert!(
            report.max_relative_violation <= 1e-12,
            "deterministic violation {}",
            report.max_relative_violation
        );
    }

    #[test]
    fn bayes_check_reports_undersampling() {
        let init = gaussian_ensemble(300, [0.0, 0.0], [0.7, 0.7], 3).unwrap();
        let model = SdeModel::new(
            |x, _| [-x[0], -x[1]],
            |_, _| [[1.0, 0.0], [0.0, 1.0]],
        );
        assert!(matches!(
            bayes_transition_check(&model, &init, 0.02, 0.5, &BayesCheckOptions::default()),
            Err(CoreError::Undersampled { .. })
        ));
    }

    #[test]
    fn sde_noise_validation_catches_mismatch() {
        let g = grid(16, 3.0);
        let gg = identity_g(&g, 1.0);
        let ok = SdeModel::new(|_, _| [0.0, 0.0], |_, _| [[1.0, 0.0], [0.0, 1.0]]);
        assert!(ok.validate_noise(&gg, 0.0, 1e-10).is_ok());
        let bad = SdeModel::new(|_, _| [0.0, 0.0], |_, _| [[0.5, 0.0], [0.0, 1.0]]);
        assert!(bad.validate_noise(&gg, 0.0, 1e-10).is_err());
    }
}
