//! Phase-space machinery: the Wigner transform and Weyl quantization on a
//! uniform (Q, P) grid, grid derivatives, Poisson brackets, and the Moyal
//! star product truncated at second order in hbar.
//!
//! Transforms use the discrete displacement lattice of the position basis:
//! the characteristic function chi(a, b) = Tr[A e^{-i xi_b q/hbar} e^{-i eta_a p/hbar}]
//! is exact on the lattice, and the Wigner function is its symplectic
//! Fourier series evaluated on the requested grid. The identity maps to the
//! constant 1 exactly and Hermitian operators map to real fields.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::operator::{BasisKind, HilbertSpace, Operator};
use crate::symbols::Poly2;

/// Uniform rectangular phase-space grid (N = 1 degree of freedom).
///
/// Axes follow the periodic node convention: Q_i = q_min + i (q_max - q_min)/n_q.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrid {
    pub n_q: usize,
    pub n_p: usize,
    pub q_min: f64,
    pub q_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub hbar: f64,
}

impl PhaseGrid {
    pub fn new(
        n_q: usize,
        n_p: usize,
        q_min: f64,
        q_max: f64,
        p_min: f64,
        p_max: f64,
        hbar: f64,
    ) -> Result<Self> {
        if !n_q.is_power_of_two() || !n_p.is_power_of_two() {
            return Err(CoreError::Config(crate::error::ConfigError::Constraint(
                format!("grid point counts must be powers of two, got {n_q} x {n_p}"),
            )));
        }
        if !(q_max > q_min) || !(p_max > p_min) || !(hbar > 0.0) {
            return Err(CoreError::Config(crate::error::ConfigError::Constraint(
                "grid ranges must be nonempty and hbar positive".into(),
            )));
        }
        Ok(Self { n_q, n_p, q_min, q_max, p_min, p_max, hbar })
    }

    /// Square grid symmetric about the origin: [-l_q, l_q) x [-l_p, l_p).
    pub fn symmetric(n_q: usize, n_p: usize, l_q: f64, l_p: f64, hbar: f64) -> Result<Self> {
        Self::new(n_q, n_p, -l_q, l_q, -l_p, l_p, hbar)
    }

    pub fn dq(&self) -> f64 {
        (self.q_max - self.q_min) / self.n_q as f64
    }

    pub fn dp(&self) -> f64 {
        (self.p_max - self.p_min) / self.n_p as f64
    }

    pub fn q_at(&self, i: usize) -> f64 {
        self.q_min + i as f64 * self.dq()
    }

    pub fn p_at(&self, j: usize) -> f64 {
        self.p_min + j as f64 * self.dp()
    }

    /// dQ dP of one cell.
    pub fn cell_area(&self) -> f64 {
        self.dq() * self.dp()
    }
}

/// Reality classification of a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    Real,
    Complex,
}

/// Relative tolerance for declaring a field real.
pub const REALITY_TOL: f64 = 1e-10;

/// Sampled complex function on a [`PhaseGrid`]; data[[i, j]] sits at (Q_i, P_j).
#[derive(Debug, Clone)]
pub struct Field {
    grid: PhaseGrid,
    data: Array2<Complex64>,
}

impl Field {
    pub fn zeros(grid: PhaseGrid) -> Self {
        let data = Array2::zeros((grid.n_q, grid.n_p));
        Self { grid, data }
    }

    pub fn from_data(grid: PhaseGrid, data: Array2<Complex64>) -> Result<Self> {
        if data.nrows() != grid.n_q || data.ncols() != grid.n_p {
            return Err(CoreError::GridMismatch(format!(
                "data {}x{} vs grid {}x{}",
                data.nrows(),
                data.ncols(),
                grid.n_q,
                grid.n_p
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn from_fn(grid: PhaseGrid, f: impl Fn(f64, f64) -> Complex64) -> Self {
        let data =
            Array2::from_shape_fn((grid.n_q, grid.n_p), |(i, j)| f(grid.q_at(i), grid.p_at(j)));
        Self { grid, data }
    }

    pub fn from_real_fn(grid: PhaseGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        Self::from_fn(grid, |q, p| Complex64::new(f(q, p), 0.0))
    }

    /// Sample a polynomial symbol exactly on the grid.
    pub fn from_poly(grid: PhaseGrid, poly: &Poly2) -> Self {
        Self::from_fn(grid, |q, p| poly.eval(q, p))
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<Complex64> {
        &mut self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_imag(&self) -> f64 {
        self.data.iter().map(|z| z.im.abs()).fold(0.0, f64::max)
    }

    pub fn max_abs_real(&self) -> f64 {
        self.data.iter().map(|z| z.re.abs()).fold(0.0, f64::max)
    }

    pub fn kind(&self) -> FieldKind {
        if self.max_abs_imag() <= REALITY_TOL * self.max_abs_real().max(f64::MIN_POSITIVE) {
            FieldKind::Real
        } else {
            FieldKind::Complex
        }
    }

    pub fn conj(&self) -> Field {
        Field { grid: self.grid.clone(), data: self.data.mapv(|z| z.conj()) }
    }

    pub fn scale(&self, c: Complex64) -> Field {
        Field { grid: self.grid.clone(), data: self.data.mapv(|z| z * c) }
    }

    pub fn add(&self, rhs: &Field) -> Result<Field> {
        self.check_grid(rhs)?;
        Ok(Field { grid: self.grid.clone(), data: &self.data + &rhs.data })
    }

    pub fn sub(&self, rhs: &Field) -> Result<Field> {
        self.check_grid(rhs)?;
        Ok(Field { grid: self.grid.clone(), data: &self.data - &rhs.data })
    }

    pub fn mul(&self, rhs: &Field) -> Result<Field> {
        self.check_grid(rhs)?;
        Ok(Field { grid: self.grid.clone(), data: &self.data * &rhs.data })
    }

    pub(crate) fn check_grid(&self, rhs: &Field) -> Result<()> {
        if self.grid != rhs.grid {
            return Err(CoreError::GridMismatch("fields on different grids".into()));
        }
        Ok(())
    }

    /// L2 norm with the grid measure dQ dP.
    pub fn l2_norm(&self) -> f64 {
        (self.data.iter().map(|z| z.norm_sqr()).sum::<f64>() * self.grid.cell_area()).sqrt()
    }

    /// L1 norm with the grid measure dQ dP.
    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).sum::<f64>() * self.grid.cell_area()
    }
}

/// Real, unit-trace Wigner function of a density operator.
#[derive(Debug, Clone)]
pub struct WignerFunction {
    pub field: Field,
    /// Phase-space trace recorded at construction.
    pub trace: f64,
}

impl WignerFunction {
    pub fn from_field(field: Field) -> Result<Self> {
        let im = field.max_abs_imag();
        let re = field.max_abs_real().max(f64::MIN_POSITIVE);
        if im > REALITY_TOL * re {
            return Err(CoreError::Resolution(format!(
                "Wigner function not real: max|Im| = {im:.3e} vs max|Re| = {re:.3e}"
            )));
        }
        let trace = phase_space_trace(&field).re;
        if (trace - 1.0).abs() > 1e-6 {
            return Err(CoreError::Resolution(format!(
                "Wigner function trace {trace} deviates from 1 (grid too small?)"
            )));
        }
        Ok(Self { field, trace })
    }
}

// ---------------------------------------------------------------------------
// Wigner transform and Weyl quantization
// ---------------------------------------------------------------------------

struct DisplacementLattice {
    /// Signed displacement indices, half-weighted at the two ends.
    idx: Vec<i64>,
    weights: Vec<f64>,
}

fn displacement_lattice(d: usize) -> DisplacementLattice {
    let half = (d / 2) as i64;
    let idx: Vec<i64> = (-half..=half).collect();
    let weights = idx
        .iter()
        .map(|&a| if a.unsigned_abs() as usize == d / 2 { 0.5 } else { 1.0 })
        .collect();
    DisplacementLattice { idx, weights }
}

fn check_compatible(space: &HilbertSpace, grid: &PhaseGrid) -> Result<(f64, f64)> {
    let (q_min, q_max) = match space.basis {
        BasisKind::Position { q_min, q_max } => (q_min, q_max),
        BasisKind::Fock => {
            return Err(CoreError::IncompatibleBasis(
                "phase-space transforms need a position-basis operator".into(),
            ))
        }
    };
    let tol = 1e-9 * (q_max - q_min);
    if (q_min - grid.q_min).abs() > tol || (q_max - grid.q_max).abs() > tol {
        return Err(CoreError::IncompatibleBasis(format!(
            "operator box [{q_min}, {q_max}) vs grid Q box [{}, {})",
            grid.q_min, grid.q_max
        )));
    }
    if (space.hbar - grid.hbar).abs() > 1e-12 * space.hbar {
        return Err(CoreError::IncompatibleBasis("hbar differs between space and grid".into()));
    }
    Ok((q_min, q_max))
}

/// Characteristic function chi(a, b) on the displacement lattice.
fn characteristic_fn(op: &Operator, lattice: &DisplacementLattice) -> Array2<Complex64> {
    let d = op.dim();
    let space = op.space();
    let q0 = match space.basis {
        BasisKind::Position { q_min, .. } => q_min,
        BasisKind::Fock => unreachable!("checked by caller"),
    };
    let dq = space.dq().unwrap();
    let na = lattice.idx.len();
    let data = op.data();
    let mut chi = Array2::<Complex64>::zeros((na, na));
    // chi(a,b) = sum_k A[(k-a) mod d, k] e^{-2 pi i b (q0/(d dq) + k/d)}
    let base = q0 / (d as f64 * dq);
    for (ai, &a) in lattice.idx.iter().enumerate() {
        let shift = a.rem_euclid(d as i64) as usize;
        for (bi, &b) in lattice.idx.iter().enumerate() {
            let mut acc = Complex64::ZERO;
            for k in 0..d {
                let row = (k + d - shift) % d;
                let phase = -2.0 * PI * b as f64 * (base + k as f64 / d as f64);
                acc += data[[row, k]] * Complex64::from_polar(1.0, phase);
            }
            chi[[ai, bi]] = acc;
        }
    }
    chi
}

/// Wigner transform of a position-basis operator onto a phase grid.
///
/// Hermitian input gives a real output; the identity maps to the constant 1.
/// The operator's position box must coincide with the grid's Q box (the point
/// counts may differ; evaluation off the operator lattice is trigonometric
/// interpolation, faithful for kernels that decay inside the box).
pub fn wigner_transform(op: &Operator, grid: &PhaseGrid) -> Result<Field> {
    let space = op.space();
    check_compatible(space, grid)?;
    let d = space.dim;
    let dq = space.dq().unwrap();
    let hbar = space.hbar;
    let dp_bin = 2.0 * PI * hbar / (d as f64 * dq);

    let lattice = displacement_lattice(d);
    let chi = characteristic_fn(op, &lattice);
    let na = lattice.idx.len();

    // Stage 1: fold the b-sum with the Weyl phase for every Q of the grid.
    // m1[a, iq] = sum_b w_b chi(a,b) e^{i pi a b / d} e^{i xi_b Q / hbar}
    let mut m1 = Array2::<Complex64>::zeros((na, grid.n_q));
    for (ai, &a) in lattice.idx.iter().enumerate() {
        for iq in 0..grid.n_q {
            let q = grid.q_at(iq);
            let mut acc = Complex64::ZERO;
            for (bi, &b) in lattice.idx.iter().enumerate() {
                let phase = PI * (a * b) as f64 / d as f64 + b as f64 * dp_bin * q / hbar;
                acc += chi[[ai, bi]]
                    * Complex64::from_polar(lattice.weights[bi], phase);
            }
            m1[[ai, iq]] = acc;
        }
    }

    // Stage 2: fold the a-sum for every P of the grid.
    // W[iq, ip] = (1/d) sum_a w_a m1[a, iq] e^{i eta_a P / hbar}
    let mut out = Array2::<Complex64>::zeros((grid.n_q, grid.n_p));
    let inv_d = 1.0 / d as f64;
    for ip in 0..grid.n_p {
        let p = grid.p_at(ip);
        let phases: Vec<Complex64> = lattice
            .idx
            .iter()
            .zip(&lattice.weights)
            .map(|(&a, &w)| Complex64::from_polar(w * inv_d, a as f64 * dq * p / hbar))
            .collect();
        for iq in 0..grid.n_q {
            let mut acc = Complex64::ZERO;
            for ai in 0..na {
                acc += m1[[ai, iq]] * phases[ai];
            }
            out[[iq, ip]] = acc;
        }
    }
    Field::from_data(grid.clone(), out)
}

/// Wigner function of a density operator (validated real, unit trace).
pub fn wigner_function(
    rho: &crate::operator::DensityOperator,
    grid: &PhaseGrid,
) -> Result<WignerFunction> {
    WignerFunction::from_field(wigner_transform(rho.operator(), grid)?)
}

/// Fraction of spectral mass beyond the displacement band of dimension d.
fn beyond_band_fraction(f: &Field, d: usize) -> f64 {
    let grid = f.grid();
    let spec = fft2(f.data());
    let mut beyond = 0.0f64;
    let mut total = 0.0f64;
    // Q-frequencies of the field: kq = 2 pi m / box_q; operator band edge is
    // xi_{d/2}/hbar = pi d / box_q, i.e. |m| > d/2 is unrepresentable.
    // P-frequencies: eta_a / hbar = a dq / hbar with |a| <= d/2: band edge
    // (d/2) dq / hbar; field frequency 2 pi n / box_p.
    let box_q = grid.q_max - grid.q_min;
    let box_p = grid.p_max - grid.p_min;
    let dq_op = box_q / d as f64;
    let p_band = (d as f64 / 2.0) * dq_op / grid.hbar;
    for m in 0..grid.n_q {
        let ms = signed_index(m, grid.n_q);
        let kq = 2.0 * PI * ms as f64 / box_q;
        for n in 0..grid.n_p {
            let ns = signed_index(n, grid.n_p);
            let kp = 2.0 * PI * ns as f64 / box_p;
            let e = spec[[m, n]].norm_sqr();
            total += e;
            if (ms.unsigned_abs() as usize) > d / 2 || kp.abs() > p_band * (1.0 + 1e-9) {
                beyond += e;
            }
            let _ = kq;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        (beyond / total).sqrt()
    }
}

/// Weyl quantization: the inverse of the Wigner transform, mapping a field
/// on the grid to an operator on the given position-basis space.
pub fn weyl_quantize(f: &Field, space: &HilbertSpace) -> Result<Operator> {
    let grid = f.grid();
    check_compatible(space, grid)?;
    let d = space.dim;
    let dq = space.dq().unwrap();
    let q0 = grid.q_min;
    let hbar = space.hbar;
    let dp_bin = 2.0 * PI * hbar / (d as f64 * dq);

    let alias = beyond_band_fraction(f, d);
    if alias > 1e-6 {
        return Err(CoreError::Resolution(format!(
            "field has relative spectral mass {alias:.3e} beyond the d = {d} displacement band"
        )));
    }

    let lattice = displacement_lattice(d);
    let na = lattice.idx.len();

    // c(a,b) = (dQ dP / 2 pi hbar) sum_{m,n} f[m,n] e^{i xi_b Q_m / hbar} e^{i eta_a P_n / hbar}
    // Stage 1 over the P axis, stage 2 over Q.
    let mut r = Array2::<Complex64>::zeros((grid.n_q, na));
    for (ai, &a) in lattice.idx.iter().enumerate() {
        let eta = a as f64 * dq;
        let phases: Vec<Complex64> = (0..grid.n_p)
            .map(|n| Complex64::from_polar(1.0, eta * grid.p_at(n) / hbar))
            .collect();
        for m in 0..grid.n_q {
            let mut acc = Complex64::ZERO;
            for n in 0..grid.n_p {
                acc += f.data()[[m, n]] * phases[n];
            }
            r[[m, ai]] = acc;
        }
    }
    let measure = grid.cell_area() / (2.0 * PI * hbar);
    let mut c = Array2::<Complex64>::zeros((na, na));
    for (bi, &b) in lattice.idx.iter().enumerate() {
        let xi = b as f64 * dp_bin;
        let phases: Vec<Complex64> = (0..grid.n_q)
            .map(|m| Complex64::from_polar(measure, xi * grid.q_at(m) / hbar))
            .collect();
        for ai in 0..na {
            let mut acc = Complex64::ZERO;
            for m in 0..grid.n_q {
                acc += r[[m, ai]] * phases[m];
            }
            c[[ai, bi]] = acc;
        }
    }

    // A = (1/d) sum_{a,b} w_a w_b c(a,b) e^{i pi a b / d} diag(e^{-i xi_b q_j}) Shift_a
    let mut data = Array2::<Complex64>::zeros((d, d));
    for (ai, &a) in lattice.idx.iter().enumerate() {
        let shift = a.rem_euclid(d as i64) as usize;
        for j in 0..d {
            let k = (j + d - shift) % d;
            let qj = q0 + j as f64 * dq;
            let mut acc = Complex64::ZERO;
            for (bi, &b) in lattice.idx.iter().enumerate() {
                let phase = PI * (a * b) as f64 / d as f64 - b as f64 * dp_bin * qj / hbar;
                acc += c[[ai, bi]]
                    * Complex64::from_polar(lattice.weights[bi], phase);
            }
            data[[j, k]] += acc * Complex64::new(lattice.weights[ai] / d as f64, 0.0);
        }
    }
    Operator::from_array(space.clone(), data)
}

/// Phase-space trace: integral of f over the grid divided by 2 pi hbar.
pub fn phase_space_trace(f: &Field) -> Complex64 {
    let sum: Complex64 = f.data().iter().sum();
    sum * Complex64::new(f.grid().cell_area() / (2.0 * PI * f.grid().hbar), 0.0)
}

// ---------------------------------------------------------------------------
// Grid derivatives
// ---------------------------------------------------------------------------

/// Differentiation backend for grid fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DiffMode {
    /// Fourier differentiation; spectrally accurate for fields that decay
    /// inside the box.
    #[default]
    Spectral,
    /// Fourth-order central differences with one-sided stencils at the
    /// boundary; exact on polynomials of degree <= 4.
    FiniteDiff4,
}

fn signed_index(i: usize, n: usize) -> i64 {
    let i = i as i64;
    let n = n as i64;
    if i <= (n - 1) / 2 {
        i
    } else {
        i - n
    }
}

static FFT_CACHE: OnceLock<Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>> = OnceLock::new();

fn get_fft(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let cache = FFT_CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut cache = cache.lock().unwrap();
    cache
        .entry((n, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if inverse {
                planner.plan_fft_inverse(n)
            } else {
                planner.plan_fft_forward(n)
            }
        })
        .clone()
}

fn fft2(data: &Array2<Complex64>) -> Array2<Complex64> {
    let (nr, nc) = (data.nrows(), data.ncols());
    let mut out = data.clone();
    let fft_c = get_fft(nc, false);
    for mut row in out.rows_mut() {
        let slice = row.as_slice_mut().expect("contiguous row");
        fft_c.process(slice);
    }
    let fft_r = get_fft(nr, false);
    let mut col_buf = vec![Complex64::ZERO; nr];
    for j in 0..nc {
        for i in 0..nr {
            col_buf[i] = out[[i, j]];
        }
        fft_r.process(&mut col_buf);
        for i in 0..nr {
            out[[i, j]] = col_buf[i];
        }
    }
    out
}

fn spectral_derivative(f: &Field, axis: usize, order: usize) -> Field {
    let grid = f.grid().clone();
    let (n, len, step) = match axis {
        0 => (grid.n_q, grid.q_max - grid.q_min, grid.n_p),
        _ => (grid.n_p, grid.p_max - grid.p_min, grid.n_q),
    };
    let fwd = get_fft(n, false);
    let inv = get_fft(n, true);
    let mut out = f.data().clone();
    let mut buf = vec![Complex64::ZERO; n];
    let factor: Vec<Complex64> = (0..n)
        .map(|i| {
            let s = signed_index(i, n);
            // zero the Nyquist mode for odd derivative orders
            if order % 2 == 1 && n % 2 == 0 && s == -(n as i64) / 2 {
                return Complex64::ZERO;
            }
            let k = 2.0 * PI * s as f64 / len;
            Complex64::new(0.0, k).powu(order as u32) / n as f64
        })
        .collect();
    for other in 0..step {
        for i in 0..n {
            buf[i] = if axis == 0 { out[[i, other]] } else { out[[other, i]] };
        }
        fwd.process(&mut buf);
        for (b, fac) in buf.iter_mut().zip(&factor) {
            *b *= fac;
        }
        inv.process(&mut buf);
        for i in 0..n {
            if axis == 0 {
                out[[i, other]] = buf[i];
            } else {
                out[[other, i]] = buf[i];
            }
        }
    }
    Field { grid, data: out }
}

fn fd4_line(values: &[Complex64], h: f64, order: usize, out: &mut [Complex64]) {
    let n = values.len();
    debug_assert!(n >= 6);
    let v = |i: usize| values[i];
    match order {
        1 => {
            let c = 1.0 / (12.0 * h);
            out[0] = (v(0) * -25.0 + v(1) * 48.0 - v(2) * 36.0 + v(3) * 16.0 - v(4) * 3.0) * c;
            out[1] = (v(0) * -3.0 - v(1) * 10.0 + v(2) * 18.0 - v(3) * 6.0 + v(4) * 1.0) * c;
            for i in 2..n - 2 {
                out[i] = (v(i - 2) - v(i - 1) * 8.0 + v(i + 1) * 8.0 - v(i + 2)) * c;
            }
            out[n - 2] =
                (v(n - 5) * -1.0 + v(n - 4) * 6.0 - v(n - 3) * 18.0 + v(n - 2) * 10.0
                    + v(n - 1) * 3.0)
                    * c;
            out[n - 1] = (v(n - 5) * 3.0 - v(n - 4) * 16.0 + v(n - 3) * 36.0 - v(n - 2) * 48.0
                + v(n - 1) * 25.0)
                * c;
        }
        2 => {
            let c = 1.0 / (12.0 * h * h);
            out[0] = (v(0) * 45.0 - v(1) * 154.0 + v(2) * 214.0 - v(3) * 156.0 + v(4) * 61.0
                - v(5) * 10.0)
                * c;
            out[1] = (v(0) * 10.0 - v(1) * 15.0 - v(2) * 4.0 + v(3) * 14.0 - v(4) * 6.0
                + v(5) * 1.0)
                * c;
            for i in 2..n - 2 {
                out[i] = (-v(i - 2) + v(i - 1) * 16.0 - v(i) * 30.0 + v(i + 1) * 16.0 - v(i + 2))
                    * c;
            }
            out[n - 2] = (v(n - 6) * 1.0 - v(n - 5) * 6.0 + v(n - 4) * 14.0 - v(n - 3) * 4.0
                - v(n - 2) * 15.0
                + v(n - 1) * 10.0)
                * c;
            out[n - 1] = (v(n - 6) * -10.0 + v(n - 5) * 61.0 - v(n - 4) * 156.0 + v(n - 3) * 214.0
                - v(n - 2) * 154.0
                + v(n - 1) * 45.0)
                * c;
        }
        _ => unreachable!("order checked by caller"),
    }
}

fn fd4_derivative(f: &Field, axis: usize, order: usize) -> Field {
    let grid = f.grid().clone();
    let (n, h, step) = match axis {
        0 => (grid.n_q, grid.dq(), grid.n_p),
        _ => (grid.n_p, grid.dp(), grid.n_q),
    };
    let mut out = f.data().clone();
    let mut line = vec![Complex64::ZERO; n];
    let mut dline = vec![Complex64::ZERO; n];
    for other in 0..step {
        for i in 0..n {
            line[i] = if axis == 0 { f.data()[[i, other]] } else { f.data()[[other, i]] };
        }
        fd4_line(&line, h, order, &mut dline);
        for i in 0..n {
            if axis == 0 {
                out[[i, other]] = dline[i];
            } else {
                out[[other, i]] = dline[i];
            }
        }
    }
    Field { grid, data: out }
}

/// Partial derivative of a field along axis 0 (Q) or 1 (P), order 1 or 2.
pub fn partial_derivative(f: &Field, axis: usize, order: usize, mode: DiffMode) -> Result<Field> {
    if axis > 1 {
        return Err(CoreError::UnknownAxis(axis));
    }
    if !(1..=2).contains(&order) {
        return Err(CoreError::UnsupportedDerivativeOrder(order));
    }
    Ok(match mode {
        DiffMode::Spectral => spectral_derivative(f, axis, order),
        DiffMode::FiniteDiff4 => fd4_derivative(f, axis, order),
    })
}

/// Poisson bracket {A, B} = dQ A dP B - dP A dQ B on fields.
pub fn poisson_bracket(a: &Field, b: &Field, mode: DiffMode) -> Result<Field> {
    a.check_grid(b)?;
    let aq = partial_derivative(a, 0, 1, mode)?;
    let ap = partial_derivative(a, 1, 1, mode)?;
    let bq = partial_derivative(b, 0, 1, mode)?;
    let bp = partial_derivative(b, 1, 1, mode)?;
    aq.mul(&bp)?.sub(&ap.mul(&bq)?)
}

// ---------------------------------------------------------------------------
// Jets and the Moyal star product
// ---------------------------------------------------------------------------

/// A field together with its first and second derivatives.
///
/// Jets from polynomial symbols carry exact derivatives; jets from plain
/// fields use grid differentiation in the requested mode.
#[derive(Debug, Clone)]
pub struct FieldJet {
    pub v: Field,
    pub dq: Field,
    pub dp: Field,
    pub dqq: Field,
    pub dqp: Field,
    pub dpp: Field,
}

impl FieldJet {
    pub fn from_field(f: &Field, mode: DiffMode) -> Result<Self> {
        let dq = partial_derivative(f, 0, 1, mode)?;
        let dp = partial_derivative(f, 1, 1, mode)?;
        let dqq = partial_derivative(f, 0, 2, mode)?;
        let dpp = partial_derivative(f, 1, 2, mode)?;
        let dqp = partial_derivative(&dq, 1, 1, mode)?;
        Ok(Self { v: f.clone(), dq, dp, dqq, dqp, dpp })
    }

    pub fn from_poly(grid: &PhaseGrid, poly: &Poly2) -> Self {
        let sample = |p: &Poly2| Field::from_poly(grid.clone(), p);
        let dq = poly.dq();
        let dp = poly.dp();
        Self {
            v: sample(poly),
            dqq: sample(&dq.dq()),
            dqp: sample(&dq.dp()),
            dpp: sample(&dp.dp()),
            dq: sample(&dq),
            dp: sample(&dp),
        }
    }

    pub fn grid(&self) -> &PhaseGrid {
        self.v.grid()
    }

    pub fn conj(&self) -> Self {
        Self {
            v: self.v.conj(),
            dq: self.dq.conj(),
            dp: self.dp.conj(),
            dqq: self.dqq.conj(),
            dqp: self.dqp.conj(),
            dpp: self.dpp.conj(),
        }
    }

}

/// Moyal star product A * B truncated at the requested order in hbar:
/// order 0: AB; order 1: + (i hbar/2){A,B}; order 2 adds
/// -(hbar^2/8)(A_QQ B_PP - 2 A_QP B_QP + A_PP B_QQ).
pub fn moyal_star(a: &FieldJet, b: &FieldJet, hbar: f64, order: usize) -> Result<Field> {
    if order > 2 {
        return Err(CoreError::UnsupportedStarOrder(order));
    }
    a.v.check_grid(&b.v)?;
    let mut out = a.v.mul(&b.v)?;
    if order >= 1 {
        let bracket = a.dq.mul(&b.dp)?.sub(&a.dp.mul(&b.dq)?)?;
        out = out.add(&bracket.scale(Complex64::new(0.0, 0.5 * hbar)))?;
    }
    if order >= 2 {
        let term = a
            .dqq
            .mul(&b.dpp)?
            .sub(&a.dqp.mul(&b.dqp)?.scale(Complex64::new(2.0, 0.0)))?
            .add(&a.dpp.mul(&b.dqq)?)?;
        out = out.add(&term.scale(Complex64::new(-hbar * hbar / 8.0, 0.0)))?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Serialization: flat binary + JSON descriptor, CSV for small grids
// ---------------------------------------------------------------------------

/// Sidecar descriptor of a serialized field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldDescriptor {
    pub grid: PhaseGrid,
    pub kind: FieldKind,
}

impl Field {
    /// Write `{base}.bin` (row-major f64 values; re/im interleaved when
    /// complex) and `{base}.json`.
    pub fn write(&self, base: &Path) -> Result<Vec<std::path::PathBuf>> {
        let kind = self.kind();
        let bin_path = base.with_extension("bin");
        let json_path = base.with_extension("json");
        let io_err = |path: &Path, e: std::io::Error| CoreError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut bytes: Vec<u8> = Vec::with_capacity(self.data.len() * 16);
        for z in self.data.iter() {
            bytes.extend_from_slice(&z.re.to_le_bytes());
            if kind == FieldKind::Complex {
                bytes.extend_from_slice(&z.im.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(&bin_path).map_err(|e| io_err(&bin_path, e))?;
        f.write_all(&bytes).map_err(|e| io_err(&bin_path, e))?;
        let descriptor = FieldDescriptor { grid: self.grid.clone(), kind };
        let json = serde_json::to_string_pretty(&descriptor).expect("descriptor serializes");
        std::fs::write(&json_path, json).map_err(|e| io_err(&json_path, e))?;
        Ok(vec![bin_path, json_path])
    }

    /// Read a field written by [`Field::write`].
    pub fn read(base: &Path) -> Result<Field> {
        let bin_path = base.with_extension("bin");
        let json_path = base.with_extension("json");
        let io_err = |path: &Path, e: std::io::Error| CoreError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let json = std::fs::read_to_string(&json_path).map_err(|e| io_err(&json_path, e))?;
        let descriptor: FieldDescriptor = serde_json::from_str(&json)
            .map_err(|e| CoreError::Config(crate::error::ConfigError::Syntax(e.to_string())))?;
        let bytes = std::fs::read(&bin_path).map_err(|e| io_err(&bin_path, e))?;
        let per_value = if descriptor.kind == FieldKind::Complex { 16 } else { 8 };
        let expected = descriptor.grid.n_q * descriptor.grid.n_p * per_value;
        if bytes.len() != expected {
            return Err(CoreError::GridMismatch(format!(
                "binary payload {} bytes, descriptor implies {expected}",
                bytes.len()
            )));
        }
        let mut data = Array2::zeros((descriptor.grid.n_q, descriptor.grid.n_p));
        let mut off = 0usize;
        for i in 0..descriptor.grid.n_q {
            for j in 0..descriptor.grid.n_p {
                let re = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                off += 8;
                let im = if descriptor.kind == FieldKind::Complex {
                    let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                    off += 8;
                    v
                } else {
                    0.0
                };
                data[[i, j]] = Complex64::new(re, im);
            }
        }
        Field::from_data(descriptor.grid, data)
    }

    /// CSV export (Q, P, re, im), intended for small grids.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io_err = |e: std::io::Error| CoreError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut out = String::from("q,p,re,im\n");
        for i in 0..self.grid.n_q {
            for j in 0..self.grid.n_p {
                let z = self.data[[i, j]];
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    self.grid.q_at(i),
                    self.grid.p_at(j),
                    z.re,
                    z.im
                ));
            }
        }
        std::fs::write(path, out).map_err(io_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{coherent_state, q_op, trace_distance, DensityOperator};
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn position_space(d: usize, l: f64) -> HilbertSpace {
        HilbertSpace::position(d, -l, l, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn identity_maps_to_constant_one() {
        let space = position_space(64, 6.0);
        let grid = PhaseGrid::symmetric(128, 128, 6.0, 6.0, 1.0).unwrap();
        let w = wigner_transform(&Operator::identity(space), &grid).unwrap();
        for z in w.data().iter() {
            assert!((z - c(1.0, 0.0)).norm() < 1e-12, "value {z}");
        }
    }

    #[test]
    fn vacuum_wigner_is_gaussian() {
        // W = 2 exp(-(Q^2 + P^2)) for m = omega = hbar = 1.
        let space = position_space(128, 6.0);
        let grid = PhaseGrid::symmetric(256, 256, 6.0, 6.0, 1.0).unwrap();
        let rho = coherent_state(&space, 0.0, 0.0);
        let w = wigner_transform(rho.operator(), &grid).unwrap();
        let mut max_err: f64 = 0.0;
        for i in 0..grid.n_q {
            for j in 0..grid.n_p {
                let (q, p) = (grid.q_at(i), grid.p_at(j));
                let expected = 2.0 * (-(q * q + p * p)).exp();
                max_err = max_err.max((w.data()[[i, j]].re - expected).abs());
            }
        }
        assert!(max_err <= 1e-4, "max pointwise error {max_err}");
        let tr = phase_space_trace(&w);
        assert_abs_diff_eq!(tr.re, 1.0, epsilon = 1e-6);
        assert!(w.max_abs_imag() <= 1e-10 * w.max_abs_real());
    }

    #[test]
    fn vacuum_wigner_matches_direct_sigma_quadrature() {
        // Independent oracle: trapezoid quadrature of
        // int dsigma psi(Q + s/2) psi(Q - s/2) e^{-i P s} on a fine sigma grid.
        // Box +-9 keeps the displacement-lattice truncation (~e^{-L^2/4})
        // below the comparison tolerance.
        let space = position_space(128, 9.0);
        let grid = PhaseGrid::symmetric(128, 128, 9.0, 9.0, 1.0).unwrap();
        let rho = coherent_state(&space, 0.0, 0.0);
        let w = wigner_transform(rho.operator(), &grid).unwrap();
        let psi = |x: f64| (1.0 / std::f64::consts::PI.powf(0.25)) * (-x * x / 2.0).exp();
        let n_sigma = 4000;
        let s_max = 10.0;
        let ds = 2.0 * s_max / n_sigma as f64;
        for &(iq, ip) in &[(64usize, 64usize), (68, 62), (72, 72), (53, 70)] {
            let (q, p) = (grid.q_at(iq), grid.p_at(ip));
            let mut acc = c(0.0, 0.0);
            for k in 0..=n_sigma {
                let s = -s_max + k as f64 * ds;
                let weight = if k == 0 || k == n_sigma { 0.5 } else { 1.0 };
                acc += c(psi(q + s / 2.0) * psi(q - s / 2.0) * weight, 0.0)
                    * Complex64::from_polar(1.0, -p * s);
            }
            let oracle = acc * ds;
            assert!(
                (w.data()[[iq, ip]] - oracle).norm() < 1e-6,
                "({q},{p}): transform {} vs oracle {}",
                w.data()[[iq, ip]],
                oracle
            );
        }
    }

    #[test]
    fn hermitian_operator_gives_real_field() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let space = position_space(32, 5.0);
        let d = space.dim;
        let mut a = Operator::from_array(
            space.clone(),
            Array2::from_shape_fn((d, d), |_| {
                c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            }),
        )
        .unwrap();
        a.hermitize();
        let grid = PhaseGrid::symmetric(32, 32, 5.0, 5.0, 1.0).unwrap();
        let w = wigner_transform(&a, &grid).unwrap();
        assert!(w.max_abs_imag() <= 1e-10 * w.max_abs_real().max(1e-300));
    }

    #[test]
    fn wigner_is_linear() {
        let space = position_space(32, 5.0);
        let grid = PhaseGrid::symmetric(32, 32, 5.0, 5.0, 1.0).unwrap();
        let a = coherent_state(&space, 0.4, 0.0).into_operator();
        let b = coherent_state(&space, -0.3, 0.6).into_operator();
        let combo = a.add(&b.scale(c(2.5, 0.0))).unwrap();
        let w_combo = wigner_transform(&combo, &grid).unwrap();
        let w_a = wigner_transform(&a, &grid).unwrap();
        let w_b = wigner_transform(&b, &grid).unwrap();
        let expected = w_a.add(&w_b.scale(c(2.5, 0.0))).unwrap();
        let diff = w_combo.sub(&expected).unwrap().max_abs();
        assert!(diff <= 1e-12 * w_combo.max_abs(), "linearity deviation {diff}");
    }

    #[test]
    fn wigner_of_position_operator_is_q_at_nodes() {
        let space = position_space(64, 6.0);
        let grid = PhaseGrid::symmetric(64, 64, 6.0, 6.0, 1.0).unwrap();
        let w = wigner_transform(&q_op(&space), &grid).unwrap();
        for i in 0..grid.n_q {
            for j in [0usize, 17, 40] {
                assert!(
                    (w.data()[[i, j]] - c(grid.q_at(i), 0.0)).norm() < 1e-10,
                    "node ({i},{j})"
                );
            }
        }
    }

    /// P box covering exactly one momentum torus of the operator lattice.
    fn commensurate_grid(space: &HilbertSpace, n_q: usize, n_p: usize) -> PhaseGrid {
        let dq = space.dq().unwrap();
        let l_p = std::f64::consts::PI * space.hbar / dq;
        let (q_min, q_max) = match space.basis {
            BasisKind::Position { q_min, q_max } => (q_min, q_max),
            _ => unreachable!(),
        };
        PhaseGrid::new(n_q, n_p, q_min, q_max, -l_p, l_p, space.hbar).unwrap()
    }

    #[test]
    fn weyl_quantize_constant_is_identity() {
        let space = position_space(64, 6.0);
        let grid = commensurate_grid(&space, 64, 256);
        let f = Field::from_real_fn(grid, |_, _| 1.0);
        let op = weyl_quantize(&f, &space).unwrap();
        let diff = op.sub(&Operator::identity(space)).unwrap().norm_max();
        assert!(diff < 1e-10, "deviation from identity {diff}");
    }

    #[test]
    fn weyl_quantize_q_symbol_is_position_operator() {
        let space = position_space(64, 6.0);
        let grid = commensurate_grid(&space, 64, 256);
        let f = Field::from_real_fn(grid, |q, _| q);
        let op = weyl_quantize(&f, &space).unwrap();
        let diff = op.sub(&q_op(&space)).unwrap().norm_max();
        assert!(diff < 1e-8, "deviation from q operator {diff}");
    }

    #[test]
    fn round_trip_weyl_then_wigner_on_gaussian() {
        let space = position_space(32, 6.0);
        let grid = commensurate_grid(&space, 32, 128);
        let f = Field::from_real_fn(grid.clone(), |q, p| {
            (-(q * q + (p - 0.5) * (p - 0.5)) / 2.0).exp()
        });
        let op = weyl_quantize(&f, &space).unwrap();
        let back = wigner_transform(&op, &grid).unwrap();
        let diff = back.sub(&f).unwrap().max_abs();
        assert!(diff <= 1e-6 * f.max_abs(), "round-trip deviation {diff}");
    }

    #[test]
    fn round_trip_wigner_then_weyl_on_vacuum() {
        let space = position_space(64, 8.0);
        let grid = commensurate_grid(&space, 64, 256);
        let rho = coherent_state(&space, 0.3, -0.2);
        let w = wigner_transform(rho.operator(), &grid).unwrap();
        let back = weyl_quantize(&w, &space).unwrap();
        let back_rho = DensityOperator::from_unnormalized(back).unwrap();
        let dist = trace_distance(&back_rho, &rho).unwrap();
        assert!(dist <= 1e-5, "round-trip trace distance {dist}");
    }

    #[test]
    fn aliasing_is_detected() {
        let space = position_space(32, 6.0);
        // fine grid resolves P oscillations far beyond the d = 32 band
        let grid = commensurate_grid(&space, 64, 512);
        let band = (space.dim as f64 / 2.0) * space.dq().unwrap() / space.hbar;
        let f = Field::from_real_fn(grid, |_, p| (3.0 * band * p).cos());
        match weyl_quantize(&f, &space) {
            Err(CoreError::Resolution(_)) => {}
            other => panic!("expected resolution error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn fock_operator_is_rejected() {
        let space = HilbertSpace::fock(8, 1.0, 1.0, 1.0).unwrap();
        let grid = PhaseGrid::symmetric(32, 32, 5.0, 5.0, 1.0).unwrap();
        assert!(matches!(
            wigner_transform(&Operator::identity(space), &grid),
            Err(CoreError::IncompatibleBasis(_))
        ));
    }

    #[test]
    fn derivative_of_polynomials_fd4_is_exact() {
        let grid = PhaseGrid::symmetric(64, 64, 4.0, 4.0, 1.0).unwrap();
        let f = Field::from_real_fn(grid.clone(), |q, _| q * q);
        let df = partial_derivative(&f, 0, 1, DiffMode::FiniteDiff4).unwrap();
        for i in 0..grid.n_q {
            for j in 0..grid.n_p {
                assert!(
                    (df.data()[[i, j]].re - 2.0 * grid.q_at(i)).abs() < 1e-10,
                    "({i},{j})"
                );
            }
        }
        let g = Field::from_real_fn(grid.clone(), |_, p| p * p * p);
        let dg2 = partial_derivative(&g, 1, 2, DiffMode::FiniteDiff4).unwrap();
        for i in [0usize, 31, 63] {
            for j in 0..grid.n_p {
                assert!(
                    (dg2.data()[[i, j]].re - 6.0 * grid.p_at(j)).abs() < 1e-9,
                    "({i},{j}): {} vs {}",
                    dg2.data()[[i, j]].re,
                    6.0 * grid.p_at(j)
                );
            }
        }
    }

    #[test]
    fn derivative_of_constant_is_zero() {
        let grid = PhaseGrid::symmetric(32, 32, 4.0, 4.0, 1.0).unwrap();
        let f = Field::from_real_fn(grid, |_, _| 7.5);
        for mode in [DiffMode::Spectral, DiffMode::FiniteDiff4] {
            let df = partial_derivative(&f, 1, 1, mode).unwrap();
            assert!(df.max_abs() < 1e-10);
        }
    }

    #[test]
    fn spectral_derivative_of_gaussian() {
        let grid = PhaseGrid::symmetric(128, 128, 8.0, 8.0, 1.0).unwrap();
        let f = Field::from_real_fn(grid.clone(), |q, p| (-(q * q + p * p) / 2.0).exp());
        let df = partial_derivative(&f, 0, 1, DiffMode::Spectral).unwrap();
        let d2f = partial_derivative(&f, 0, 2, DiffMode::Spectral).unwrap();
        let mut err1: f64 = 0.0;
        let mut err2: f64 = 0.0;
        for i in 0..grid.n_q {
            for j in 0..grid.n_p {
                let (q, p) = (grid.q_at(i), grid.p_at(j));
                let g = (-(q * q + p * p) / 2.0f64).exp();
                err1 = err1.max((df.data()[[i, j]].re - (-q * g)).abs());
                err2 = err2.max((d2f.data()[[i, j]].re - (q * q - 1.0) * g).abs());
            }
        }
        assert!(err1 < 1e-10, "first-derivative error {err1}");
        assert!(err2 < 1e-9, "second-derivative error {err2}");
    }

    #[test]
    fn unknown_axis_and_order_are_rejected() {
        let grid = PhaseGrid::symmetric(32, 32, 4.0, 4.0, 1.0).unwrap();
        let f = Field::zeros(grid);
        assert!(matches!(
            partial_derivative(&f, 2, 1, DiffMode::Spectral),
            Err(CoreError::UnknownAxis(2))
        ));
        assert!(matches!(
            partial_derivative(&f, 0, 3, DiffMode::Spectral),
            Err(CoreError::UnsupportedDerivativeOrder(3))
        ));
    }

    #[test]
    fn poisson_bracket_examples() {
        let grid = PhaseGrid::symmetric(64, 64, 4.0, 4.0, 1.0).unwrap();
        let q = Field::from_real_fn(grid.clone(), |x, _| x);
        let p = Field::from_real_fn(grid.clone(), |_, y| y);
        let qp = poisson_bracket(&q, &p, DiffMode::FiniteDiff4).unwrap();
        for z in qp.data().iter() {
            assert!((z - c(1.0, 0.0)).norm() < 1e-11);
        }
        let aa = poisson_bracket(&q, &q, DiffMode::FiniteDiff4).unwrap();
        assert!(aa.max_abs() < 1e-12);

        // {Q^2, P^2} = 4 Q P
        let q2 = Field::from_real_fn(grid.clone(), |x, _| x * x);
        let p2 = Field::from_real_fn(grid.clone(), |_, y| y * y);
        let pb = poisson_bracket(&q2, &p2, DiffMode::FiniteDiff4).unwrap();
        for i in 0..grid.n_q {
            for j in 0..grid.n_p {
                let expected = 4.0 * grid.q_at(i) * grid.p_at(j);
                assert!((pb.data()[[i, j]].re - expected).abs() < 1e-9, "({i},{j})");
            }
        }
    }

    #[test]
    fn moyal_star_constants_and_linear_symbols() {
        let grid = PhaseGrid::symmetric(32, 32, 4.0, 4.0, 1.0).unwrap();
        let three = FieldJet::from_poly(&grid, &Poly2::real_constant(3.0));
        let five = FieldJet::from_poly(&grid, &Poly2::real_constant(5.0));
        for order in 0..=2 {
            let prod = moyal_star(&three, &five, 0.7, order).unwrap();
            for z in prod.data().iter() {
                assert!((z - c(15.0, 0.0)).norm() < 1e-13);
            }
        }

        // Q * P = QP + i hbar / 2 at order >= 1; the order-2 term vanishes.
        let hbar = 0.3;
        let qj = FieldJet::from_poly(&grid, &Poly2::q());
        let pj = FieldJet::from_poly(&grid, &Poly2::p());
        for order in 1..=2 {
            let star = moyal_star(&qj, &pj, hbar, order).unwrap();
            for i in 0..grid.n_q {
                for j in 0..grid.n_p {
                    let expected = c(grid.q_at(i) * grid.p_at(j), hbar / 2.0);
                    assert!((star.data()[[i, j]] - expected).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn moyal_commutator_matches_poisson_bracket_at_order_one() {
        let grid = PhaseGrid::symmetric(64, 64, 6.0, 6.0, 1.0).unwrap();
        let a = Field::from_real_fn(grid.clone(), |q, p| (-(q * q + p * p) / 2.0).exp());
        let b = Field::from_real_fn(grid.clone(), |q, p| {
            (-((q - 0.5) * (q - 0.5) + p * p) / 1.5).exp()
        });
        let hbar = 0.4;
        let aj = FieldJet::from_field(&a, DiffMode::Spectral).unwrap();
        let bj = FieldJet::from_field(&b, DiffMode::Spectral).unwrap();
        let ab = moyal_star(&aj, &bj, hbar, 1).unwrap();
        let ba = moyal_star(&bj, &aj, hbar, 1).unwrap();
        let comm = ab.sub(&ba).unwrap();
        let pb = poisson_bracket(&a, &b, DiffMode::Spectral)
            .unwrap()
            .scale(c(0.0, hbar));
        let diff = comm.sub(&pb).unwrap().max_abs();
        assert!(diff < 1e-14, "deviation {diff}");
    }

    /// Exact Moyal star for polynomial symbols: the series terminates, so
    /// every order is summed. Independent oracle for the truncated product.
    fn poly_star_exact(a: &Poly2, b: &Poly2, hbar: f64) -> Poly2 {
        fn mixed_deriv(p: &Poly2, nq: usize, np: usize) -> Poly2 {
            let mut out = p.clone();
            for _ in 0..nq {
                out = out.dq();
            }
            for _ in 0..np {
                out = out.dp();
            }
            out
        }
        let max_k = a.degree() + b.degree() + 1;
        let mut result = Poly2::zero();
        let mut prefactor = Complex64::new(1.0, 0.0); // (i hbar / 2)^k / k!
        for k in 0..=max_k {
            let mut term = Poly2::zero();
            let mut binom = 1.0f64;
            for j in 0..=k {
                let da = mixed_deriv(a, k - j, j);
                let db = mixed_deriv(b, j, k - j);
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                term = term.add(&da.mul(&db).scale(Complex64::new(sign * binom, 0.0)));
                binom = binom * (k - j) as f64 / (j + 1) as f64;
            }
            result = result.add(&term.scale(prefactor));
            prefactor = prefactor * Complex64::new(0.0, hbar / 2.0) / (k + 1) as f64;
        }
        result
    }

    fn fitted_slope(hbars: &[f64], residuals: &[f64]) -> f64 {
        let xs: Vec<f64> = hbars.iter().map(|h| h.ln()).collect();
        let ys: Vec<f64> = residuals.iter().map(|r| r.ln()).collect();
        let n = xs.len() as f64;
        let xm = xs.iter().sum::<f64>() / n;
        let ym = ys.iter().sum::<f64>() / n;
        xs.iter()
            .zip(&ys)
            .map(|(x, y)| (x - xm) * (y - ym))
            .sum::<f64>()
            / xs.iter().map(|x| (x - xm) * (x - xm)).sum::<f64>()
    }

    #[test]
    fn moyal_commutator_residual_scales_as_hbar_cubed() {
        // For the exact star, (A*B - B*A) - i hbar {A,B} = O(hbar^3). The
        // series terminates on polynomials, giving an exact hbar-sweep oracle;
        // the same sweep bounds the truncation error of the order-2 product.
        let grid = PhaseGrid::symmetric(32, 32, 2.0, 2.0, 1.0).unwrap();
        let a = Poly2::q().mul(&Poly2::q()).mul(&Poly2::q()).sub(
            &Poly2::q().mul(&Poly2::p()).scale(c(2.0, 0.0)),
        );
        let b = Poly2::p()
            .mul(&Poly2::p())
            .mul(&Poly2::p())
            .add(&Poly2::q().mul(&Poly2::q()).mul(&Poly2::p()));
        let pb = a.poisson(&b);
        let hbars = [0.2, 0.1, 0.05, 0.025];
        let mut comm_residuals = Vec::new();
        let mut trunc_residuals = Vec::new();
        let aj = FieldJet::from_poly(&grid, &a);
        let bj = FieldJet::from_poly(&grid, &b);
        for &h in &hbars {
            let ab = poly_star_exact(&a, &b, h);
            let ba = poly_star_exact(&b, &a, h);
            let residual = ab.sub(&ba).sub(&pb.scale(c(0.0, h)));
            comm_residuals.push(Field::from_poly(grid.clone(), &residual).max_abs());

            let trunc = moyal_star(&aj, &bj, h, 2).unwrap();
            let exact = Field::from_poly(grid.clone(), &ab);
            trunc_residuals.push(trunc.sub(&exact).unwrap().max_abs());
        }
        let slope_comm = fitted_slope(&hbars, &comm_residuals);
        let slope_trunc = fitted_slope(&hbars, &trunc_residuals);
        assert!(
            slope_comm >= 2.7,
            "commutator slope {slope_comm}, residuals {comm_residuals:?}"
        );
        assert!(
            slope_trunc >= 2.7,
            "truncation slope {slope_trunc}, residuals {trunc_residuals:?}"
        );
    }

    #[test]
    fn truncated_star_matches_exact_series_through_second_order() {
        let grid = PhaseGrid::symmetric(32, 32, 2.0, 2.0, 1.0).unwrap();
        // degree-2 symbols: the exact series stops at k = 2, so the order-2
        // truncation reproduces it exactly
        let a = Poly2::q().mul(&Poly2::q()).add(&Poly2::p().scale(c(0.0, 1.0)));
        let b = Poly2::p().mul(&Poly2::p()).add(&Poly2::q().mul(&Poly2::p()));
        let hbar = 0.7;
        let exact = Field::from_poly(grid.clone(), &poly_star_exact(&a, &b, hbar));
        let truncated = moyal_star(
            &FieldJet::from_poly(&grid, &a),
            &FieldJet::from_poly(&grid, &b),
            hbar,
            2,
        )
        .unwrap();
        let diff = truncated.sub(&exact).unwrap().max_abs();
        assert!(diff < 1e-12 * exact.max_abs(), "deviation {diff}");
    }

    #[test]
    fn phase_space_trace_examples() {
        let hbar = 0.5;
        let l = 4.0;
        let grid = PhaseGrid::symmetric(64, 64, l, l, hbar).unwrap();
        let one = Field::from_real_fn(grid.clone(), |_, _| 1.0);
        let tr = phase_space_trace(&one);
        assert_abs_diff_eq!(
            tr.re,
            (2.0 * l) * (2.0 * l) / (2.0 * std::f64::consts::PI * hbar),
            epsilon = 1e-10
        );

        // trace pairing: Tr(AB) = (1/2 pi hbar) int W_A W_B
        let space = position_space(64, 6.0);
        let grid2 = commensurate_grid(&space, 64, 256);
        let rho_a = coherent_state(&space, 0.5, 0.0);
        let rho_b = coherent_state(&space, -0.4, 0.3);
        let w_a = wigner_transform(rho_a.operator(), &grid2).unwrap();
        let w_b = wigner_transform(rho_b.operator(), &grid2).unwrap();
        let pairing = phase_space_trace(&w_a.mul(&w_b).unwrap()).re;
        let matrix_trace = rho_a.operator().matmul(rho_b.operator()).unwrap().trace().re;
        assert!(
            (pairing - matrix_trace).abs() < 1e-6,
            "pairing {pairing} vs trace {matrix_trace}"
        );
    }

    #[test]
    fn expectation_values_via_phase_space() {
        let space = position_space(64, 7.0);
        let grid = commensurate_grid(&space, 64, 256);
        let rho = coherent_state(&space, 0.9, -0.6);
        let w = wigner_transform(rho.operator(), &grid).unwrap();
        let q_field = Field::from_real_fn(grid.clone(), |q, _| q);
        let p_field = Field::from_real_fn(grid.clone(), |_, p| p);
        let q2_field = Field::from_real_fn(grid.clone(), |q, _| q * q);

        let q_ps = phase_space_trace(&q_field.mul(&w).unwrap()).re;
        let p_ps = phase_space_trace(&p_field.mul(&w).unwrap()).re;
        let q2_ps = phase_space_trace(&q2_field.mul(&w).unwrap()).re;

        let q_mat = rho.operator().matmul(&q_op(&space)).unwrap().trace().re;
        let p_mat = rho.operator().matmul(&crate::operator::p_op(&space)).unwrap().trace().re;
        let qq = q_op(&space);
        let q2_mat = rho.operator().matmul(&qq.matmul(&qq).unwrap()).unwrap().trace().re;

        assert!((q_ps - q_mat).abs() < 1e-5, "{q_ps} vs {q_mat}");
        assert!((p_ps - p_mat).abs() < 1e-5, "{p_ps} vs {p_mat}");
        assert!((q2_ps - q2_mat).abs() < 1e-5, "{q2_ps} vs {q2_mat}");
    }

    #[test]
    fn field_serialization_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = PhaseGrid::symmetric(32, 32, 4.0, 4.0, 1.0).unwrap();
        let f = Field::from_fn(grid.clone(), |q, p| c((-q * q).exp(), 0.1 * p));
        let base = dir.path().join("field_test");
        f.write(&base).unwrap();
        let g = Field::read(&base).unwrap();
        assert_eq!(g.grid(), f.grid());
        let diff = g.sub(&f).unwrap().max_abs();
        assert_eq!(diff, 0.0);

        // real-flagged field round-trips through the compact layout
        let r = Field::from_real_fn(grid, |q, p| (q + p).sin());
        let base_r = dir.path().join("field_real");
        r.write(&base_r).unwrap();
        let r2 = Field::read(&base_r).unwrap();
        assert_eq!(r2.sub(&r).unwrap().max_abs(), 0.0);

        r.write_csv(&dir.path().join("field.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("field.csv")).unwrap();
        assert!(text.starts_with("q,p,re,im\n"));
        assert_eq!(text.lines().count(), 1 + 32 * 32);
    }
}
