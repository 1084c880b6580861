//! Dense complex operator algebra on a truncated Hilbert space.
//!
//! Two basis conventions are supported: a truncated Fock (number) basis and a
//! discretized position basis on a uniform grid with the momentum operator
//! built by discrete Fourier differentiation.

use nalgebra::DMatrix;
use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{CoreError, Result};

/// Relative tolerance for the `hermitian` tag check.
pub const HERMITICITY_TOL: f64 = 1e-12;
/// Relative tolerance for the `positive` tag check.
pub const POSITIVITY_TOL: f64 = 1e-10;
/// Default eigenvalue floor, relative to the max-abs norm of the operator.
pub const DEFAULT_EIG_FLOOR: f64 = 1e-12;

/// Basis in which operators are represented.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BasisKind {
    /// Truncated number basis |0>, ..., |d-1>.
    Fock,
    /// Uniform position grid q_j = q_min + j (q_max - q_min)/d, j = 0..d-1.
    /// The momentum operator is the spectral derivative on this grid.
    Position { q_min: f64, q_max: f64 },
}

/// Truncated Hilbert space with its physical parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HilbertSpace {
    pub dim: usize,
    pub basis: BasisKind,
    pub mass: f64,
    pub omega: f64,
    pub hbar: f64,
}

impl HilbertSpace {
    pub fn fock(dim: usize, mass: f64, omega: f64, hbar: f64) -> Result<Self> {
        if dim < 2 {
            return Err(CoreError::Config(crate::error::ConfigError::Constraint(
                format!("Hilbert dimension must be >= 2, got {dim}"),
            )));
        }
        if mass <= 0.0 || omega <= 0.0 || hbar <= 0.0 {
            return Err(CoreError::Config(crate::error::ConfigError::Constraint(
                "mass, omega, hbar must be positive".into(),
            )));
        }
        Ok(Self { dim, basis: BasisKind::Fock, mass, omega, hbar })
    }

    pub fn position(
        dim: usize,
        q_min: f64,
        q_max: f64,
        mass: f64,
        omega: f64,
        hbar: f64,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(CoreError::Config(crate::error::ConfigError::Constraint(
                format!("Hilbert dimension must be >= 2, got {dim}"),
            )));
        }
        if !(q_max > q_min) {
            return Err(CoreError::Config(crate::error::ConfigError::Constraint(
                "position extent must be strictly positive".into(),
            )));
        }
        if mass <= 0.0 || omega <= 0.0 || hbar <= 0.0 {
            return Err(CoreError::Config(crate::error::ConfigError::Constraint(
                "mass, omega, hbar must be positive".into(),
            )));
        }
        Ok(Self { dim, basis: BasisKind::Position { q_min, q_max }, mass, omega, hbar })
    }

    /// Grid spacing of the position basis.
    pub fn dq(&self) -> Option<f64> {
        match self.basis {
            BasisKind::Position { q_min, q_max } => Some((q_max - q_min) / self.dim as f64),
            BasisKind::Fock => None,
        }
    }

    /// Position grid points (cell nodes of the periodic box).
    pub fn q_points(&self) -> Option<Vec<f64>> {
        match self.basis {
            BasisKind::Position { q_min, .. } => {
                let dq = self.dq().unwrap();
                Some((0..self.dim).map(|j| q_min + j as f64 * dq).collect())
            }
            BasisKind::Fock => None,
        }
    }

    /// Momentum values of the discrete Fourier basis, in FFT index order,
    /// with the Nyquist frequency zeroed for an even dimension.
    pub fn p_values(&self) -> Option<Vec<f64>> {
        let dq = self.dq()?;
        let d = self.dim as i64;
        let dk = 2.0 * std::f64::consts::PI / (d as f64 * dq);
        Some(
            (0..d)
                .map(|nu| {
                    let nu_signed = if nu <= (d - 1) / 2 { nu } else { nu - d };
                    if d % 2 == 0 && nu_signed == -d / 2 {
                        0.0
                    } else {
                        self.hbar * dk * nu_signed as f64
                    }
                })
                .collect(),
        )
    }
}

/// Dense complex operator with optional Hermiticity/positivity tags.
#[derive(Debug, Clone)]
pub struct Operator {
    space: HilbertSpace,
    data: Array2<Complex64>,
    hermitian: bool,
    positive: bool,
}

impl Operator {
    /// Wrap a raw matrix without tags.
    pub fn from_array(space: HilbertSpace, data: Array2<Complex64>) -> Result<Self> {
        if data.nrows() != space.dim || data.ncols() != space.dim {
            return Err(CoreError::ShapeMismatch {
                context: "operator matrix vs Hilbert space",
                left: (data.nrows(), data.ncols()),
                right: (space.dim, space.dim),
            });
        }
        Ok(Self { space, data, hermitian: false, positive: false })
    }

    /// Wrap a matrix and assert the Hermitian tag, validating it.
    pub fn hermitian_from_array(space: HilbertSpace, data: Array2<Complex64>) -> Result<Self> {
        let op = Self::from_array(space, data)?;
        op.tagged_hermitian()
    }

    /// Validate and set the Hermitian tag.
    pub fn tagged_hermitian(mut self) -> Result<Self> {
        let dev = self.hermiticity_deviation();
        let tol = HERMITICITY_TOL * self.norm_max().max(f64::MIN_POSITIVE);
        if dev > tol {
            return Err(CoreError::NonHermitian { deviation: dev, tolerance: tol });
        }
        self.hermitian = true;
        Ok(self)
    }

    /// Validate and set both the Hermitian and positive tags.
    pub fn tagged_positive(mut self) -> Result<Self> {
        self = self.tagged_hermitian()?;
        let floor = POSITIVITY_TOL * self.norm_max().max(f64::MIN_POSITIVE);
        let min = eigvalsh(&self).into_iter().fold(f64::INFINITY, f64::min);
        if min < -floor {
            return Err(CoreError::NegativeEigenvalue { value: min, floor });
        }
        self.positive = true;
        Ok(self)
    }

    pub fn zeros(space: HilbertSpace) -> Self {
        let d = space.dim;
        Self {
            space,
            data: Array2::zeros((d, d)),
            hermitian: true,
            positive: true,
        }
    }

    pub fn identity(space: HilbertSpace) -> Self {
        let d = space.dim;
        Self {
            space,
            data: Array2::eye(d),
            hermitian: true,
            positive: true,
        }
    }

    pub fn space(&self) -> &HilbertSpace {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.space.dim
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<Complex64> {
        self.data
    }

    pub fn is_tagged_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn is_tagged_positive(&self) -> bool {
        self.positive
    }

    /// Conjugate transpose.
    pub fn dagger(&self) -> Self {
        let d = self.dim();
        let mut out = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                out[[i, j]] = self.data[[j, i]].conj();
            }
        }
        Self {
            space: self.space.clone(),
            data: out,
            hermitian: self.hermitian,
            positive: self.positive,
        }
    }

    pub fn trace(&self) -> Complex64 {
        self.data.diag().sum()
    }

    /// Matrix product; result carries no tags.
    pub fn matmul(&self, rhs: &Operator) -> Result<Operator> {
        self.check_same_space(rhs, "matmul")?;
        Operator::from_array(self.space.clone(), self.data.dot(&rhs.data))
    }

    pub fn add(&self, rhs: &Operator) -> Result<Operator> {
        self.check_same_space(rhs, "add")?;
        let mut out = Operator::from_array(self.space.clone(), &self.data + &rhs.data)?;
        out.hermitian = self.hermitian && rhs.hermitian;
        Ok(out)
    }

    pub fn sub(&self, rhs: &Operator) -> Result<Operator> {
        self.check_same_space(rhs, "sub")?;
        let mut out = Operator::from_array(self.space.clone(), &self.data - &rhs.data)?;
        out.hermitian = self.hermitian && rhs.hermitian;
        Ok(out)
    }

    pub fn scale(&self, c: Complex64) -> Operator {
        let mut out = self.clone();
        out.data.mapv_inplace(|z| z * c);
        out.hermitian = self.hermitian && c.im == 0.0;
        out.positive = self.positive && c.im == 0.0 && c.re >= 0.0;
        out
    }

    /// Replace the matrix by its Hermitian part (A + A^dag)/2.
    pub fn hermitize(&mut self) {
        let d = self.dim();
        for i in 0..d {
            for j in i..d {
                let avg = 0.5 * (self.data[[i, j]] + self.data[[j, i]].conj());
                self.data[[i, j]] = avg;
                self.data[[j, i]] = avg.conj();
            }
        }
        self.hermitian = true;
    }

    pub fn hermiticity_deviation(&self) -> f64 {
        let d = self.dim();
        let mut dev: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                dev = dev.max((self.data[[i, j]] - self.data[[j, i]].conj()).norm());
            }
        }
        dev
    }

    /// Max-abs entry norm.
    pub fn norm_max(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Frobenius norm.
    pub fn norm_fro(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    fn check_same_space(&self, rhs: &Operator, context: &'static str) -> Result<()> {
        if self.space != rhs.space {
            return Err(CoreError::ShapeMismatch {
                context: Box::leak(format!("{context}: operators on different spaces").into_boxed_str()),
                left: (self.dim(), self.dim()),
                right: (rhs.dim(), rhs.dim()),
            });
        }
        Ok(())
    }
}

/// Density operator: Hermitian, unit trace, nonnegative spectrum.
#[derive(Debug, Clone)]
pub struct DensityOperator(Operator);

/// Absolute tolerance on |Tr rho - 1|.
pub const TRACE_TOL: f64 = 1e-10;
/// Absolute floor on the smallest eigenvalue of a density operator.
pub const DENSITY_EIG_FLOOR: f64 = 1e-8;

impl DensityOperator {
    pub fn new(op: Operator) -> Result<Self> {
        let op = op.tagged_hermitian()?;
        let tr = op.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(CoreError::Config(crate::error::ConfigError::Constraint(
                format!("density operator trace {tr} deviates from 1"),
            )));
        }
        let min = eigvalsh(&op).into_iter().fold(f64::INFINITY, f64::min);
        if min < -DENSITY_EIG_FLOOR {
            return Err(CoreError::NegativeEigenvalue { value: min, floor: DENSITY_EIG_FLOOR });
        }
        Ok(Self(op))
    }

    /// Normalize the trace then validate.
    pub fn from_unnormalized(op: Operator) -> Result<Self> {
        let tr = op.trace();
        if tr.norm() < 1e-300 {
            return Err(CoreError::Config(crate::error::ConfigError::Constraint(
                "cannot normalize operator with zero trace".into(),
            )));
        }
        Self::new(op.scale(Complex64::new(1.0, 0.0) / tr))
    }

    pub fn operator(&self) -> &Operator {
        &self.0
    }

    pub fn into_operator(self) -> Operator {
        self.0
    }

    pub fn space(&self) -> &HilbertSpace {
        self.0.space()
    }
}

// ---------------------------------------------------------------------------
// Eigendecomposition helpers (nalgebra backs the dense Hermitian solves).
// ---------------------------------------------------------------------------

fn to_nalgebra(op: &Operator) -> DMatrix<Complex64> {
    let d = op.dim();
    DMatrix::from_fn(d, d, |i, j| op.data[[i, j]])
}

fn from_nalgebra(space: HilbertSpace, m: &DMatrix<Complex64>) -> Operator {
    let d = space.dim;
    let data = Array2::from_shape_fn((d, d), |(i, j)| m[(i, j)]);
    Operator { space, data, hermitian: false, positive: false }
}

/// Eigenvalues of a Hermitian operator (unsorted).
pub fn eigvalsh(op: &Operator) -> Vec<f64> {
    let m = to_nalgebra(op);
    let m = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
    m.symmetric_eigen().eigenvalues.iter().cloned().collect()
}

/// Eigendecomposition of a Hermitian operator: (eigenvalues, unitary of columns).
pub fn eigh(op: &Operator) -> (Vec<f64>, DMatrix<Complex64>) {
    let m = to_nalgebra(op);
    let m = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = m.symmetric_eigen();
    (eig.eigenvalues.iter().cloned().collect(), eig.eigenvectors)
}

/// Apply a real function to the spectrum of a Hermitian operator.
pub fn hermitian_matrix_fn(op: &Operator, f: impl Fn(f64) -> f64) -> Result<Operator> {
    let op_checked = op.clone().tagged_hermitian()?;
    let (vals, vecs) = eigh(&op_checked);
    let d = op.dim();
    let diag = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            Complex64::new(f(vals[i]), 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    let m = &vecs * diag * vecs.adjoint();
    let mut out = from_nalgebra(op.space.clone(), &m);
    out.hermitize();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

/// [A, B] = AB - BA.
pub fn commutator(a: &Operator, b: &Operator) -> Result<Operator> {
    let ab = a.matmul(b)?;
    let ba = b.matmul(a)?;
    ab.sub(&ba)
}

/// [A, B]_+ = AB + BA.
pub fn anticommutator(a: &Operator, b: &Operator) -> Result<Operator> {
    let ab = a.matmul(b)?;
    let ba = b.matmul(a)?;
    ab.add(&ba)
}

/// Outcome of a floored spectral operation: the result plus how many
/// eigenvalues were raised to the floor.
pub struct Floored {
    pub op: Operator,
    pub clamped: usize,
}

fn floored_spectral(op: &Operator, eps: f64, f: impl Fn(f64) -> f64) -> Result<Floored> {
    let checked = op.clone().tagged_hermitian()?;
    let (vals, vecs) = eigh(&checked);
    let mut clamped = 0usize;
    for &v in &vals {
        if v < -eps {
            return Err(CoreError::NegativeEigenvalue { value: v, floor: eps });
        }
        if v < eps {
            clamped += 1;
        }
    }
    if clamped > 0 {
        log::debug!("eigenvalue floor raised {clamped} eigenvalues to {eps:.3e}");
    }
    let d = op.dim();
    let diag = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            Complex64::new(f(vals[i].max(eps)), 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    let m = &vecs * diag * vecs.adjoint();
    let mut out = from_nalgebra(op.space.clone(), &m);
    out.hermitize();
    out.positive = true;
    Ok(Floored { op: out, clamped })
}

/// Positive square root of a Hermitian PSD operator, with eigenvalues
/// clamped to [eps, inf) before the root.
pub fn hermitian_sqrt(op: &Operator, eps: f64) -> Result<Operator> {
    Ok(hermitian_sqrt_counted(op, eps)?.op)
}

/// Same as [`hermitian_sqrt`] but reports how many eigenvalues hit the floor.
pub fn hermitian_sqrt_counted(op: &Operator, eps: f64) -> Result<Floored> {
    floored_spectral(op, eps, f64::sqrt)
}

/// Inverse of a Hermitian PSD operator, with eigenvalue clamping.
pub fn hermitian_inv(op: &Operator, eps: f64) -> Result<Operator> {
    Ok(hermitian_inv_counted(op, eps)?.op)
}

pub fn hermitian_inv_counted(op: &Operator, eps: f64) -> Result<Floored> {
    floored_spectral(op, eps, |v| 1.0 / v)
}

/// Inverse square root with clamping (used by the Petz construction).
pub fn hermitian_inv_sqrt_counted(op: &Operator, eps: f64) -> Result<Floored> {
    floored_spectral(op, eps, |v| 1.0 / v.sqrt())
}

/// Trace distance (1/2) sum |eig(rho - sigma)| between density operators.
pub fn trace_distance(rho: &DensityOperator, sigma: &DensityOperator) -> Result<f64> {
    let diff = rho.operator().sub(sigma.operator())?;
    Ok(0.5 * eigvalsh(&diff).into_iter().map(f64::abs).sum::<f64>())
}

// ---------------------------------------------------------------------------
// Standard operators and states
// ---------------------------------------------------------------------------

/// Position operator.
pub fn q_op(space: &HilbertSpace) -> Operator {
    match space.basis {
        BasisKind::Position { .. } => {
            let q = space.q_points().unwrap();
            let d = space.dim;
            let data = Array2::from_shape_fn((d, d), |(i, j)| {
                if i == j {
                    Complex64::new(q[i], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            });
            Operator { space: space.clone(), data, hermitian: true, positive: false }
        }
        BasisKind::Fock => {
            let s = (space.hbar / (2.0 * space.mass * space.omega)).sqrt();
            let a = annihilation(space);
            let sum = a.add(&a.dagger()).unwrap();
            let mut out = sum.scale(Complex64::new(s, 0.0));
            out.hermitian = true;
            out
        }
    }
}

/// Momentum operator. In the position basis this is the discrete Fourier
/// derivative with the Nyquist mode zeroed.
pub fn p_op(space: &HilbertSpace) -> Operator {
    match space.basis {
        BasisKind::Position { .. } => {
            let d = space.dim;
            let pvals = space.p_values().unwrap();
            // p[j,k] = (1/d) sum_nu p_nu exp(2 pi i nu (j-k) / d); depends on (j-k) mod d.
            let mut kernel = vec![Complex64::new(0.0, 0.0); d];
            for (delta, k) in kernel.iter_mut().enumerate() {
                let mut acc = Complex64::new(0.0, 0.0);
                for (nu, &p) in pvals.iter().enumerate() {
                    let phase = 2.0 * std::f64::consts::PI * (nu * delta) as f64 / d as f64;
                    acc += Complex64::from_polar(p, phase);
                }
                *k = acc / d as f64;
            }
            let data = Array2::from_shape_fn((d, d), |(j, k)| {
                kernel[(j + d - k) % d]
            });
            let mut op = Operator { space: space.clone(), data, hermitian: false, positive: false };
            op.hermitize();
            op
        }
        BasisKind::Fock => {
            let s = (space.hbar * space.mass * space.omega / 2.0).sqrt();
            let a = annihilation(space);
            let diff = a.dagger().sub(&a).unwrap();
            let mut out = diff.scale(Complex64::new(0.0, s));
            out.hermitian = true;
            out
        }
    }
}

/// Annihilation operator a = (q/s + i s p / hbar)/sqrt(2) with
/// s = sqrt(hbar/(m omega)); in the Fock basis it is the lowering ladder.
pub fn annihilation(space: &HilbertSpace) -> Operator {
    match space.basis {
        BasisKind::Fock => {
            let d = space.dim;
            let data = Array2::from_shape_fn((d, d), |(i, j)| {
                if j == i + 1 {
                    Complex64::new((j as f64).sqrt(), 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            });
            Operator { space: space.clone(), data, hermitian: false, positive: false }
        }
        BasisKind::Position { .. } => {
            let s = (space.hbar / (space.mass * space.omega)).sqrt();
            let q = q_op(space);
            let p = p_op(space);
            let qq = q.scale(Complex64::new(1.0 / (s * 2.0f64.sqrt()), 0.0));
            let pp = p.scale(Complex64::new(0.0, s / (space.hbar * 2.0f64.sqrt())));
            qq.add(&pp).unwrap()
        }
    }
}

/// Harmonic oscillator Hamiltonian p^2/(2m) + (1/2) m omega^2 q^2.
pub fn harmonic_hamiltonian(space: &HilbertSpace) -> Operator {
    match space.basis {
        BasisKind::Fock => {
            let d = space.dim;
            let data = Array2::from_shape_fn((d, d), |(i, j)| {
                if i == j {
                    Complex64::new(space.hbar * space.omega * (i as f64 + 0.5), 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            });
            Operator { space: space.clone(), data, hermitian: true, positive: true }
        }
        BasisKind::Position { .. } => {
            let q = q_op(space);
            let p = p_op(space);
            let q2 = q.matmul(&q).unwrap();
            let p2 = p.matmul(&p).unwrap();
            let mut h = p2
                .scale(Complex64::new(1.0 / (2.0 * space.mass), 0.0))
                .add(&q2.scale(Complex64::new(0.5 * space.mass * space.omega * space.omega, 0.0)))
                .unwrap();
            h.hermitize();
            h
        }
    }
}

/// Ground state of the harmonic oscillator as a density operator.
pub fn vacuum_state(space: &HilbertSpace) -> DensityOperator {
    coherent_state(space, 0.0, 0.0)
}

/// Coherent (displaced Gaussian) state centered at (q0, p0).
pub fn coherent_state(space: &HilbertSpace, q0: f64, p0: f64) -> DensityOperator {
    match space.basis {
        BasisKind::Position { .. } => {
            let q = space.q_points().unwrap();
            let s2 = space.hbar / (space.mass * space.omega);
            let d = space.dim;
            let psi: Vec<Complex64> = q
                .iter()
                .map(|&qj| {
                    let amp = (-(qj - q0) * (qj - q0) / (2.0 * s2)).exp();
                    let phase = p0 * (qj - 0.5 * q0) / space.hbar;
                    Complex64::from_polar(amp, phase)
                })
                .collect();
            let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let psi: Vec<Complex64> = psi.into_iter().map(|z| z / norm).collect();
            let data = Array2::from_shape_fn((d, d), |(i, j)| psi[i] * psi[j].conj());
            DensityOperator::new(
                Operator { space: space.clone(), data, hermitian: false, positive: false },
            )
            .expect("coherent state construction")
        }
        BasisKind::Fock => {
            // alpha = (q0/s + i s p0/hbar)/sqrt(2), s = sqrt(hbar/(m omega))
            let s = (space.hbar / (space.mass * space.omega)).sqrt();
            let alpha = Complex64::new(q0 / s, s * p0 / space.hbar) / 2.0f64.sqrt();
            let d = space.dim;
            let mut coef = vec![Complex64::new(0.0, 0.0); d];
            let mut c = Complex64::new((-alpha.norm_sqr() / 2.0).exp(), 0.0);
            for (n, slot) in coef.iter_mut().enumerate() {
                *slot = c;
                c = c * alpha / ((n + 1) as f64).sqrt();
            }
            let norm: f64 = coef.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let coef: Vec<Complex64> = coef.into_iter().map(|z| z / norm).collect();
            let data = Array2::from_shape_fn((d, d), |(i, j)| coef[i] * coef[j].conj());
            DensityOperator::new(
                Operator { space: space.clone(), data, hermitian: false, positive: false },
            )
            .expect("coherent state construction")
        }
    }
}

/// Thermal state gamma ~ exp(-beta H) of the harmonic oscillator.
pub fn thermal_state(space: &HilbertSpace, beta: f64) -> Result<DensityOperator> {
    let h = harmonic_hamiltonian(space);
    // Shift the spectrum before exponentiating to avoid underflow.
    let vals = eigvalsh(&h);
    let emin = vals.into_iter().fold(f64::INFINITY, f64::min);
    let boltz = hermitian_matrix_fn(&h, |e| (-beta * (e - emin)).exp())?;
    DensityOperator::from_unnormalized(boltz)
}

/// Maximally mixed state I/d.
pub fn maximally_mixed(space: &HilbertSpace) -> DensityOperator {
    let d = space.dim;
    DensityOperator::new(Operator::identity(space.clone()).scale(Complex64::new(1.0 / d as f64, 0.0)))
        .expect("maximally mixed state")
}
