//! Python bindings: the Lindblad/Petz solvers, Wigner transforms, and the
//! scenario runner, exposed with flat row-major [re, im, ...] matrix buffers.

use num_complex::Complex64;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use wignerflow::config::parse_config_str;
use wignerflow::kinetic::{integrate_fp, DistributionField, DriftField, FpOptions};
use wignerflow::lindblad::{integrate_forward, IntegrateOptions, LindbladModel};
use wignerflow::operator::{
    annihilation, coherent_state, harmonic_hamiltonian, q_op, thermal_state, trace_distance,
    DensityOperator, HilbertSpace, Operator,
};
use wignerflow::petz::recovery_error;
use wignerflow::phase_space::{
    phase_space_trace, weyl_quantize, wigner_transform, Field, PhaseGrid,
};
use wignerflow::scenario::run_scenario;
use wignerflow::semiclassical::{diffusion_coefficients, drift_coefficients};
use wignerflow::symbols::Poly2;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn flat_to_operator(space: &HilbertSpace, flat: &[f64]) -> PyResult<Operator> {
    let d = space.dim;
    if flat.len() != 2 * d * d {
        return Err(PyValueError::new_err(format!(
            "expected {} floats for a {d}x{d} complex matrix, got {}",
            2 * d * d,
            flat.len()
        )));
    }
    let data = ndarray::Array2::from_shape_fn((d, d), |(i, j)| {
        let k = 2 * (i * d + j);
        Complex64::new(flat[k], flat[k + 1])
    });
    Operator::from_array(space.clone(), data).map_err(err)
}

fn operator_to_flat(op: &Operator) -> Vec<f64> {
    let d = op.dim();
    let mut out = Vec::with_capacity(2 * d * d);
    for i in 0..d {
        for j in 0..d {
            let z = op.data()[[i, j]];
            out.push(z.re);
            out.push(z.im);
        }
    }
    out
}

fn field_to_flat_real(f: &Field) -> Vec<f64> {
    f.data().iter().map(|z| z.re).collect()
}

/// Lindblad solver for the damped harmonic oscillator family.
#[pyclass]
struct LindbladSolver {
    model: LindbladModel,
}

#[pymethods]
impl LindbladSolver {
    /// basis: "fock" or "position"; the position box is [-extent, extent).
    #[new]
    #[pyo3(signature = (dim, kappa, basis="fock", extent=8.0, mass=1.0, omega=1.0, hbar=1.0))]
    fn new(
        dim: usize,
        kappa: f64,
        basis: &str,
        extent: f64,
        mass: f64,
        omega: f64,
        hbar: f64,
    ) -> PyResult<Self> {
        let space = match basis {
            "fock" => HilbertSpace::fock(dim, mass, omega, hbar),
            "position" => HilbertSpace::position(dim, -extent, extent, mass, omega, hbar),
            other => return Err(PyValueError::new_err(format!("unknown basis `{other}`"))),
        }
        .map_err(err)?;
        let h = harmonic_hamiltonian(&space);
        let ls = if kappa > 0.0 {
            vec![annihilation(&space).scale(Complex64::new(kappa.sqrt(), 0.0))]
        } else {
            vec![]
        };
        let model = LindbladModel::new_static(space, h, ls, None).map_err(err)?;
        Ok(Self { model })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.model.space().dim
    }

    /// Coherent state centered at (q0, p0), as a flat density matrix.
    fn coherent_state(&self, q0: f64, p0: f64) -> Vec<f64> {
        operator_to_flat(coherent_state(self.model.space(), q0, p0).operator())
    }

    /// Thermal state at inverse temperature beta.
    fn thermal_state(&self, beta: f64) -> PyResult<Vec<f64>> {
        Ok(operator_to_flat(
            thermal_state(self.model.space(), beta).map_err(err)?.operator(),
        ))
    }

    /// Integrate the master equation; returns (times, [flat rho per time]).
    #[pyo3(signature = (rho0, t_end, dt, stride=usize::MAX))]
    fn evolve(
        &self,
        rho0: Vec<f64>,
        t_end: f64,
        dt: f64,
        stride: usize,
    ) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let op = flat_to_operator(self.model.space(), &rho0)?;
        let rho = DensityOperator::new(op).map_err(err)?;
        let opts = IntegrateOptions { stride, ..Default::default() };
        let traj = integrate_forward(&self.model, &rho, 0.0, t_end, dt, &opts).map_err(err)?;
        Ok((
            traj.times().to_vec(),
            traj.states().iter().map(|s| operator_to_flat(s.operator())).collect(),
        ))
    }

    /// Expectation of the position operator in a state.
    fn mean_q(&self, rho: Vec<f64>) -> PyResult<f64> {
        let op = flat_to_operator(self.model.space(), &rho)?;
        Ok(op.matmul(&q_op(self.model.space())).map_err(err)?.trace().re)
    }

    /// Trace distance between two density matrices.
    fn trace_distance(&self, rho: Vec<f64>, sigma: Vec<f64>) -> PyResult<f64> {
        let a = DensityOperator::new(flat_to_operator(self.model.space(), &rho)?).map_err(err)?;
        let b = DensityOperator::new(flat_to_operator(self.model.space(), &sigma)?).map_err(err)?;
        trace_distance(&a, &b).map_err(err)
    }

    /// Petz-reversal round-trip error for a reference state gamma0.
    fn petz_recovery_error(&self, gamma0: Vec<f64>, t_end: f64, dt: f64) -> PyResult<f64> {
        let gamma =
            DensityOperator::new(flat_to_operator(self.model.space(), &gamma0)?).map_err(err)?;
        recovery_error(&self.model, &gamma, &gamma, t_end, dt).map_err(err)
    }
}

/// Uniform phase-space grid with the Wigner/Weyl transform pair and the
/// classical solvers attached to it.
#[pyclass]
struct PhaseSpace {
    grid: PhaseGrid,
}

#[pymethods]
impl PhaseSpace {
    #[new]
    #[pyo3(signature = (n_q, n_p, l_q, l_p, hbar=1.0))]
    fn new(n_q: usize, n_p: usize, l_q: f64, l_p: f64, hbar: f64) -> PyResult<Self> {
        Ok(Self { grid: PhaseGrid::symmetric(n_q, n_p, l_q, l_p, hbar).map_err(err)? })
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.grid.n_q, self.grid.n_p)
    }

    /// Q-axis nodes.
    fn q_axis(&self) -> Vec<f64> {
        (0..self.grid.n_q).map(|i| self.grid.q_at(i)).collect()
    }

    fn p_axis(&self) -> Vec<f64> {
        (0..self.grid.n_p).map(|j| self.grid.p_at(j)).collect()
    }

    /// Wigner transform of a flat density matrix whose position basis spans
    /// the grid's Q box; returns the real field, row-major over (Q, P).
    fn wigner(&self, rho: Vec<f64>, dim: usize) -> PyResult<Vec<f64>> {
        let space = HilbertSpace::position(
            dim,
            self.grid.q_min,
            self.grid.q_max,
            1.0,
            1.0,
            self.grid.hbar,
        )
        .map_err(err)?;
        let op = flat_to_operator(&space, &rho)?;
        let w = wigner_transform(&op, &self.grid).map_err(err)?;
        Ok(field_to_flat_real(&w))
    }

    /// Weyl quantization of a real field back to a dim x dim operator.
    fn weyl(&self, field: Vec<f64>, dim: usize) -> PyResult<Vec<f64>> {
        let f = self.to_field(&field)?;
        let space = HilbertSpace::position(
            dim,
            self.grid.q_min,
            self.grid.q_max,
            1.0,
            1.0,
            self.grid.hbar,
        )
        .map_err(err)?;
        Ok(operator_to_flat(&weyl_quantize(&f, &space).map_err(err)?))
    }

    /// Phase-space trace of a real field: integral / (2 pi hbar).
    fn trace(&self, field: Vec<f64>) -> PyResult<f64> {
        Ok(phase_space_trace(&self.to_field(&field)?).re)
    }

    /// Drift and diffusion fields of the damped oscillator on this grid:
    /// returns (f_q, f_p, g_qq, g_qp, g_pp), each flat row-major.
    #[pyo3(signature = (kappa, hbar=1.0, mass=1.0, omega=1.0))]
    fn damped_ho_coefficients(
        &self,
        kappa: f64,
        hbar: f64,
        mass: f64,
        omega: f64,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let sm = (mass * omega).sqrt();
        let h = Poly2::p()
            .mul(&Poly2::p())
            .scale(Complex64::new(0.5 / mass, 0.0))
            .add(
                &Poly2::q()
                    .mul(&Poly2::q())
                    .scale(Complex64::new(0.5 * mass * omega * omega, 0.0)),
            );
        let ell = Poly2::q()
            .scale(Complex64::new(sm, 0.0))
            .add(&Poly2::p().scale(Complex64::new(0.0, 1.0 / sm)))
            .scale(Complex64::new((kappa / 2.0).sqrt(), 0.0));
        let f = drift_coefficients(&h, &[ell.clone()], hbar, &self.grid);
        let g = diffusion_coefficients(&[ell], hbar, &self.grid);
        (
            field_to_flat_real(&f[0]),
            field_to_flat_real(&f[1]),
            field_to_flat_real(&g[0][0]),
            field_to_flat_real(&g[0][1]),
            field_to_flat_real(&g[1][1]),
        )
    }

    /// Integrate the Fokker-Planck equation with static drift/diffusion
    /// fields (flat row-major); returns the final density, flat.
    #[allow(clippy::too_many_arguments)]
    fn fokker_planck(
        &self,
        p0: Vec<f64>,
        f_q: Vec<f64>,
        f_p: Vec<f64>,
        g_qq: Vec<f64>,
        g_qp: Vec<f64>,
        g_pp: Vec<f64>,
        t_end: f64,
        dt: f64,
    ) -> PyResult<Vec<f64>> {
        let p0 = DistributionField::from_unnormalized(self.to_field(&p0)?).map_err(err)?;
        let drift = DriftField::Static([self.to_field(&f_q)?, self.to_field(&f_p)?]);
        let g01 = self.to_field(&g_qp)?;
        let g = [
            [self.to_field(&g_qq)?, g01.clone()],
            [g01, self.to_field(&g_pp)?],
        ];
        let sol =
            integrate_fp(&drift, &g, &p0, 0.0, t_end, dt, &FpOptions::default()).map_err(err)?;
        Ok(field_to_flat_real(sol.last().field()))
    }
}

impl PhaseSpace {
    fn to_field(&self, flat: &[f64]) -> PyResult<Field> {
        if flat.len() != self.grid.n_q * self.grid.n_p {
            return Err(PyValueError::new_err(format!(
                "field length {} does not match the {}x{} grid",
                flat.len(),
                self.grid.n_q,
                self.grid.n_p
            )));
        }
        let data = ndarray::Array2::from_shape_fn((self.grid.n_q, self.grid.n_p), |(i, j)| {
            Complex64::new(flat[i * self.grid.n_p + j], 0.0)
        });
        Field::from_data(self.grid.clone(), data).map_err(err)
    }
}

/// Run a scenario pipeline from a TOML configuration string; returns the run
/// manifest as a JSON string.
#[pyfunction]
fn run_scenario_toml(config_text: &str, out_dir: &str) -> PyResult<String> {
    let cfg = parse_config_str(config_text).map_err(err)?;
    let manifest = run_scenario(&cfg, std::path::Path::new(out_dir)).map_err(err)?;
    serde_json::to_string_pretty(&manifest).map_err(err)
}

#[pymodule]
fn wignerflow_py(_py: Python<'_>, m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<LindbladSolver>()?;
    m.add_class::<PhaseSpace>()?;
    m.add_function(wrap_pyfunction!(run_scenario_toml, m)?)?;
    Ok(())
}
