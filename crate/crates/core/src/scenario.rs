//! Scenario registry and experiment drivers: forward Lindblad runs, Petz
//! reversal, Fokker-Planck and reverse-SDE round trips, hbar sweeps, and the
//! four-arrow correspondence report, all with reproducible file outputs and
//! a JSON run manifest.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use num_complex::Complex64;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ScenarioConfig;
use crate::error::{ConfigError, CoreError, Result};
use crate::kinetic::{
    bayes_transition_check, density_estimate, gaussian_ensemble, integrate_fp,
    integrate_reverse_fp, noise_factor, reverse_sde, sample_distribution, Bandwidth,
    BayesCheckOptions, DistributionField, DriftField, FpOptions, FpSolution, SdeModel,
};
use crate::lindblad::{integrate_forward, IntegrateOptions, LindbladModel};
use crate::operator::{
    annihilation, coherent_state, harmonic_hamiltonian, p_op, q_op, thermal_state, trace_distance,
    HilbertSpace, Operator,
};
use crate::petz::{build_reference, default_reference_floor, integrate_reversed, ReversedModel};
use crate::phase_space::{phase_space_trace, wigner_transform, Field, PhaseGrid};
use crate::phase_space::DiffMode;
use crate::semiclassical::{
    diffusion_coefficients, drift_coefficients, fp_rhs, lindblad_wigner_rhs, psd_min_eigenvalue,
    reverse_drift, two_route_reverse_drift_residual,
};
use crate::symbols::{ModelSymbols, Poly2};

// ---------------------------------------------------------------------------
// Scenario registry
// ---------------------------------------------------------------------------

/// Shipped scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Quadratic Hamiltonian, linear damping channel: exact reduction.
    DampedHarmonicOscillator,
    /// Quartic Hamiltonian perturbation plus a two-photon channel:
    /// O(hbar^2) scaling studies.
    QuarticKerrPerturbation,
    /// Classical Ornstein-Uhlenbeck process: pure kinetic-solver checks.
    OuClassical,
    /// L = 0 degenerate case.
    UnitaryOnly,
}

impl Scenario {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "damped-harmonic-oscillator" => Ok(Self::DampedHarmonicOscillator),
            "quartic-kerr-perturbation" => Ok(Self::QuarticKerrPerturbation),
            "ou-classical" => Ok(Self::OuClassical),
            "unitary-only" => Ok(Self::UnitaryOnly),
            other => Err(CoreError::Config(ConfigError::UnknownScenario(other.into()))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::DampedHarmonicOscillator => "damped-harmonic-oscillator",
            Self::QuarticKerrPerturbation => "quartic-kerr-perturbation",
            Self::OuClassical => "ou-classical",
            Self::UnitaryOnly => "unitary-only",
        }
    }

    pub fn default_pipeline(&self) -> Pipeline {
        match self {
            Self::DampedHarmonicOscillator => Pipeline::CorrespondenceReport,
            Self::QuarticKerrPerturbation => Pipeline::HbarSweep,
            Self::OuClassical => Pipeline::ReverseSde,
            Self::UnitaryOnly => Pipeline::CorrespondenceReport,
        }
    }

    /// Phase-space symbols (hbar-free polynomials); None for the classical
    /// scenario.
    pub fn symbols(&self, cfg: &ScenarioConfig) -> Option<ModelSymbols> {
        let p = &cfg.physics;
        let sm = (p.mass * p.omega).sqrt();
        // H = P^2/(2m) + m omega^2 Q^2 / 2
        let h_quad = Poly2::p()
            .mul(&Poly2::p())
            .scale(Complex64::new(0.5 / p.mass, 0.0))
            .add(
                &Poly2::q()
                    .mul(&Poly2::q())
                    .scale(Complex64::new(0.5 * p.mass * p.omega * p.omega, 0.0)),
            );
        // l_1 = sqrt(kappa) (sm Q + i P / sm) / sqrt(2)
        let linear = Poly2::q()
            .scale(Complex64::new(sm, 0.0))
            .add(&Poly2::p().scale(Complex64::new(0.0, 1.0 / sm)));
        let ell_damp = linear.scale(Complex64::new((p.kappa / 2.0).sqrt(), 0.0));
        match self {
            Self::DampedHarmonicOscillator => {
                Some(ModelSymbols::new(h_quad, vec![ell_damp]))
            }
            Self::QuarticKerrPerturbation => {
                let h = h_quad.add(
                    &Poly2::q()
                        .mul(&Poly2::q())
                        .mul(&Poly2::q())
                        .mul(&Poly2::q())
                        .scale(Complex64::new(p.lambda_quartic, 0.0)),
                );
                // two-photon channel: l_2 = mu (sm Q + i P/sm)^2 / 2
                let ell_two = linear
                    .mul(&linear)
                    .scale(Complex64::new(p.two_photon / 2.0, 0.0));
                Some(ModelSymbols::new(h, vec![ell_damp, ell_two]))
            }
            Self::UnitaryOnly => Some(ModelSymbols::new(h_quad, vec![])),
            Self::OuClassical => None,
        }
    }

    /// Quantum model on a position-basis space (for Wigner-level runs).
    pub fn quantum_model(&self, cfg: &ScenarioConfig) -> Result<LindbladModel> {
        let p = &cfg.physics;
        let space = HilbertSpace::position(
            cfg.hilbert.dim,
            -cfg.grid.l_q,
            cfg.grid.l_q,
            p.mass,
            p.omega,
            p.hbar,
        )?;
        self.model_on(cfg, space)
    }

    /// Quantum model on a truncated Fock space (for the Petz reversal).
    pub fn fock_model(&self, cfg: &ScenarioConfig) -> Result<LindbladModel> {
        let p = &cfg.physics;
        let space = HilbertSpace::fock(cfg.hilbert.petz_dim, p.mass, p.omega, p.hbar)?;
        self.model_on(cfg, space)
    }

    fn model_on(&self, cfg: &ScenarioConfig, space: HilbertSpace) -> Result<LindbladModel> {
        let p = &cfg.physics;
        let symbols = self.symbols(cfg).ok_or_else(|| {
            CoreError::Config(ConfigError::Constraint(format!(
                "scenario {} has no quantum model",
                self.name()
            )))
        })?;
        let h = match self {
            Self::QuarticKerrPerturbation => {
                let q = q_op(&space);
                let q2 = q.matmul(&q)?;
                let q4 = q2.matmul(&q2)?;
                let mut h = harmonic_hamiltonian(&space)
                    .add(&q4.scale(Complex64::new(p.lambda_quartic, 0.0)))?;
                h.hermitize();
                h
            }
            _ => harmonic_hamiltonian(&space),
        };
        let mut ls: Vec<Operator> = Vec::new();
        if p.kappa > 0.0 && !matches!(self, Self::UnitaryOnly) {
            ls.push(annihilation(&space).scale(Complex64::new(p.kappa.sqrt(), 0.0)));
        }
        if matches!(self, Self::QuarticKerrPerturbation) && p.two_photon > 0.0 {
            // Weyl quantization of l_2 / sqrt(hbar): powers of one linear
            // form quantize exactly
            let sm = (p.mass * p.omega).sqrt();
            let a_lin = q_op(&space)
                .scale(Complex64::new(sm, 0.0))
                .add(&p_op(&space).scale(Complex64::new(0.0, 1.0 / sm)))?;
            let sq = a_lin.matmul(&a_lin)?;
            ls.push(sq.scale(Complex64::new(p.two_photon / (2.0 * p.hbar.sqrt()), 0.0)));
        }
        let keep = match self {
            Self::UnitaryOnly => vec![],
            _ => ls,
        };
        let symbols = match self {
            // symbol list must match the operator list when kappa = 0
            Self::DampedHarmonicOscillator if p.kappa == 0.0 => {
                ModelSymbols::new(symbols.hamiltonian, vec![])
            }
            _ => symbols,
        };
        LindbladModel::new_static(space, h, keep, Some(symbols))
    }

    /// Classical drift and diffusion fields on a grid.
    pub fn classical_fields(
        &self,
        cfg: &ScenarioConfig,
        grid: &PhaseGrid,
    ) -> Result<([Field; 2], [[Field; 2]; 2])> {
        match self {
            Self::OuClassical => {
                let k = cfg.physics.kappa;
                let f = [
                    Field::from_real_fn(grid.clone(), move |q, _| -k * q),
                    Field::from_real_fn(grid.clone(), move |_, p| -k * p),
                ];
                let one = Field::from_real_fn(grid.clone(), |_, _| 1.0);
                let zero = Field::zeros(grid.clone());
                Ok((f, [[one.clone(), zero.clone()], [zero, one]]))
            }
            _ => {
                let symbols = self.symbols(cfg).expect("quantum scenarios have symbols");
                let hbar = cfg.physics.hbar;
                let f = drift_coefficients(&symbols.hamiltonian, &symbols.lindblad, hbar, grid);
                let g = diffusion_coefficients(&symbols.lindblad, hbar, grid);
                Ok((f, g))
            }
        }
    }

    /// SDE closures matching the classical fields.
    pub fn sde_model(&self, cfg: &ScenarioConfig) -> Result<SdeModel> {
        match self {
            Self::OuClassical => {
                let k = cfg.physics.kappa;
                Ok(SdeModel::new(
                    move |x, _| [-k * x[0], -k * x[1]],
                    |_, _| [[1.0, 0.0], [0.0, 1.0]],
                ))
            }
            _ => {
                let symbols = self.symbols(cfg).ok_or_else(|| {
                    CoreError::Config(ConfigError::Constraint(
                        "scenario has no SDE form".into(),
                    ))
                })?;
                let hbar = cfg.physics.hbar;
                let grid = PhaseGrid::symmetric(4, 4, 1.0, 1.0, hbar)?;
                let _ = grid;
                let fq = drift_poly_for(&symbols, hbar, 0);
                let fp = drift_poly_for(&symbols, hbar, 1);
                let gp = diffusion_polys_for(&symbols, hbar);
                Ok(SdeModel::new(
                    move |x, _| {
                        [fq.eval(x[0], x[1]).re, fp.eval(x[0], x[1]).re]
                    },
                    move |x, _| {
                        sym_sqrt_2x2(
                            gp[0].eval(x[0], x[1]).re,
                            gp[1].eval(x[0], x[1]).re,
                            gp[2].eval(x[0], x[1]).re,
                        )
                    },
                ))
            }
        }
    }

    /// Log-density of the stationary Gaussian reference (quantum scenarios).
    pub fn log_w_reference(&self, cfg: &ScenarioConfig) -> Poly2 {
        let p = &cfg.physics;
        let sm = p.mass * p.omega;
        // vacuum Wigner: W ~ exp(-(m w Q^2 + P^2/(m w))/hbar)
        Poly2::q()
            .mul(&Poly2::q())
            .scale(Complex64::new(-sm / p.hbar, 0.0))
            .add(
                &Poly2::p()
                    .mul(&Poly2::p())
                    .scale(Complex64::new(-1.0 / (sm * p.hbar), 0.0)),
            )
    }
}

fn drift_poly_for(symbols: &ModelSymbols, hbar: f64, mu: usize) -> Poly2 {
    // mirror of the semiclassical drift assembly, kept as closed-form polys
    let omega_sign = if mu == 0 { 1.0 } else { -1.0 };
    let nu = 1 - mu;
    let mut term = symbols.hamiltonian.deriv(nu);
    for ell in &symbols.lindblad {
        let dstar = ell.conj().deriv(nu);
        term = term
            .add(&ell.mul(&dstar).im_part())
            .sub(&ell.poisson(&dstar).re_part().scale(Complex64::new(0.5 * hbar, 0.0)));
    }
    term.scale(Complex64::new(omega_sign, 0.0))
}

/// (G_QQ, G_QP, G_PP) polynomials.
fn diffusion_polys_for(symbols: &ModelSymbols, hbar: f64) -> [Poly2; 3] {
    let mut out = [Poly2::zero(), Poly2::zero(), Poly2::zero()];
    for ell in &symbols.lindblad {
        let dq = ell.dq();
        let dp = ell.dp();
        let dq_c = ell.conj().dq();
        let dp_c = ell.conj().dp();
        out[0] = out[0].add(&dp.mul(&dp_c).re_part().scale(Complex64::new(hbar, 0.0)));
        out[1] = out[1].add(&dp.mul(&dq_c).re_part().scale(Complex64::new(-hbar, 0.0)));
        out[2] = out[2].add(&dq.mul(&dq_c).re_part().scale(Complex64::new(hbar, 0.0)));
    }
    out
}

/// Symmetric PSD square root of [[a, b], [b, c]] (negative parts clamped).
fn sym_sqrt_2x2(a: f64, b: f64, c: f64) -> [[f64; 2]; 2] {
    let m = 0.5 * (a + c);
    let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (slo, shi) = ((m - r).max(0.0).sqrt(), (m + r).max(0.0).sqrt());
    if r < 1e-300 {
        return [[shi, 0.0], [0.0, shi]];
    }
    let (vx, vy) = if b.abs() > 1e-300 {
        let n = (b * b + (m + r - a) * (m + r - a)).sqrt();
        (b / n, (m + r - a) / n)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    [
        [shi * vx * vx + slo * vy * vy, (shi - slo) * vx * vy],
        [(shi - slo) * vx * vy, shi * vy * vy + slo * vx * vx],
    ]
}

// ---------------------------------------------------------------------------
// Pipelines, metrics, manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    ForwardLindblad,
    PetzReverse,
    FokkerPlanck,
    ReverseSde,
    HbarSweep,
    CorrespondenceReport,
    ValidateConfig,
}

impl Pipeline {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "forward-lindblad" => Ok(Self::ForwardLindblad),
            "petz-reverse" => Ok(Self::PetzReverse),
            "fokker-planck" => Ok(Self::FokkerPlanck),
            "reverse-sde" => Ok(Self::ReverseSde),
            "hbar-sweep" => Ok(Self::HbarSweep),
            "correspondence-report" => Ok(Self::CorrespondenceReport),
            "validate-config" => Ok(Self::ValidateConfig),
            other => Err(CoreError::Config(ConfigError::UnknownPipeline(other.into()))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ForwardLindblad => "forward-lindblad",
            Self::PetzReverse => "petz-reverse",
            Self::FokkerPlanck => "fokker-planck",
            Self::ReverseSde => "reverse-sde",
            Self::HbarSweep => "hbar-sweep",
            Self::CorrespondenceReport => "correspondence-report",
            Self::ValidateConfig => "validate-config",
        }
    }
}

/// One pass/fail row of a run.
#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub name: String,
    pub value: f64,
    /// human-readable bound, e.g. "<= 1e-6" or "2.0 +- 0.3"
    pub threshold: String,
    pub pass: bool,
}

impl MetricRow {
    fn upper(name: &str, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold: format!("<= {bound:.3e}"),
            pass: value <= bound,
        }
    }

    fn lower(name: &str, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold: format!(">= {bound:.3e}"),
            pass: value >= bound,
        }
    }

    fn window(name: &str, value: f64, target: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold: format!("{target} +- {tol}"),
            pass: (value - target).abs() <= tol,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct EventCounts {
    pub eigenvalue_clamps: usize,
    pub score_floor_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub scenario: String,
    pub pipeline: String,
    pub code_version: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub config: ScenarioConfig,
    pub files: Vec<FileRecord>,
    pub events: EventCounts,
    pub metrics: Vec<MetricRow>,
    /// "ok", "threshold-failure", or "numerical-error"
    pub status: String,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn all_pass(&self) -> bool {
        self.metrics.iter().all(|m| m.pass)
    }
}

struct RunContext<'a> {
    cfg: &'a ScenarioConfig,
    out_dir: &'a Path,
    files: Vec<FileRecord>,
    metrics: Vec<MetricRow>,
    events: EventCounts,
}

impl<'a> RunContext<'a> {
    fn record_file(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let digest = Sha256::digest(&bytes);
        let digest_hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        let rel = path
            .strip_prefix(self.out_dir)
            .unwrap_or(path)
            .display()
            .to_string();
        self.files.push(FileRecord {
            path: rel,
            sha256: digest_hex,
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn write_text(&mut self, name: &str, content: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, content).map_err(|e| CoreError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.record_file(&path)?;
        Ok(path)
    }

    fn write_field(&mut self, name: &str, field: &Field) -> Result<()> {
        let base = self.out_dir.join(name);
        for path in field.write(&base)? {
            self.record_file(&path)?;
        }
        Ok(())
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn fitted_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.max(1e-300).ln()).collect();
    let n = lx.len() as f64;
    let xm = lx.iter().sum::<f64>() / n;
    let ym = ly.iter().sum::<f64>() / n;
    lx.iter().zip(&ly).map(|(x, y)| (x - xm) * (y - ym)).sum::<f64>()
        / lx.iter().map(|x| (x - xm) * (x - xm)).sum::<f64>()
}

/// Execute the configured pipeline, writing outputs and a manifest into
/// `out_dir`. A manifest is written even when the pipeline fails.
pub fn run_scenario(cfg: &ScenarioConfig, out_dir: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let scenario = Scenario::from_name(&cfg.scenario)?;
    let pipeline = if cfg.pipeline.is_empty() {
        scenario.default_pipeline()
    } else {
        Pipeline::from_name(&cfg.pipeline)?
    };
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;

    let started = unix_now();
    let mut ctx = RunContext {
        cfg,
        out_dir,
        files: Vec::new(),
        metrics: Vec::new(),
        events: EventCounts::default(),
    };
    let outcome = match pipeline {
        Pipeline::ValidateConfig => Ok(()),
        Pipeline::ForwardLindblad => forward_lindblad_driver(scenario, &mut ctx),
        Pipeline::PetzReverse => petz_reverse_driver(scenario, &mut ctx),
        Pipeline::FokkerPlanck => fokker_planck_driver(scenario, &mut ctx),
        Pipeline::ReverseSde => reverse_sde_driver(scenario, &mut ctx),
        Pipeline::HbarSweep => hbar_sweep_driver(scenario, &mut ctx),
        Pipeline::CorrespondenceReport => correspondence_driver(scenario, &mut ctx),
    };

    let (status, error) = match &outcome {
        Ok(()) if ctx.metrics.iter().all(|m| m.pass) => ("ok".to_string(), None),
        Ok(()) => ("threshold-failure".to_string(), None),
        Err(e) => ("numerical-error".to_string(), Some(e.to_string())),
    };
    let manifest = RunManifest {
        scenario: scenario.name().into(),
        pipeline: pipeline.name().into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.ensemble.seed,
        started_unix: started,
        finished_unix: unix_now(),
        config: cfg.clone(),
        files: ctx.files.clone(),
        events: ctx.events.clone(),
        metrics: ctx.metrics.clone(),
        status,
        error,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, json).map_err(|e| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Drivers
// ---------------------------------------------------------------------------

fn forward_lindblad_driver(scenario: Scenario, ctx: &mut RunContext) -> Result<()> {
    let cfg = ctx.cfg;
    let model = scenario.quantum_model(cfg)?;
    let space = model.space().clone();
    let rho0 = coherent_state(&space, cfg.initial.q0, cfg.initial.p0);
    let opts = IntegrateOptions { stride: cfg.time.stride, ..Default::default() };
    let traj = integrate_forward(&model, &rho0, 0.0, cfg.time.t_end, cfg.time.dt, &opts)?;

    let q = q_op(&space);
    let p = p_op(&space);
    let mut csv = String::from("t,trace,mean_q,mean_p,purity\n");
    let mut max_trace_dev = 0.0f64;
    for (t, rho) in traj.times().iter().zip(traj.states()) {
        let tr = rho.operator().trace().re;
        max_trace_dev = max_trace_dev.max((tr - 1.0).abs());
        let mq = rho.operator().matmul(&q)?.trace().re;
        let mp = rho.operator().matmul(&p)?.trace().re;
        let purity = rho.operator().matmul(rho.operator())?.trace().re;
        csv.push_str(&format!("{t},{tr},{mq},{mp},{purity}\n"));
    }
    ctx.write_text("expectations.csv", &csv)?;

    let grid = PhaseGrid::new(
        cfg.grid.n_q,
        cfg.grid.n_p,
        -cfg.grid.l_q,
        cfg.grid.l_q,
        -cfg.grid.l_p,
        cfg.grid.l_p,
        cfg.physics.hbar,
    )?;
    let w = wigner_transform(traj.last().operator(), &grid)?;
    ctx.write_field("wigner_final", &w)?;

    let tol = &cfg.tolerances;
    ctx.metrics.push(MetricRow::upper(
        "lindblad_trace_drift_per_unit_time",
        max_trace_dev / cfg.time.t_end,
        tol.trace_drift,
    ));
    let reality = w.max_abs_imag() / w.max_abs_real().max(f64::MIN_POSITIVE);
    ctx.metrics.push(MetricRow::upper("wigner_reality", reality, tol.wigner_reality));
    let ps_trace = phase_space_trace(&w).re;
    ctx.metrics.push(MetricRow::upper(
        "wigner_trace_deviation",
        (ps_trace - 1.0).abs(),
        1e-6,
    ));
    Ok(())
}

fn petz_reverse_driver(scenario: Scenario, ctx: &mut RunContext) -> Result<()> {
    let cfg = ctx.cfg;
    let model = scenario.fock_model(cfg)?;
    let gamma0 = thermal_state(model.space(), cfg.physics.beta)?;
    let t_end = cfg.time.petz_t_end;
    let dts = [4.0 * cfg.time.petz_dt, 2.0 * cfg.time.petz_dt, cfg.time.petz_dt];

    let mut errors = Vec::new();
    let mut csv = String::from("dt,recovery_trace_distance\n");
    for &dt in &dts {
        let eps = default_reference_floor(&gamma0);
        let reference =
            std::sync::Arc::new(build_reference(&model, &gamma0, 0.0, t_end, dt, eps)?);
        ctx.events.eigenvalue_clamps += reference.clamp_events;
        let reversed = ReversedModel::new(model.clone(), reference.clone());
        let rho_t = reference.gamma(reference.len() - 1).clone();
        let back = integrate_reversed(
            &reversed,
            &rho_t,
            t_end,
            0.0,
            dt,
            &IntegrateOptions { stride: usize::MAX, check_positivity: false, ..Default::default() },
        )?;
        let err = trace_distance(&gamma0, back.last())?;
        csv.push_str(&format!("{dt},{err}\n"));
        errors.push(err);
    }
    ctx.write_text("recovery.csv", &csv)?;

    let tol = &cfg.tolerances;
    ctx.metrics.push(MetricRow::upper(
        "petz_recovery_trace_distance",
        *errors.last().unwrap(),
        tol.petz_recovery,
    ));
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    let order = fitted_slope(&dts, &errors);
    ctx.metrics.push(MetricRow::lower(
        "petz_convergence_order",
        if monotone { order } else { -1.0 },
        tol.petz_order_min,
    ));
    Ok(())
}

fn auto_fp_dt(grid: &PhaseGrid, drift: &DriftField, g: &[[Field; 2]; 2], requested: f64) -> f64 {
    if requested > 0.0 {
        return requested;
    }
    let dx = grid.dq().min(grid.dp());
    let max_g = g
        .iter()
        .flat_map(|r| r.iter())
        .map(|f| f.max_abs())
        .fold(0.0f64, f64::max);
    let max_f = match drift {
        DriftField::Static(f) => f[0].max_abs().max(f[1].max_abs()),
        DriftField::Series(s) => s
            .iter()
            .map(|(_, f)| f[0].max_abs().max(f[1].max_abs()))
            .fold(0.0, f64::max),
    };
    let mut dt = f64::INFINITY;
    if max_g > 0.0 {
        dt = dt.min(0.4 * dx * dx / max_g);
    }
    if max_f > 0.0 {
        dt = dt.min(0.4 * dx / max_f);
    }
    if !dt.is_finite() {
        dt = 1e-3;
    }
    dt
}

fn scenario_grid(cfg: &ScenarioConfig) -> Result<PhaseGrid> {
    PhaseGrid::new(
        cfg.grid.n_q,
        cfg.grid.n_p,
        -cfg.grid.l_q,
        cfg.grid.l_q,
        -cfg.grid.l_p,
        cfg.grid.l_p,
        cfg.physics.hbar,
    )
}

/// Turn a Wigner function into a classical density: tiny negative ripples
/// from the finite-box transform are clamped to zero before normalizing.
fn density_from_wigner(w: &Field, hbar: f64) -> Result<DistributionField> {
    let two_pi_hbar = 2.0 * std::f64::consts::PI * hbar;
    let clamped = Field::from_data(
        w.grid().clone(),
        w.data().mapv(|z| Complex64::new(z.re.max(0.0) / two_pi_hbar, 0.0)),
    )?;
    DistributionField::from_unnormalized(clamped)
}

fn initial_density(cfg: &ScenarioConfig, grid: &PhaseGrid) -> Result<DistributionField> {
    let (q0, p0) = (cfg.initial.q0, cfg.initial.p0);
    let var = cfg.initial_var();
    let f = Field::from_real_fn(grid.clone(), move |q, p| {
        (-((q - q0) * (q - q0) + (p - p0) * (p - p0)) / (2.0 * var)).exp()
    });
    DistributionField::from_unnormalized(f)
}

fn fokker_planck_driver(scenario: Scenario, ctx: &mut RunContext) -> Result<()> {
    let cfg = ctx.cfg;
    let grid = scenario_grid(cfg)?;
    let (f, g) = scenario.classical_fields(cfg, &grid)?;
    let p0 = initial_density(cfg, &grid)?;
    let drift = DriftField::Static(f);
    let dt = auto_fp_dt(&grid, &drift, &g, cfg.time.fp_dt);
    let opts = FpOptions {
        stride: cfg.time.stride,
        negativity_tol: -cfg.tolerances.fp_negativity,
        ..Default::default()
    };
    let sol = integrate_fp(&drift, &g, &p0, 0.0, cfg.time.fp_t_end, dt, &opts)?;

    let mut csv = String::from("t,mass,min_value,mean_q,mean_p,var_q,var_p\n");
    for (t, snap) in sol.times.iter().zip(&sol.snapshots) {
        let (mean, var) = snap.moments();
        csv.push_str(&format!(
            "{t},{},{},{},{},{},{}\n",
            snap.mass,
            snap.min_value(),
            mean[0],
            mean[1],
            var[0],
            var[1]
        ));
    }
    ctx.write_text("moments.csv", &csv)?;
    ctx.write_field("density_final", sol.last().field())?;

    let tol = &cfg.tolerances;
    ctx.metrics.push(MetricRow::upper(
        "fp_mass_drift_per_unit_time",
        sol.mass_drift / cfg.time.fp_t_end,
        tol.mass_drift,
    ));
    ctx.metrics.push(MetricRow::lower("fp_min_value", sol.min_value, tol.fp_negativity));
    ctx.metrics.push(MetricRow::lower(
        "diffusion_min_eigenvalue",
        psd_min_eigenvalue(&g)?,
        tol.psd_floor,
    ));
    Ok(())
}

/// Forward FP run storing enough snapshots for the reversed drift series.
fn forward_with_reversal_series(
    cfg: &ScenarioConfig,
    f: &[Field; 2],
    g: &[[Field; 2]; 2],
    p0: &DistributionField,
    t_end: f64,
) -> Result<(FpSolution, Vec<(f64, [Field; 2])>, f64)> {
    let grid = p0.grid().clone();
    let drift = DriftField::Static(f.clone());
    let dt = auto_fp_dt(&grid, &drift, g, cfg.time.fp_dt);
    let n_steps = ((t_end / dt).ceil() as usize).max(1);
    let snapshots_wanted = 64usize;
    let stride = (n_steps / snapshots_wanted).max(1);
    let opts = FpOptions {
        stride,
        negativity_tol: -cfg.tolerances.fp_negativity,
        ..Default::default()
    };
    let forward = integrate_fp(&drift, g, p0, 0.0, t_end, dt, &opts)?;
    let delta = cfg.tolerances.reverse_floor;
    let series: Vec<(f64, [Field; 2])> = forward
        .times
        .iter()
        .zip(&forward.snapshots)
        .map(|(t, p)| Ok((*t, reverse_drift(f, g, p.field(), delta)?)))
        .collect::<Result<_>>()?;
    Ok((forward, series, dt))
}

fn reverse_sde_driver(scenario: Scenario, ctx: &mut RunContext) -> Result<()> {
    let cfg = ctx.cfg;
    let grid = scenario_grid(cfg)?;
    let (f, g) = scenario.classical_fields(cfg, &grid)?;
    let p0 = initial_density(cfg, &grid)?;
    let t_end = cfg.time.fp_t_end;
    let (forward, series, dt) = forward_with_reversal_series(cfg, &f, &g, &p0, t_end)?;

    // PDE round trip
    let back = integrate_reverse_fp(
        &DriftField::Series(series.clone()),
        &g,
        forward.last(),
        t_end,
        0.0,
        dt,
        &FpOptions { negativity_tol: -cfg.tolerances.fp_negativity, ..Default::default() },
    )?;
    let l1_fp = back.last().l1_distance(&p0)?;

    // ensemble round trip
    let seed = cfg.ensemble.seed;
    let terminal = sample_distribution(forward.last(), cfg.ensemble.particles, seed)?;
    let noise = noise_factor(&g)?;
    let reversed = reverse_sde(
        &DriftField::Series(series),
        &noise,
        &terminal,
        t_end,
        0.0,
        cfg.ensemble.sde_dt,
        usize::MAX,
    )?;
    let final_ensemble = reversed.last().expect("reverse SDE returns snapshots");
    let kde = density_estimate(final_ensemble, &grid, Bandwidth::Auto)?;
    let l1_sde = kde.l1_distance(&p0)?;

    let mut csv = String::from("metric,value\n");
    csv.push_str(&format!("fp_round_trip_l1,{l1_fp}\n"));
    csv.push_str(&format!("sde_round_trip_l1,{l1_sde}\n"));

    let mut ens_csv = String::from("particle,q,p\n");
    for (i, x) in final_ensemble.positions.iter().enumerate() {
        ens_csv.push_str(&format!("{i},{},{}\n", x[0], x[1]));
    }
    ctx.write_text("ensemble_final.csv", &ens_csv)?;

    let tol = &cfg.tolerances;
    ctx.metrics
        .push(MetricRow::upper("fp_round_trip_l1", l1_fp, tol.fp_round_trip_l1));
    ctx.metrics
        .push(MetricRow::upper("sde_round_trip_l1", l1_sde, tol.sde_round_trip_l1));

    // Bayes identity check (needs noise; bayes_particles = 0 skips it)
    let has_noise = g.iter().flat_map(|r| r.iter()).any(|field| field.max_abs() > 0.0);
    if has_noise && cfg.ensemble.bayes_particles > 0 {
        let model = scenario.sde_model(cfg)?;
        model.validate_noise(&g, 0.0, 1e-10)?;
        let std = cfg.initial_var().sqrt();
        let init = gaussian_ensemble(
            cfg.ensemble.bayes_particles,
            [0.0, 0.0],
            [std, std],
            seed,
        )?;
        let report = bayes_transition_check(
            &model,
            &init,
            cfg.ensemble.sde_dt,
            cfg.ensemble.bayes_horizon,
            &BayesCheckOptions {
                bins: cfg.ensemble.bayes_bins,
                q_range: (-cfg.ensemble.bayes_box, cfg.ensemble.bayes_box),
                p_range: (-cfg.ensemble.bayes_box, cfg.ensemble.bayes_box),
                min_count: 100,
            },
        )?;
        csv.push_str(&format!("bayes_max_relative_violation,{}\n", report.max_relative_violation));
        csv.push_str(&format!("bayes_qualifying_bins,{}\n", report.qualifying_bins));
        ctx.metrics.push(MetricRow::upper(
            "bayes_max_relative_violation",
            report.max_relative_violation,
            tol.bayes_violation,
        ));
    }
    ctx.write_text("round_trip.csv", &csv)?;
    Ok(())
}

fn hbar_sweep_driver(scenario: Scenario, ctx: &mut RunContext) -> Result<()> {
    let cfg = ctx.cfg;
    let hbars = &cfg.sweep.hbars;
    if hbars.len() < 3 {
        return Err(CoreError::InsufficientSweep(hbars.len()));
    }
    for (i, a) in hbars.iter().enumerate() {
        for b in &hbars[i + 1..] {
            if (a - b).abs() < 1e-15 {
                return Err(CoreError::DuplicateSweepValue(*a));
            }
        }
    }
    let symbols = scenario.symbols(cfg).ok_or_else(|| {
        CoreError::Config(ConfigError::Constraint(format!(
            "scenario {} has no phase-space symbols to sweep",
            scenario.name()
        )))
    })?;
    let grid = scenario_grid(cfg)?;
    let var = cfg.sweep.gaussian_var;
    let w = Field::from_real_fn(grid.clone(), move |q, p| {
        (-(q * q + p * p) / (2.0 * var)).exp()
    });
    let log_w = Poly2::q()
        .mul(&Poly2::q())
        .add(&Poly2::p().mul(&Poly2::p()))
        .scale(Complex64::new(-0.5 / var, 0.0));

    let mut csv = String::from("kind,hbar,fp_reduction_residual,two_route_residual\n");
    let mut fp_residuals = Vec::new();
    let mut route_residuals = Vec::new();
    for &hbar in hbars {
        let lwr = lindblad_wigner_rhs(
            &symbols.hamiltonian,
            &symbols.lindblad,
            &w,
            hbar,
            2,
            DiffMode::Spectral,
        )?;
        let f = drift_coefficients(&symbols.hamiltonian, &symbols.lindblad, hbar, &grid);
        let g = diffusion_coefficients(&symbols.lindblad, hbar, &grid);
        let fp = fp_rhs(&f, &g, &w, DiffMode::Spectral)?;
        let r_fp = lwr.sub(&fp)?.l2_norm() / fp.l2_norm();
        let r_2r = two_route_reverse_drift_residual(
            &symbols.hamiltonian,
            &symbols.lindblad,
            &log_w,
            hbar,
            &grid,
            cfg.tolerances.score_floor,
        )?;
        csv.push_str(&format!("point,{hbar},{r_fp},{r_2r}\n"));
        fp_residuals.push(r_fp);
        route_residuals.push(r_2r);

        ctx.metrics.push(MetricRow::lower(
            &format!("diffusion_min_eigenvalue_hbar_{hbar}"),
            psd_min_eigenvalue(&g)?,
            cfg.tolerances.psd_floor,
        ));
    }
    let tol = &cfg.tolerances;
    let mut handle = |name: &str, residuals: &[f64], csv: &mut String| {
        let floor_limited = residuals.iter().cloned().fold(0.0f64, f64::max) < tol.sweep_floor;
        if floor_limited {
            csv.push_str(&format!("slope,{name},floor-limited,\n"));
            ctx.metrics.push(MetricRow::upper(
                &format!("{name}_floor"),
                residuals.iter().cloned().fold(0.0f64, f64::max),
                tol.sweep_floor,
            ));
        } else {
            let slope = fitted_slope(hbars, residuals);
            csv.push_str(&format!("slope,{name},{slope},\n"));
            ctx.metrics.push(MetricRow::window(
                &format!("{name}_slope"),
                slope,
                tol.slope_target,
                tol.slope_tol,
            ));
        }
    };
    handle("fp_reduction", &fp_residuals, &mut csv);
    handle("two_route", &route_residuals, &mut csv);
    ctx.write_text("sweep.csv", &csv)?;
    Ok(())
}

fn correspondence_driver(scenario: Scenario, ctx: &mut RunContext) -> Result<()> {
    let cfg = ctx.cfg;
    if matches!(scenario, Scenario::OuClassical) {
        return Err(CoreError::Config(ConfigError::Constraint(
            "correspondence report needs a quantum scenario".into(),
        )));
    }
    let tol = cfg.tolerances.clone();
    let grid = scenario_grid(cfg)?;
    let symbols = scenario.symbols(cfg).expect("quantum scenario");
    let hbar = cfg.physics.hbar;

    // ---- arrow 1: Petz reversal of the quantum dynamics --------------------
    let fock = scenario.fock_model(cfg)?;
    let gamma0 = thermal_state(fock.space(), cfg.physics.beta)?;
    let eps = default_reference_floor(&gamma0);
    let reference = std::sync::Arc::new(build_reference(
        &fock,
        &gamma0,
        0.0,
        cfg.time.petz_t_end,
        cfg.time.petz_dt,
        eps,
    )?);
    ctx.events.eigenvalue_clamps += reference.clamp_events;
    let reversed = ReversedModel::new(fock.clone(), reference.clone());
    let back = integrate_reversed(
        &reversed,
        reference.gamma(reference.len() - 1),
        cfg.time.petz_t_end,
        0.0,
        cfg.time.petz_dt,
        &IntegrateOptions { stride: usize::MAX, check_positivity: false, ..Default::default() },
    )?;
    let petz_metric = trace_distance(&gamma0, back.last())?;

    // ---- arrow 3: semiclassical reduction of the forward dynamics ----------
    let model = scenario.quantum_model(cfg)?;
    let space = model.space().clone();
    let rho0 = coherent_state(&space, cfg.initial.q0, cfg.initial.p0);
    let checkpoints = 5usize;
    let n_steps = ((cfg.time.t_end / cfg.time.dt).ceil() as usize).max(checkpoints);
    let n_steps = n_steps.div_ceil(checkpoints) * checkpoints;
    let dt_q = cfg.time.t_end / n_steps as f64;
    let opts = IntegrateOptions {
        stride: n_steps / checkpoints,
        check_positivity: false,
        ..Default::default()
    };
    let traj = integrate_forward(&model, &rho0, 0.0, cfg.time.t_end, dt_q, &opts)?;

    let w0 = wigner_transform(rho0.operator(), &grid)?;
    let two_pi_hbar = 2.0 * std::f64::consts::PI * hbar;
    let p0 = density_from_wigner(&w0, hbar)?;
    let f = drift_coefficients(&symbols.hamiltonian, &symbols.lindblad, hbar, &grid);
    let g = diffusion_coefficients(&symbols.lindblad, hbar, &grid);
    let drift = DriftField::Static(f.clone());
    let fp_dt_raw = auto_fp_dt(&grid, &drift, &g, cfg.time.fp_dt);
    let fp_steps = ((cfg.time.t_end / fp_dt_raw).ceil() as usize).max(checkpoints);
    let fp_steps = fp_steps.div_ceil(checkpoints) * checkpoints;
    let fp_dt = cfg.time.t_end / fp_steps as f64;
    let fp_sol = integrate_fp(
        &drift,
        &g,
        &p0,
        0.0,
        cfg.time.t_end,
        fp_dt,
        &FpOptions {
            stride: fp_steps / checkpoints,
            negativity_tol: -tol.fp_negativity,
            ..Default::default()
        },
    )?;
    let mut wigner_fp_l2 = 0.0f64;
    for k in 1..=checkpoints {
        let t = k as f64 * cfg.time.t_end / checkpoints as f64;
        let qi = traj
            .times()
            .iter()
            .position(|tt| (tt - t).abs() < 1e-9)
            .ok_or_else(|| CoreError::Resolution(format!("missing quantum checkpoint {t}")))?;
        let fi = fp_sol
            .times
            .iter()
            .position(|tt| (tt - t).abs() < 1e-9)
            .ok_or_else(|| CoreError::Resolution(format!("missing FP checkpoint {t}")))?;
        let w_q = wigner_transform(traj.states()[qi].operator(), &grid)?;
        let w_fp = fp_sol.snapshots[fi]
            .field()
            .scale(Complex64::new(two_pi_hbar, 0.0));
        let rel = w_q.sub(&w_fp)?.l2_norm() / w_q.l2_norm();
        wigner_fp_l2 = wigner_fp_l2.max(rel);
    }

    // ---- arrow 2: Bayes-rule reversal of the classical flow -----------------
    let (forward, series, dt_fp) =
        forward_with_reversal_series(cfg, &f, &g, &p0, cfg.time.fp_t_end)?;
    let back_fp = integrate_reverse_fp(
        &DriftField::Series(series),
        &g,
        forward.last(),
        cfg.time.fp_t_end,
        0.0,
        dt_fp,
        &FpOptions { negativity_tol: -tol.fp_negativity, ..Default::default() },
    )?;
    let fp_round_trip = back_fp.last().l1_distance(&p0)?;

    // ---- arrow 4: two-route reversed drift ---------------------------------
    let log_w = scenario.log_w_reference(cfg);
    let route_residual = two_route_reverse_drift_residual(
        &symbols.hamiltonian,
        &symbols.lindblad,
        &log_w,
        hbar,
        &grid,
        tol.score_floor,
    )?;
    // closure criterion: exact agreement, or the O(hbar^2) slope
    let sweep = [hbar, hbar / 2.0, hbar / 4.0];
    let residuals: Vec<f64> = sweep
        .iter()
        .map(|&hb| {
            two_route_reverse_drift_residual(
                &symbols.hamiltonian,
                &symbols.lindblad,
                &log_w,
                hb,
                &grid,
                tol.score_floor,
            )
        })
        .collect::<Result<_>>()?;
    let route_exact = route_residual <= tol.two_route_exact;
    let route_slope = fitted_slope(&sweep, &residuals);
    let route_pass =
        route_exact || (route_slope - tol.slope_target).abs() <= tol.slope_tol;

    let rows = [
        MetricRow::upper("petz_recovery_trace_distance", petz_metric, tol.petz_recovery),
        MetricRow::upper("fp_round_trip_l1", fp_round_trip, tol.fp_round_trip_l1),
        MetricRow::upper("wigner_fp_relative_l2", wigner_fp_l2, tol.wigner_fp_l2),
        MetricRow {
            name: "two_route_drift_residual".into(),
            value: route_residual,
            threshold: format!(
                "<= {:.3e} or slope {} +- {}",
                tol.two_route_exact, tol.slope_target, tol.slope_tol
            ),
            pass: route_pass,
        },
    ];
    let mut csv = String::from("arrow,metric,value,threshold,pass\n");
    for (arrow, row) in ["petz-reversal", "bayes-reversal", "semiclassical-forward", "reduced-reversal"]
        .iter()
        .zip(&rows)
    {
        csv.push_str(&format!(
            "{arrow},{},{},{},{}\n",
            row.name,
            row.value,
            row.threshold.replace(',', ";"),
            row.pass
        ));
    }
    ctx.write_text("report.csv", &csv)?;
    ctx.metrics.extend(rows);
    ctx.metrics.push(MetricRow::lower(
        "diffusion_min_eigenvalue",
        psd_min_eigenvalue(&g)?,
        tol.psd_floor,
    ));
    Ok(())
}

/// Convenience wrapper: the hbar-sweep pipeline on a config.
pub fn hbar_sweep(cfg: &ScenarioConfig, out_dir: &Path) -> Result<RunManifest> {
    let mut cfg = cfg.clone();
    cfg.pipeline = "hbar-sweep".into();
    run_scenario(&cfg, out_dir)
}

/// Convenience wrapper: the correspondence-report pipeline on a config.
pub fn correspondence_report(cfg: &ScenarioConfig, out_dir: &Path) -> Result<RunManifest> {
    let mut cfg = cfg.clone();
    cfg.pipeline = "correspondence-report".into();
    run_scenario(&cfg, out_dir)
}
