//! Semiclassical reduction coefficients: the drift f and diffusion G of the
//! phase-space equation, the score field of the reference Wigner function,
//! the reversed drift, the first-order reversed symbols, and residual checks
//! comparing the Moyal-level right-hand side against its drift-diffusion form.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{CoreError, Result};
use crate::phase_space::{
    moyal_star, partial_derivative, DiffMode, Field, FieldJet, PhaseGrid,
};
use crate::symbols::Poly2;

/// Default relative floor applied to the reference Wigner function wherever
/// it is divided by.
pub const DEFAULT_SCORE_FLOOR: f64 = 1e-12;

/// Symplectic form on 2N phase-space indices: omega[i, i+N] = 1,
/// omega[i+N, i] = -1, zero otherwise.
#[derive(Debug, Clone, Copy)]
pub struct SymplecticForm {
    pub n: usize,
}

impl SymplecticForm {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    pub fn omega(&self, mu: usize, nu: usize) -> i64 {
        if nu == mu + self.n {
            1
        } else if mu == nu + self.n {
            -1
        } else {
            0
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.n
    }

    pub fn matrix(&self) -> Array2<i64> {
        Array2::from_shape_fn((self.dim(), self.dim()), |(m, n)| self.omega(m, n))
    }
}

// ---------------------------------------------------------------------------
// Drift and diffusion
// ---------------------------------------------------------------------------

/// Drift field f^mu = sum_nu omega^{mu nu} [dH/dx^nu
///   + sum_a (Im(l_a d l_a^*/dx^nu) - (hbar/2) Re{l_a, d l_a^*/dx^nu}_p)].
///
/// Symbols are polynomials, so every derivative is closed-form.
pub fn drift_coefficients(h: &Poly2, ells: &[Poly2], hbar: f64, grid: &PhaseGrid) -> [Field; 2] {
    let polys = drift_polys(h, ells, hbar);
    [
        Field::from_poly(grid.clone(), &polys[0]),
        Field::from_poly(grid.clone(), &polys[1]),
    ]
}

/// Diffusion matrix G^{mu nu} = hbar sum_a sum_{lam rho}
/// omega^{mu lam} omega^{nu rho} Re(dl_a/dx^lam dl_a^*/dx^rho).
///
/// The (0,1) entry is computed once and mirrored, so the matrix is symmetric
/// pointwise exactly.
pub fn diffusion_coefficients(ells: &[Poly2], hbar: f64, grid: &PhaseGrid) -> [[Field; 2]; 2] {
    let polys = diffusion_polys(ells, hbar);
    let sample = |p: &Poly2| Field::from_poly(grid.clone(), p);
    let g01 = sample(&polys[0][1]);
    [[sample(&polys[0][0]), g01.clone()], [g01, sample(&polys[1][1])]]
}

/// Drift plus diffusion fields of one model on one grid.
#[derive(Debug, Clone)]
pub struct DriftDiffusion {
    pub f: [Field; 2],
    pub g: [[Field; 2]; 2],
    hbar: f64,
}

impl DriftDiffusion {
    pub fn from_symbols(h: &Poly2, ells: &[Poly2], hbar: f64, grid: &PhaseGrid) -> Self {
        Self {
            f: drift_coefficients(h, ells, hbar, grid),
            g: diffusion_coefficients(ells, hbar, grid),
            hbar,
        }
    }

    pub fn from_fields(f: [Field; 2], g: [[Field; 2]; 2], hbar: f64) -> Self {
        Self { f, g, hbar }
    }

    pub fn grid(&self) -> &PhaseGrid {
        self.f[0].grid()
    }

    /// The real diffusion intermediate D_R = G / hbar (debug output only).
    pub fn d_r(&self) -> [[Field; 2]; 2] {
        let s = Complex64::new(1.0 / self.hbar, 0.0);
        [
            [self.g[0][0].scale(s), self.g[0][1].scale(s)],
            [self.g[1][0].scale(s), self.g[1][1].scale(s)],
        ]
    }
}

/// Minimum over all grid points of the smallest eigenvalue of G(x).
pub fn psd_min_eigenvalue(g: &[[Field; 2]; 2]) -> Result<f64> {
    let scale = g
        .iter()
        .flat_map(|row| row.iter())
        .map(|f| f.max_abs())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let asym = g[0][1].sub(&g[1][0])?.max_abs();
    if asym > 1e-12 * scale {
        return Err(CoreError::Asymmetry(asym));
    }
    let (nq, np) = (g[0][0].grid().n_q, g[0][0].grid().n_p);
    let mut min = f64::INFINITY;
    let mut arg = (0usize, 0usize);
    for i in 0..nq {
        for j in 0..np {
            let a = g[0][0].data()[[i, j]].re;
            let b = g[0][1].data()[[i, j]].re;
            let cc = g[1][1].data()[[i, j]].re;
            let lam = 0.5 * (a + cc) - (0.25 * (a - cc) * (a - cc) + b * b).sqrt();
            if lam < min {
                min = lam;
                arg = (i, j);
            }
        }
    }
    let _ = arg;
    Ok(min)
}

// ---------------------------------------------------------------------------
// Score field and reversed drift
// ---------------------------------------------------------------------------

/// Logarithmic gradient of the reference Wigner function, with the
/// denominator floored at delta * max(W).
#[derive(Debug, Clone)]
pub struct ScoreField {
    pub v_q: Field,
    pub v_p: Field,
    pub delta: f64,
    /// Fraction of grid points where the floor was active.
    pub floor_fraction: f64,
}

impl ScoreField {
    pub fn grid(&self) -> &PhaseGrid {
        self.v_q.grid()
    }

    pub fn component(&self, axis: usize) -> &Field {
        if axis == 0 {
            &self.v_q
        } else {
            &self.v_p
        }
    }
}

fn floored_values(w: &Field, delta: f64) -> (Array2<f64>, f64, usize) {
    let max = w.max_abs_real().max(f64::MIN_POSITIVE);
    let floor = delta * max;
    let mut floored = 0usize;
    let vals = Array2::from_shape_fn((w.grid().n_q, w.grid().n_p), |(i, j)| {
        let v = w.data()[[i, j]].re;
        if v < floor {
            floored += 1;
            floor
        } else {
            v
        }
    });
    (vals, floor, floored)
}

/// Score field V = (dW/dQ / W, dW/dP / W) with flooring.
pub fn score_field(w_gamma: &Field, delta: f64) -> Result<ScoreField> {
    let grid = w_gamma.grid().clone();
    let (wf, _, floored) = floored_values(w_gamma, delta);
    let dq = partial_derivative(w_gamma, 0, 1, DiffMode::Spectral)?;
    let dp = partial_derivative(w_gamma, 1, 1, DiffMode::Spectral)?;
    let divide = |d: &Field| -> Field {
        let data = Array2::from_shape_fn((grid.n_q, grid.n_p), |(i, j)| {
            Complex64::new(d.data()[[i, j]].re / wf[[i, j]], 0.0)
        });
        Field::from_data(grid.clone(), data).unwrap()
    };
    let total = (grid.n_q * grid.n_p) as f64;
    Ok(ScoreField {
        v_q: divide(&dq),
        v_p: divide(&dp),
        delta,
        floor_fraction: floored as f64 / total,
    })
}

/// Reversed drift f-bar^mu = -f^mu + (1/W) sum_nu d/dx^nu (G^{mu nu} W).
pub fn reverse_drift(
    f: &[Field; 2],
    g: &[[Field; 2]; 2],
    w_gamma: &Field,
    delta: f64,
) -> Result<[Field; 2]> {
    let grid = w_gamma.grid().clone();
    f[0].check_grid(w_gamma)?;
    g[0][0].check_grid(w_gamma)?;
    let (wf, _, _) = floored_values(w_gamma, delta);
    let mut out: Vec<Field> = Vec::with_capacity(2);
    for mu in 0..2 {
        let mut divergence = Field::zeros(grid.clone());
        for nu in 0..2 {
            let prod = g[mu][nu].mul(w_gamma)?;
            divergence = divergence.add(&partial_derivative(&prod, nu, 1, DiffMode::Spectral)?)?;
        }
        let data = Array2::from_shape_fn((grid.n_q, grid.n_p), |(i, j)| {
            -f[mu].data()[[i, j]] + divergence.data()[[i, j]] / wf[[i, j]]
        });
        out.push(Field::from_data(grid.clone(), data)?);
    }
    let out: [Field; 2] = [out.remove(0), out.remove(0)];

    // Self-check for spatially constant G: the divergence form must agree
    // with -f + G V to high accuracy.
    let is_const = g.iter().flat_map(|r| r.iter()).all(|field| {
        let first = field.data()[[0, 0]];
        field
            .data()
            .iter()
            .all(|z| (z - first).norm() <= 1e-12 * first.norm().max(1.0))
    });
    if is_const {
        let score = score_field(w_gamma, delta)?;
        let max_w = w_gamma.max_abs_real();
        for mu in 0..2 {
            let alt_q = g[mu][0].data()[[0, 0]];
            let alt_p = g[mu][1].data()[[0, 0]];
            let mut dev: f64 = 0.0;
            for i in 0..grid.n_q {
                for j in 0..grid.n_p {
                    if w_gamma.data()[[i, j]].re < 10.0 * delta * max_w {
                        continue;
                    }
                    let alt = -f[mu].data()[[i, j]]
                        + alt_q * score.v_q.data()[[i, j]]
                        + alt_p * score.v_p.data()[[i, j]];
                    dev = dev.max((out[mu].data()[[i, j]] - alt).norm());
                }
            }
            if dev > 1e-8 {
                log::warn!(
                    "constant-G reverse drift self-check deviation {dev:.3e} (component {mu})"
                );
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reversed symbols (first order in hbar)
// ---------------------------------------------------------------------------

/// First-order reversed symbols: l~ and H~ as grid fields.
#[derive(Debug, Clone)]
pub struct ReversedSymbols {
    pub ells: Vec<Field>,
    pub hamiltonian: Field,
}

/// Reversed symbols to first order:
/// l~_a = l_a^* + (i hbar/2)(dl*/dP V_Q - dl*/dQ V_P);
/// H~ = -H - (hbar/4) sum_a [d|l|^2/dQ V_P - d|l|^2/dP V_Q].
///
/// The H~ correction uses the gradient of |l|^2 (= 2 Re(l* dl)); this is the
/// variant consistent with the first-order equality of the two reversal
/// routes.
pub fn reversed_symbols(
    ells: &[Poly2],
    h: &Poly2,
    v: &ScoreField,
    hbar: f64,
) -> Result<ReversedSymbols> {
    let grid = v.grid().clone();
    let mut tilde_ells = Vec::with_capacity(ells.len());
    for ell in ells {
        let star = ell.conj();
        let base = Field::from_poly(grid.clone(), &star);
        let dps = Field::from_poly(grid.clone(), &star.dp());
        let dqs = Field::from_poly(grid.clone(), &star.dq());
        let corr = dps.mul(&v.v_q)?.sub(&dqs.mul(&v.v_p)?)?;
        tilde_ells.push(base.add(&corr.scale(Complex64::new(0.0, 0.5 * hbar)))?);
    }
    let mut h_tilde = Field::from_poly(grid.clone(), &h.scale(Complex64::new(-1.0, 0.0)));
    for ell in ells {
        let abs2 = ell.conj().mul(ell).re_part();
        let term = Field::from_poly(grid.clone(), &abs2.dq())
            .mul(&v.v_p)?
            .sub(&Field::from_poly(grid.clone(), &abs2.dp()).mul(&v.v_q)?)?;
        h_tilde = h_tilde.add(&term.scale(Complex64::new(-hbar / 4.0, 0.0)))?;
    }
    Ok(ReversedSymbols { ells: tilde_ells, hamiltonian: h_tilde })
}

/// Reversed symbols as exact polynomials, for a Gaussian reference given by
/// its log-density: W_gamma ~ exp(g), so V = (dg/dQ, dg/dP).
pub fn reversed_symbol_polys(
    ells: &[Poly2],
    h: &Poly2,
    log_w: &Poly2,
    hbar: f64,
) -> (Vec<Poly2>, Poly2) {
    let (vq, vp) = (log_w.dq(), log_w.dp());
    let tilde_ells: Vec<Poly2> = ells
        .iter()
        .map(|ell| {
            let star = ell.conj();
            let corr = star.dp().mul(&vq).sub(&star.dq().mul(&vp));
            star.add(&corr.scale(Complex64::new(0.0, 0.5 * hbar)))
        })
        .collect();
    let mut h_tilde = h.scale(Complex64::new(-1.0, 0.0));
    for ell in ells {
        let abs2 = ell.conj().mul(ell).re_part();
        let term = abs2.dq().mul(&vp).sub(&abs2.dp().mul(&vq));
        h_tilde = h_tilde.add(&term.scale(Complex64::new(-hbar / 4.0, 0.0)));
    }
    (tilde_ells, h_tilde)
}

// ---------------------------------------------------------------------------
// Two-route reversed drift residual
// ---------------------------------------------------------------------------

/// Drift polynomials (the field-valued [`drift_coefficients`] samples these).
fn drift_polys(h: &Poly2, ells: &[Poly2], hbar: f64) -> [Poly2; 2] {
    let omega = SymplecticForm::new(1);
    let mut terms: Vec<Poly2> = Vec::with_capacity(2);
    for nu in 0..2 {
        let mut term = h.deriv(nu);
        for ell in ells {
            let dstar = ell.conj().deriv(nu);
            let im = ell.mul(&dstar).im_part();
            let br = ell.poisson(&dstar).re_part().scale(Complex64::new(0.5 * hbar, 0.0));
            term = term.add(&im).sub(&br);
        }
        terms.push(term);
    }
    let assemble = |mu: usize| -> Poly2 {
        let mut poly = Poly2::zero();
        for (nu, term) in terms.iter().enumerate() {
            let w = omega.omega(mu, nu);
            if w != 0 {
                poly = poly.add(&term.scale(Complex64::new(w as f64, 0.0)));
            }
        }
        poly
    };
    [assemble(0), assemble(1)]
}

/// Diffusion polynomials; (0,1) is mirrored into (1,0).
fn diffusion_polys(ells: &[Poly2], hbar: f64) -> [[Poly2; 2]; 2] {
    let omega = SymplecticForm::new(1);
    let entry = |mu: usize, nu: usize| -> Poly2 {
        let mut poly = Poly2::zero();
        for lam in 0..2 {
            for rho in 0..2 {
                let w = omega.omega(mu, lam) * omega.omega(nu, rho);
                if w == 0 {
                    continue;
                }
                for ell in ells {
                    let prod = ell.deriv(lam).mul(&ell.conj().deriv(rho)).re_part();
                    poly = poly.add(&prod.scale(Complex64::new(w as f64 * hbar, 0.0)));
                }
            }
        }
        poly
    };
    let g00 = entry(0, 0);
    let g01 = entry(0, 1);
    let g11 = entry(1, 1);
    [[g00, g01.clone()], [g01, g11]]
}

/// Maximum pointwise difference between the drift formula evaluated on the
/// first-order reversed symbols (route 1) and the Bayes-rule reversed drift
/// (route 2), over the region where W_gamma >= 10 delta max(W_gamma).
///
/// The reference enters through its log-density polynomial `log_w` (Gaussian
/// reference: a quadratic), so both routes are exact closed forms and the
/// residual measures only the O(hbar^2) route difference. It vanishes
/// identically for real linear Lindblad symbols.
pub fn two_route_reverse_drift_residual(
    h: &Poly2,
    ells: &[Poly2],
    log_w: &Poly2,
    hbar: f64,
    grid: &PhaseGrid,
    delta: f64,
) -> Result<f64> {
    if !log_w.is_real() {
        return Err(CoreError::DerivativeUnavailable(
            "log-density of the reference must be real".into(),
        ));
    }
    // route 1: the forward drift formula applied to the reversed symbols
    let (tilde_ells, tilde_h) = reversed_symbol_polys(ells, h, log_w, hbar);
    let route1 = drift_polys(&tilde_h, &tilde_ells, hbar);

    // route 2: f-bar = -f + (1/W) d_nu(G W) = -f + d_nu G + G d_nu(log W)
    let f = drift_polys(h, ells, hbar);
    let g = diffusion_polys(ells, hbar);
    let route2: Vec<Poly2> = (0..2)
        .map(|mu| {
            let mut out = f[mu].scale(Complex64::new(-1.0, 0.0));
            for nu in 0..2 {
                out = out
                    .add(&g[mu][nu].deriv(nu))
                    .add(&g[mu][nu].mul(&log_w.deriv(nu)));
            }
            out
        })
        .collect();

    // comparison restricted to W >= 10 delta max(W)
    let mut g_max = f64::NEG_INFINITY;
    for i in 0..grid.n_q {
        for j in 0..grid.n_p {
            g_max = g_max.max(log_w.eval(grid.q_at(i), grid.p_at(j)).re);
        }
    }
    let threshold = g_max + (10.0 * delta).ln();
    let mut residual: f64 = 0.0;
    for mu in 0..2 {
        for i in 0..grid.n_q {
            for j in 0..grid.n_p {
                let (q, p) = (grid.q_at(i), grid.p_at(j));
                if log_w.eval(q, p).re < threshold {
                    continue;
                }
                residual = residual.max((route1[mu].eval(q, p) - route2[mu].eval(q, p)).norm());
            }
        }
    }
    Ok(residual)
}

// ---------------------------------------------------------------------------
// Moyal-level right-hand sides
// ---------------------------------------------------------------------------

/// Right-hand side of the master equation in Wigner representation,
/// assembled from truncated star products:
/// (1/i hbar)(H*W - W*H) + (1/hbar) sum_a [l*W*l^* - (1/2)(l^**l*W + W*l^**l)].
pub fn lindblad_wigner_rhs(
    h: &Poly2,
    ells: &[Poly2],
    w: &Field,
    hbar: f64,
    order: usize,
    mode: DiffMode,
) -> Result<Field> {
    if order > 2 {
        return Err(CoreError::UnsupportedStarOrder(order));
    }
    let grid = w.grid().clone();
    let h_jet = FieldJet::from_poly(&grid, h);
    let w_jet = FieldJet::from_field(w, mode)?;

    let hw = moyal_star(&h_jet, &w_jet, hbar, order)?;
    let wh = moyal_star(&w_jet, &h_jet, hbar, order)?;
    let mut rhs = hw.sub(&wh)?.scale(Complex64::new(0.0, -1.0 / hbar));

    let inv_hbar = Complex64::new(1.0 / hbar, 0.0);
    let half = Complex64::new(0.5, 0.0);
    for ell in ells {
        let ell_jet = FieldJet::from_poly(&grid, ell);
        let ell_star_jet = FieldJet::from_poly(&grid, &ell.conj());
        // l * W * l^*, chained left to right
        let lw = moyal_star(&ell_jet, &w_jet, hbar, order)?;
        let lw_jet = FieldJet::from_field(&lw, mode)?;
        let lwl = moyal_star(&lw_jet, &ell_star_jet, hbar, order)?;
        // l^* * l as an exact polynomial, then starred with W on both sides
        let m = ell.conj().moyal_trunc(ell, hbar, order);
        let m_jet = FieldJet::from_poly(&grid, &m);
        let mw = moyal_star(&m_jet, &w_jet, hbar, order)?;
        let wm = moyal_star(&w_jet, &m_jet, hbar, order)?;
        let dissip = lwl.sub(&mw.add(&wm)?.scale(half))?;
        rhs = rhs.add(&dissip.scale(inv_hbar))?;
    }
    Ok(rhs)
}

/// Fokker-Planck right-hand side in divergence form:
/// -sum_mu d_mu(f^mu W) + (1/2) sum_{mu nu} d_mu d_nu (G^{mu nu} W).
pub fn fp_rhs(f: &[Field; 2], g: &[[Field; 2]; 2], w: &Field, mode: DiffMode) -> Result<Field> {
    let grid = w.grid().clone();
    f[0].check_grid(w)?;
    g[0][0].check_grid(w)?;
    let mut rhs = Field::zeros(grid.clone());
    for mu in 0..2 {
        let prod = f[mu].mul(w)?;
        rhs = rhs.sub(&partial_derivative(&prod, mu, 1, mode)?)?;
    }
    for mu in 0..2 {
        for nu in 0..2 {
            let prod = g[mu][nu].mul(w)?;
            let der = if mu == nu {
                partial_derivative(&prod, mu, 2, mode)?
            } else {
                let first = partial_derivative(&prod, nu, 1, mode)?;
                partial_derivative(&first, mu, 1, mode)?
            };
            rhs = rhs.add(&der.scale(Complex64::new(0.5, 0.0)))?;
        }
    }
    Ok(rhs)
}
