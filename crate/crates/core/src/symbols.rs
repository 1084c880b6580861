//! Closed-form phase-space symbols as bivariate polynomials in (Q, P).
//!
//! All shipped scenarios use polynomial Hamiltonian and Lindblad symbols, so
//! exact values and partial derivatives are available everywhere on a grid
//! without numerical differentiation.

use num_complex::Complex64;

/// Complex polynomial in two real variables: sum c[i][j] Q^i P^j.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly2 {
    /// coeffs[i][j] multiplies Q^i P^j; rows may be ragged-trimmed.
    coeffs: Vec<Vec<Complex64>>,
}

impl Poly2 {
    pub fn zero() -> Self {
        Self { coeffs: vec![] }
    }

    pub fn constant(c: Complex64) -> Self {
        Self { coeffs: vec![vec![c]] }
    }

    pub fn real_constant(c: f64) -> Self {
        Self::constant(Complex64::new(c, 0.0))
    }

    /// The coordinate Q.
    pub fn q() -> Self {
        Self { coeffs: vec![vec![Complex64::ZERO], vec![Complex64::new(1.0, 0.0)]] }
    }

    /// The coordinate P.
    pub fn p() -> Self {
        Self { coeffs: vec![vec![Complex64::ZERO, Complex64::new(1.0, 0.0)]] }
    }

    pub fn from_coeffs(coeffs: Vec<Vec<Complex64>>) -> Self {
        let mut p = Self { coeffs };
        p.trim();
        p
    }

    fn coeff(&self, i: usize, j: usize) -> Complex64 {
        self.coeffs
            .get(i)
            .and_then(|row| row.get(j))
            .copied()
            .unwrap_or(Complex64::ZERO)
    }

    fn trim(&mut self) {
        for row in &mut self.coeffs {
            while row.last().is_some_and(|c| c.norm() == 0.0) {
                row.pop();
            }
        }
        while self.coeffs.last().is_some_and(|r| r.is_empty()) {
            self.coeffs.pop();
        }
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|r| r.iter().all(|c| c.norm() == 0.0))
    }

    /// True when every coefficient is real.
    pub fn is_real(&self) -> bool {
        self.coeffs.iter().all(|r| r.iter().all(|c| c.im == 0.0))
    }

    pub fn degree(&self) -> usize {
        let mut deg = 0;
        for (i, row) in self.coeffs.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                if c.norm() > 0.0 {
                    deg = deg.max(i + j);
                }
            }
        }
        deg
    }

    pub fn add(&self, rhs: &Poly2) -> Poly2 {
        let ni = self.coeffs.len().max(rhs.coeffs.len());
        let mut out = Vec::with_capacity(ni);
        for i in 0..ni {
            let nj = self
                .coeffs
                .get(i)
                .map_or(0, |r| r.len())
                .max(rhs.coeffs.get(i).map_or(0, |r| r.len()));
            out.push((0..nj).map(|j| self.coeff(i, j) + rhs.coeff(i, j)).collect());
        }
        Poly2::from_coeffs(out)
    }

    pub fn sub(&self, rhs: &Poly2) -> Poly2 {
        self.add(&rhs.scale(Complex64::new(-1.0, 0.0)))
    }

    pub fn scale(&self, c: Complex64) -> Poly2 {
        Poly2::from_coeffs(
            self.coeffs
                .iter()
                .map(|row| row.iter().map(|&x| x * c).collect())
                .collect(),
        )
    }

    pub fn mul(&self, rhs: &Poly2) -> Poly2 {
        if self.coeffs.is_empty() || rhs.coeffs.is_empty() {
            return Poly2::zero();
        }
        let ni = self.coeffs.len() + rhs.coeffs.len() - 1;
        let nj = self.coeffs.iter().map(|r| r.len()).max().unwrap_or(0)
            + rhs.coeffs.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut out = vec![vec![Complex64::ZERO; nj]; ni];
        for (i1, row1) in self.coeffs.iter().enumerate() {
            for (j1, &c1) in row1.iter().enumerate() {
                if c1.norm() == 0.0 {
                    continue;
                }
                for (i2, row2) in rhs.coeffs.iter().enumerate() {
                    for (j2, &c2) in row2.iter().enumerate() {
                        out[i1 + i2][j1 + j2] += c1 * c2;
                    }
                }
            }
        }
        Poly2::from_coeffs(out)
    }

    /// Complex conjugate (Q, P are real variables).
    pub fn conj(&self) -> Poly2 {
        Poly2::from_coeffs(
            self.coeffs
                .iter()
                .map(|row| row.iter().map(|c| c.conj()).collect())
                .collect(),
        )
    }

    /// Exact partial derivative with respect to Q.
    pub fn dq(&self) -> Poly2 {
        if self.coeffs.len() <= 1 {
            return Poly2::zero();
        }
        Poly2::from_coeffs(
            self.coeffs[1..]
                .iter()
                .enumerate()
                .map(|(i, row)| row.iter().map(|&c| c * (i + 1) as f64).collect())
                .collect(),
        )
    }

    /// Exact partial derivative with respect to P.
    pub fn dp(&self) -> Poly2 {
        Poly2::from_coeffs(
            self.coeffs
                .iter()
                .map(|row| {
                    if row.len() <= 1 {
                        vec![]
                    } else {
                        row[1..]
                            .iter()
                            .enumerate()
                            .map(|(j, &c)| c * (j + 1) as f64)
                            .collect()
                    }
                })
                .collect(),
        )
    }

    /// Derivative along phase-space axis 0 (Q) or 1 (P).
    pub fn deriv(&self, axis: usize) -> Poly2 {
        match axis {
            0 => self.dq(),
            _ => self.dp(),
        }
    }

    pub fn eval(&self, q: f64, p: f64) -> Complex64 {
        // Horner in P inside Horner in Q.
        let mut acc = Complex64::ZERO;
        for row in self.coeffs.iter().rev() {
            let mut row_val = Complex64::ZERO;
            for &c in row.iter().rev() {
                row_val = row_val * p + c;
            }
            acc = acc * q + row_val;
        }
        acc
    }

    /// Poisson bracket {a, b} = dQ a dP b - dP a dQ b, exact.
    pub fn poisson(&self, rhs: &Poly2) -> Poly2 {
        self.dq().mul(&rhs.dp()).sub(&self.dp().mul(&rhs.dq()))
    }

    /// Real part as a polynomial (Q, P real).
    pub fn re_part(&self) -> Poly2 {
        self.add(&self.conj()).scale(Complex64::new(0.5, 0.0))
    }

    /// Imaginary part as a polynomial.
    pub fn im_part(&self) -> Poly2 {
        self.sub(&self.conj()).scale(Complex64::new(0.0, -0.5))
    }

    /// Moyal star product truncated at the given order in hbar (0, 1 or 2),
    /// exact on polynomial symbols.
    pub fn moyal_trunc(&self, rhs: &Poly2, hbar: f64, order: usize) -> Poly2 {
        let mut out = self.mul(rhs);
        if order >= 1 {
            out = out.add(&self.poisson(rhs).scale(Complex64::new(0.0, 0.5 * hbar)));
        }
        if order >= 2 {
            let term = self
                .dq()
                .dq()
                .mul(&rhs.dp().dp())
                .sub(&self.dq().dp().mul(&rhs.dq().dp()).scale(Complex64::new(2.0, 0.0)))
                .add(&self.dp().dp().mul(&rhs.dq().dq()));
            out = out.add(&term.scale(Complex64::new(-hbar * hbar / 8.0, 0.0)));
        }
        out
    }
}

/// Closed-form symbols of a Lindblad model: the Hamiltonian symbol H(Q, P)
/// and the scaled Lindblad symbols l_alpha(Q, P). Neither may depend on hbar.
#[derive(Debug, Clone)]
pub struct ModelSymbols {
    pub hamiltonian: Poly2,
    pub lindblad: Vec<Poly2>,
}

impl ModelSymbols {
    pub fn new(hamiltonian: Poly2, lindblad: Vec<Poly2>) -> Self {
        Self { hamiltonian, lindblad }
    }
}
