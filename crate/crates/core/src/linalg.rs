//! Small dense linear-algebra helpers shared by the design modules.
//!
//! Everything here works on `nalgebra` dynamic matrices; dimensions in this
//! crate are tiny (a handful of states per agent), so dense routines are used
//! throughout.

use nalgebra::DMatrix;
use num_complex::Complex64;

/// Monic polynomial `s^n + c_1 s^{n-1} + ... + c_n`, stored as `[c_1, ..., c_n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonicPolynomial {
    coeffs: Vec<f64>,
}

impl MonicPolynomial {
    /// Build from the non-leading coefficients in descending power order.
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    /// Build `λ^m + k_m λ^{m-1} + ... + k_1` from `[k_1, ..., k_m]`.
    pub fn from_ascending(k: &[f64]) -> Self {
        Self {
            coeffs: k.iter().rev().copied().collect(),
        }
    }

    /// Expand `Π (s - root)`; imaginary parts of the result are dropped.
    pub fn from_roots(roots: &[Complex64]) -> Self {
        // full[0] is the leading coefficient
        let mut full = vec![Complex64::new(1.0, 0.0)];
        for &root in roots {
            let mut next = vec![Complex64::new(0.0, 0.0); full.len() + 1];
            for (i, &c) in full.iter().enumerate() {
                next[i] += c;
                next[i + 1] -= c * root;
            }
            full = next;
        }
        Self {
            coeffs: full[1..].iter().map(|c| c.re).collect(),
        }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len()
    }

    /// Non-leading coefficients, descending powers.
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn eval(&self, s: Complex64) -> Complex64 {
        self.coeffs
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, &c| acc * s + c)
    }

    /// Horner evaluation `P(M)`.
    pub fn eval_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = m.nrows();
        let mut acc = DMatrix::identity(n, n);
        for &c in &self.coeffs {
            acc = m * acc + DMatrix::identity(n, n) * c;
        }
        acc
    }

    /// Companion matrix with an identity block in the upper right and
    /// `[-c_n, ..., -c_1]` as the last row.
    pub fn companion(&self) -> DMatrix<f64> {
        let n = self.degree();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n.saturating_sub(1) {
            m[(i, i + 1)] = 1.0;
        }
        for j in 0..n {
            m[(n - 1, j)] = -self.coeffs[n - 1 - j];
        }
        m
    }

    pub fn roots(&self) -> Vec<Complex64> {
        if self.degree() == 0 {
            return Vec::new();
        }
        eigenvalues(&self.companion())
    }

    /// All roots strictly inside the open left half-plane (margin `1e-9`).
    pub fn is_hurwitz(&self) -> bool {
        self.degree() > 0 && self.roots().iter().all(|r| r.re < -1e-9)
    }

    /// Remainder of `self` divided by the monic `divisor`, descending powers,
    /// length `divisor.degree()`.
    pub fn remainder(&self, divisor: &MonicPolynomial) -> Vec<f64> {
        let mut work: Vec<f64> = std::iter::once(1.0).chain(self.coeffs.iter().copied()).collect();
        let d = divisor.degree();
        if work.len() <= d {
            let mut out = vec![0.0; d - work.len()];
            out.extend(work);
            return out;
        }
        for lead in 0..work.len() - d {
            let factor = work[lead];
            if factor == 0.0 {
                continue;
            }
            work[lead] = 0.0;
            for (j, &c) in divisor.coeffs.iter().enumerate() {
                work[lead + 1 + j] -= factor * c;
            }
        }
        work[work.len() - d..].to_vec()
    }
}

/// Characteristic polynomial `det(sI - M)` by the Faddeev–LeVerrier recursion.
pub fn characteristic_polynomial(m: &DMatrix<f64>) -> MonicPolynomial {
    let n = m.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut coeffs = Vec::with_capacity(n);
    let mut mk = eye.clone();
    for k in 1..=n {
        let am = m * &mk;
        let c = -am.trace() / k as f64;
        coeffs.push(c);
        mk = am + &eye * c;
    }
    MonicPolynomial::new(coeffs)
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    m.complex_eigenvalues().iter().copied().collect()
}

/// Largest real part in the spectrum of `m` (`-inf` for an empty matrix).
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m)
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz_matrix(m: &DMatrix<f64>) -> bool {
    m.nrows() > 0 && spectral_abscissa(m) <= -1e-9
}

/// `m ⊗ I_q`.
pub fn kron_identity(m: &DMatrix<f64>, q: usize) -> DMatrix<f64> {
    m.kronecker(&DMatrix::<f64>::identity(q, q))
}

/// Matrix exponential by scaling and squaring with a diagonal (6,6) Padé
/// approximant.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    const P: usize = 6;
    let n = a.nrows();
    let norm = a.column_iter().map(|c| c.abs().sum()).fold(0.0, f64::max);
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
    }
    let scaled = a / 2f64.powi(squarings as i32);

    // c_k = (2p-k)! p! / ((2p)! k! (p-k)!)
    let mut c = vec![1.0f64; P + 1];
    for k in 1..=P {
        c[k] = c[k - 1] * (P + 1 - k) as f64 / (k as f64 * (2 * P + 1 - k) as f64);
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let mut numer = &eye * c[0];
    let mut denom = &eye * c[0];
    let mut power = eye.clone();
    for (k, &ck) in c.iter().enumerate().skip(1) {
        power = &power * &scaled;
        numer += &power * ck;
        if k % 2 == 0 {
            denom += &power * ck;
        } else {
            denom -= &power * ck;
        }
    }
    let mut result = denom
        .lu()
        .solve(&numer)
        .expect("Padé denominator is nonsingular for a scaled argument");
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn expm_rotation() {
        let s = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        for &t in &[0.0, 0.3, 1.0, 7.5] {
            let e = expm(&(&s * t));
            assert_abs_diff_eq!(e[(0, 0)], t.cos(), epsilon = 1e-13);
            assert_abs_diff_eq!(e[(0, 1)], t.sin(), epsilon = 1e-13);
            assert_abs_diff_eq!(e[(1, 0)], -t.sin(), epsilon = 1e-13);
        }
    }

    #[test]
    fn expm_jordan_block_gives_ramp() {
        let s = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = expm(&(&s * 3.0));
        assert_abs_diff_eq!(e[(0, 1)], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(e[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn charpoly_matches_known() {
        let f = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, -1.0, 0.0]);
        let p = characteristic_polynomial(&f);
        assert_abs_diff_eq!(p.coeffs()[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p.coeffs()[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn roots_roundtrip() {
        let roots = [
            Complex64::new(-1.0, 2.0),
            Complex64::new(-1.0, -2.0),
            Complex64::new(-3.0, 0.0),
        ];
        let p = MonicPolynomial::from_roots(&roots);
        // (s^2 + 2s + 5)(s + 3) = s^3 + 5s^2 + 11s + 15
        assert_eq!(p.coeffs(), &[5.0, 11.0, 15.0]);
        assert!(p.is_hurwitz());
    }

    #[test]
    fn remainder_of_multiple_is_zero() {
        // (s-1)(s^2+4) = s^3 - s^2 + 4s - 4
        let p = MonicPolynomial::new(vec![-1.0, 4.0, -4.0]);
        let d = MonicPolynomial::new(vec![0.0, 4.0]);
        let r = p.remainder(&d);
        assert_eq!(r.len(), 2);
        assert!(r.iter().all(|x| x.abs() < 1e-14));
        let r2 = p.remainder(&MonicPolynomial::new(vec![0.0]));
        assert_abs_diff_eq!(r2[0], -4.0, epsilon = 1e-14);
    }

    #[test]
    fn companion_layout() {
        let p = MonicPolynomial::new(vec![0.0, 3.0]);
        let c = p.companion();
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -3.0, 0.0]));
    }
}
