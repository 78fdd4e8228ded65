//! Exosystem-generated disturbances and the internal-model compensator.
//!
//! A disturbance `d = D ω`, `ω̇ = S ω` is reproduced by the steady-state
//! generator `τ̇ = Φ τ`, `d = Ψ τ`, where `Φ` is the block companion matrix of
//! the minimal polynomial of `S`. The compensator `η̇ = F η + G u`,
//! `u_d = -Ψ η` with Hurwitz `F = Φ + G Ψ` then cancels `d` asymptotically.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::linalg::{self, MonicPolynomial};

/// Real-part margin used for all spectral sign tests in this module.
pub const SPECTRAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExosystemError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("exosystem matrix has an eigenvalue with negative real part ({0:.6})")]
    StableMode(f64),
    #[error("minimal polynomial must have degree at least 1")]
    ZeroDegree,
    #[error("expected {expected} poles, got {got}")]
    PoleCount { expected: usize, got: usize },
    #[error("requested poles are not closed under complex conjugation")]
    NotConjugateClosed,
    #[error("requested pole {0} does not have a negative real part")]
    UnstablePole(Complex64),
    #[error("internal model matrix F is not Hurwitz (max real part {0:.3e})")]
    NotHurwitz(f64),
    #[error("pair (Psi, Phi) is not observable")]
    Unobservable,
}

/// `ω̇ = S ω`, `d = D ω`, `ω(0) = w0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExosystemSpec {
    s: DMatrix<f64>,
    d: DMatrix<f64>,
    w0: DVector<f64>,
}

impl ExosystemSpec {
    /// Validates shapes and rejects modes with negative real part.
    pub fn new(s: DMatrix<f64>, d: DMatrix<f64>, w0: DVector<f64>) -> Result<Self, ExosystemError> {
        let spec = Self::new_unchecked(s, d, w0)?;
        let abscissa_of_negatives = linalg::eigenvalues(&spec.s)
            .iter()
            .map(|z| z.re)
            .fold(f64::INFINITY, f64::min);
        if abscissa_of_negatives < -SPECTRAL_TOL {
            return Err(ExosystemError::StableMode(abscissa_of_negatives));
        }
        Ok(spec)
    }

    /// Shape checks only; decaying modes are accepted.
    pub fn new_unchecked(s: DMatrix<f64>, d: DMatrix<f64>, w0: DVector<f64>) -> Result<Self, ExosystemError> {
        let m = s.nrows();
        if s.ncols() != m || m == 0 {
            return Err(ExosystemError::DimensionMismatch(format!("S is {}x{}", s.nrows(), s.ncols())));
        }
        if d.ncols() != m || d.nrows() == 0 {
            return Err(ExosystemError::DimensionMismatch(format!(
                "D is {}x{} but S is {m}x{m}",
                d.nrows(),
                d.ncols()
            )));
        }
        if w0.len() != m {
            return Err(ExosystemError::DimensionMismatch(format!("w0 has {} entries, S is {m}x{m}", w0.len())));
        }
        Ok(Self { s, d, w0 })
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn w0(&self) -> &DVector<f64> {
        &self.w0
    }

    /// Exosystem state dimension `m`.
    pub fn order(&self) -> usize {
        self.s.nrows()
    }

    /// Disturbance dimension `q`.
    pub fn output_dim(&self) -> usize {
        self.d.nrows()
    }

    /// `D exp(S t) w0`.
    pub fn disturbance(&self, t: f64) -> DVector<f64> {
        &self.d * linalg::expm(&(&self.s * t)) * &self.w0
    }

    /// `col(d(0), ḋ(0), ..., d^{(n-1)}(0))`, each block `D S^k w0`.
    pub fn derivative_stack(&self, n: usize) -> DVector<f64> {
        let q = self.output_dim();
        let mut out = DVector::zeros(n * q);
        let mut w = self.w0.clone();
        for k in 0..n {
            out.rows_mut(k * q, q).copy_from(&(&self.d * &w));
            w = &self.s * w;
        }
        out
    }
}

pub fn disturbance(spec: &ExosystemSpec, t: f64) -> DVector<f64> {
    spec.disturbance(t)
}

/// Lowest-degree monic polynomial annihilating `s`, found by testing the
/// Krylov sequence `I, S, S², ...` (scaled to unit norm) for the first linear
/// dependence.
pub fn minimal_polynomial(s: &DMatrix<f64>) -> MonicPolynomial {
    let m = s.nrows();
    assert_eq!(m, s.ncols(), "minimal polynomial of a non-square matrix");
    let scale = s.norm();
    if scale == 0.0 {
        return MonicPolynomial::new(vec![0.0]);
    }
    let unit = s / scale;
    let mut powers = vec![DMatrix::<f64>::identity(m, m)];
    for k in 1..=m {
        let next = &powers[k - 1] * &unit;
        let basis = DMatrix::from_fn(m * m, k, |row, col| powers[col][row]);
        let target = DVector::from_fn(m * m, |row, _| -next[row]);
        let svd = basis.clone().svd(true, true);
        let c = svd.solve(&target, 1e-12).expect("SVD with both factors");
        let residual = (&basis * &c - &target).norm();
        if residual <= 1e-9 || k == m {
            // c[j] multiplies unit^j; undo the scaling
            let coeffs = (1..=k).map(|l| c[k - l] * scale.powi(l as i32)).collect();
            return MonicPolynomial::new(coeffs);
        }
        powers.push(next);
    }
    unreachable!("Cayley–Hamilton bounds the degree by m")
}

/// Companion-form pair `(Φ, Ψ)` reproducing a disturbance and its
/// derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStateGenerator {
    pub phi: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub n_p: usize,
    pub q: usize,
    pub polynomial: MonicPolynomial,
}

pub fn build_ssg(poly: &MonicPolynomial, q: usize) -> Result<SteadyStateGenerator, ExosystemError> {
    let n_p = poly.degree();
    if n_p == 0 {
        return Err(ExosystemError::ZeroDegree);
    }
    if q == 0 {
        return Err(ExosystemError::DimensionMismatch("q = 0".into()));
    }
    Ok(SteadyStateGenerator {
        phi: linalg::kron_identity(&poly.companion(), q),
        psi: selector(n_p, q),
        n_p,
        q,
        polynomial: poly.clone(),
    })
}

/// `[I_q 0 ... 0]`, `q × q·n`.
fn selector(n: usize, q: usize) -> DMatrix<f64> {
    let mut e1 = DMatrix::zeros(1, n);
    e1[(0, 0)] = 1.0;
    linalg::kron_identity(&e1, q)
}

impl SteadyStateGenerator {
    pub fn dim(&self) -> usize {
        self.n_p * self.q
    }

    pub fn observability_rank(&self) -> usize {
        observability_rank(&self.psi, &self.phi)
    }
}

pub fn observability_rank(psi: &DMatrix<f64>, phi: &DMatrix<f64>) -> usize {
    let n = phi.nrows();
    let rows = psi.nrows();
    let mut obs = DMatrix::zeros(rows * n, n);
    let mut block = psi.clone();
    for k in 0..n {
        obs.view_mut((k * rows, 0), (rows, n)).copy_from(&block);
        block = &block * phi;
    }
    obs.rank(1e-9 * obs.norm().max(1.0))
}

/// Compensator matrices. The state `η` itself lives in the closed-loop state
/// vector.
#[derive(Debug, Clone, PartialEq)]
pub struct InternalModel {
    pub phi: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub q: usize,
}

/// Place the spectrum of `F = Φ + GΨ` at `desired_poles` (each repeated on
/// all `q` channels) by Ackermann's formula on the dual pair.
pub fn design_g(ssg: &SteadyStateGenerator, desired_poles: &[Complex64]) -> Result<InternalModel, ExosystemError> {
    let n = ssg.n_p;
    if desired_poles.len() != n {
        return Err(ExosystemError::PoleCount { expected: n, got: desired_poles.len() });
    }
    for &p in desired_poles {
        if !(p.re < 0.0) {
            return Err(ExosystemError::UnstablePole(p));
        }
        let has_conjugate = desired_poles
            .iter()
            .any(|&o| (o - p.conj()).norm() <= 1e-9 * p.norm().max(1.0));
        if !has_conjugate {
            return Err(ExosystemError::NotConjugateClosed);
        }
    }
    let desired = MonicPolynomial::from_roots(desired_poles);
    let a = ssg.polynomial.companion().transpose();
    let mut ctrb = DMatrix::zeros(n, n);
    let mut col = DVector::zeros(n);
    col[0] = 1.0;
    for k in 0..n {
        ctrb.set_column(k, &col);
        col = &a * col;
    }
    let ctrb_inv = ctrb.try_inverse().ok_or(ExosystemError::Unobservable)?;
    let k_row = ctrb_inv.row(n - 1) * desired.eval_matrix(&a);
    let g_scalar = -k_row.transpose();
    let g = linalg::kron_identity(&DMatrix::from_column_slice(n, 1, g_scalar.as_slice()), ssg.q);
    InternalModel::assemble(ssg.phi.clone(), ssg.psi.clone(), g, ssg.q)
}

impl InternalModel {
    fn assemble(phi: DMatrix<f64>, psi: DMatrix<f64>, g: DMatrix<f64>, q: usize) -> Result<Self, ExosystemError> {
        let f = &phi + &g * &psi;
        let abscissa = linalg::spectral_abscissa(&f);
        if abscissa > -SPECTRAL_TOL {
            return Err(ExosystemError::NotHurwitz(abscissa));
        }
        Ok(Self { phi, psi, g, f, q })
    }

    /// Accept user-listed `F`, `G`; `Ψ = [I_q 0 ...]` and `Φ = F - GΨ`.
    pub fn from_matrices(f: DMatrix<f64>, g: DMatrix<f64>, q: usize) -> Result<Self, ExosystemError> {
        let dim = f.nrows();
        if f.ncols() != dim || dim == 0 || q == 0 || dim % q != 0 || g.nrows() != dim || g.ncols() != q {
            return Err(ExosystemError::DimensionMismatch(format!(
                "F is {}x{}, G is {}x{}, q = {q}",
                f.nrows(),
                f.ncols(),
                g.nrows(),
                g.ncols()
            )));
        }
        let psi = selector(dim / q, q);
        let phi = &f - &g * &psi;
        let abscissa = linalg::spectral_abscissa(&f);
        if abscissa > -SPECTRAL_TOL {
            return Err(ExosystemError::NotHurwitz(abscissa));
        }
        Ok(Self { phi, psi, g, f, q })
    }

    /// [`InternalModel::from_matrices`] without the stability check.
    pub fn from_matrices_unchecked(f: DMatrix<f64>, g: DMatrix<f64>, q: usize) -> Result<Self, ExosystemError> {
        let dim = f.nrows();
        if f.ncols() != dim || dim == 0 || q == 0 || dim % q != 0 || g.nrows() != dim || g.ncols() != q {
            return Err(ExosystemError::DimensionMismatch(format!("F is {}x{}, G is {}x{}, q = {q}", f.nrows(), f.ncols(), g.nrows(), g.ncols())));
        }
        let psi = selector(dim / q, q);
        let phi = &f - &g * &psi;
        Ok(Self { phi, psi, g, f, q })
    }

    pub fn dim(&self) -> usize {
        self.f.nrows()
    }

    /// `η̇ = F η + G u`.
    pub fn rhs(&self, eta: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.f * eta + &self.g * u
    }

    /// Compensating input `u_d = -Ψ η`.
    pub fn output(&self, eta: &DVector<f64>) -> DVector<f64> {
        -(&self.psi * eta)
    }

    /// Whether the compensator's free dynamics `Φ` contain every mode of the
    /// exosystem (the minimal polynomial of `S` divides `det(sI - Φ_block)`).
    pub fn embeds(&self, exo: &ExosystemSpec) -> bool {
        let n = self.dim() / self.q;
        // Φ = Φ_block ⊗ I_q; pick the scalar block from the first channel.
        let block = DMatrix::from_fn(n, n, |i, j| self.phi[(i * self.q, j * self.q)]);
        let chi = linalg::characteristic_polynomial(&block);
        let min_poly = minimal_polynomial(exo.s());
        let scale = chi.coeffs().iter().fold(1.0f64, |m, c| m.max(c.abs()));
        chi.remainder(&min_poly).iter().all(|r| r.abs() <= 1e-8 * scale)
    }
}

pub fn internal_model_rhs(im: &InternalModel, eta: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ExosystemError> {
    if eta.len() != im.dim() || u.len() != im.q {
        return Err(ExosystemError::DimensionMismatch(format!(
            "eta has {} entries (expected {}), u has {} (expected {})",
            eta.len(),
            im.dim(),
            u.len(),
            im.q
        )));
    }
    Ok(im.rhs(eta, u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rot(omega: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, omega, -omega, 0.0])
    }

    #[test]
    fn sinusoid_and_step_disturbances() {
        let exo = ExosystemSpec::new(rot(1.0), DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), DVector::from_vec(vec![1.0, 0.0])).unwrap();
        for &t in &[0.0, 0.5, 2.0, 9.0] {
            assert_abs_diff_eq!(exo.disturbance(t)[0], t.cos(), epsilon = 1e-12);
        }
        let step = ExosystemSpec::new(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 2.5), DVector::from_element(1, 1.0)).unwrap();
        assert_eq!(step.disturbance(17.0)[0], 2.5);
        let silent = ExosystemSpec::new(rot(1.0), DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), DVector::zeros(2)).unwrap();
        assert_eq!(silent.disturbance(3.0)[0], 0.0);
    }

    #[test]
    fn rejects_decaying_modes() {
        let s = DMatrix::from_element(1, 1, -1.0);
        let d = DMatrix::from_element(1, 1, 1.0);
        let w = DVector::from_element(1, 1.0);
        assert!(matches!(ExosystemSpec::new(s.clone(), d.clone(), w.clone()), Err(ExosystemError::StableMode(_))));
        assert!(ExosystemSpec::new_unchecked(s, d, w).is_ok());
    }

    #[test]
    fn minimal_polynomials() {
        let p = minimal_polynomial(&rot(1.0));
        assert_abs_diff_eq!(p.coeffs()[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.coeffs()[1], 1.0, epsilon = 1e-12);

        assert_eq!(minimal_polynomial(&DMatrix::zeros(1, 1)).coeffs(), &[0.0]);

        let mut s4 = DMatrix::zeros(3, 3);
        s4[(0, 0)] = 1.0;
        s4.view_mut((1, 1), (2, 2)).copy_from(&rot(2.0));
        let p4 = minimal_polynomial(&s4);
        for (got, want) in p4.coeffs().iter().zip([-1.0, 4.0, -4.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-9);
        }

        // 2·I has minimal polynomial s - 2, not (s - 2)^2
        let p = minimal_polynomial(&(DMatrix::<f64>::identity(2, 2) * 2.0));
        assert_eq!(p.degree(), 1);
        assert_abs_diff_eq!(p.coeffs()[0], -2.0, epsilon = 1e-12);

        // Jordan block keeps the repeated root
        let jordan = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(minimal_polynomial(&jordan).degree(), 2);
    }

    #[test]
    fn ssg_companion_form() {
        for i in 1..=4 {
            let s = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -(i as f64), 0.0]);
            let ssg = build_ssg(&minimal_polynomial(&s), 1).unwrap();
            let expected = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -(i as f64), 0.0]);
            assert!((&ssg.phi - expected).amax() < 1e-12);
            assert_eq!(ssg.psi, DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
            assert_eq!(ssg.observability_rank(), 2);
        }
        let scalar = build_ssg(&MonicPolynomial::new(vec![0.0]), 1).unwrap();
        assert_eq!(scalar.phi, DMatrix::zeros(1, 1));
        assert_eq!(scalar.psi, DMatrix::identity(1, 1));
        assert!(matches!(build_ssg(&MonicPolynomial::new(vec![]), 1), Err(ExosystemError::ZeroDegree)));
    }

    #[test]
    fn pole_placement_examples() {
        let ssg = build_ssg(&MonicPolynomial::new(vec![0.0, 1.0]), 1).unwrap();
        let im = design_g(&ssg, &[Complex64::new(-1.0, 0.0); 2]).unwrap();
        assert!((&im.g - DMatrix::from_column_slice(2, 1, &[-2.0, 0.0])).amax() < 1e-12);
        assert!((&im.f - DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, -1.0, 0.0])).amax() < 1e-12);

        let ssg1 = build_ssg(&MonicPolynomial::new(vec![0.0]), 1).unwrap();
        let im1 = design_g(&ssg1, &[Complex64::new(-1.0, 0.0)]).unwrap();
        assert_abs_diff_eq!(im1.g[(0, 0)], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(im1.f[(0, 0)], -1.0, epsilon = 1e-14);

        let bad = [Complex64::new(-1.0, 1.0), Complex64::new(-2.0, 0.0)];
        assert!(matches!(design_g(&ssg, &bad), Err(ExosystemError::NotConjugateClosed)));
        let unstable = [Complex64::new(0.5, 0.0), Complex64::new(-2.0, 0.0)];
        assert!(matches!(design_g(&ssg, &unstable), Err(ExosystemError::UnstablePole(_))));
        assert!(matches!(design_g(&ssg, &[Complex64::new(-1.0, 0.0)]), Err(ExosystemError::PoleCount { .. })));
    }

    #[test]
    fn listed_internal_model_recovers_phi() {
        let f = DMatrix::from_row_slice(2, 2, &[-4.0, 1.0, -4.0, 0.0]);
        let g = DMatrix::from_column_slice(2, 1, &[-4.0, -4.0]);
        let im = InternalModel::from_matrices(f, g, 1).unwrap();
        assert_eq!(im.phi, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
        let chi = linalg::characteristic_polynomial(&im.f);
        assert_abs_diff_eq!(chi.coeffs()[0], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(chi.coeffs()[1], 4.0, epsilon = 1e-12);
        for z in linalg::eigenvalues(&im.f) {
            assert!((z - Complex64::new(-2.0, 0.0)).norm() < 1e-6);
        }
        let not_hurwitz = InternalModel::from_matrices(DMatrix::from_element(1, 1, 0.5), DMatrix::from_element(1, 1, 1.0), 1);
        assert!(matches!(not_hurwitz, Err(ExosystemError::NotHurwitz(_))));
    }

    #[test]
    fn embedding_check() {
        let im = InternalModel::from_matrices(
            DMatrix::from_row_slice(2, 2, &[-4.0, 1.0, -4.0, 0.0]),
            DMatrix::from_column_slice(2, 1, &[-4.0, -4.0]),
            1,
        )
        .unwrap();
        let ramp = ExosystemSpec::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_vec(vec![0.3, 0.1]),
        )
        .unwrap();
        let step = ExosystemSpec::new(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 1.0)).unwrap();
        let growing = ExosystemSpec::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 1.0)).unwrap();
        assert!(im.embeds(&ramp));
        assert!(im.embeds(&step));
        assert!(!im.embeds(&growing));
    }

    #[test]
    fn internal_model_rhs_basics() {
        let im = InternalModel::from_matrices(DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, -1.0), 1).unwrap();
        let zero = internal_model_rhs(&im, &DVector::zeros(1), &DVector::zeros(1)).unwrap();
        assert_eq!(zero[0], 0.0);
        assert!(internal_model_rhs(&im, &DVector::zeros(2), &DVector::zeros(1)).is_err());

        let im2 = InternalModel::from_matrices(
            DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, -1.0, 0.0]),
            DMatrix::from_column_slice(2, 1, &[-2.0, 0.0]),
            1,
        )
        .unwrap();
        assert_eq!(im2.output(&DVector::from_vec(vec![3.0, 7.0]))[0], -3.0);
    }
}
