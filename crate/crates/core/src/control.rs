//! Plant model, LQR Riccati solution and steady-state estimator gains.
//!
//! Everything here is dense and small (a handful of states), so the Riccati
//! equation is solved by plain fixed-point iteration of the Riccati map.

use nalgebra::{Complex, DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

const DARE_REL_TOL: f64 = 1e-12;
const DARE_MAX_ITER: usize = 1_000_000;
const PBH_RANK_TOL: f64 = 1e-10;

/// Linear plant `x' = A x + B u + w` with Gaussian noise and quadratic cost.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Process-noise covariance, strictly positive definite.
    pub w: DMatrix<f64>,
    /// Initial-state covariance.
    pub x0: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Tolerated time-average LQG cost.
    pub gamma: f64,
}

impl PlantModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        w: DMatrix<f64>,
        x0: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let m = a.nrows();
        if m == 0 || !a.is_square() {
            return Err(Error::InvalidModel(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != m || b.ncols() == 0 {
            return Err(Error::InvalidModel(format!(
                "B must have {m} rows and at least one column, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        let u = b.ncols();
        for (name, mat, n) in [("W", &w, m), ("X0", &x0, m), ("Q", &q, m), ("R", &r, u)] {
            if mat.nrows() != n || mat.ncols() != n {
                return Err(Error::InvalidModel(format!(
                    "{name} must be {n}x{n}, got {}x{}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
            if !is_symmetric(mat) {
                return Err(Error::InvalidModel(format!("{name} is not symmetric")));
            }
        }
        let all = [&a, &b, &w, &x0, &q, &r];
        if all.iter().any(|m| m.iter().any(|v| !v.is_finite())) || !gamma.is_finite() {
            return Err(Error::InvalidModel("non-finite entry".into()));
        }
        if w.clone().cholesky().is_none() {
            return Err(Error::InvalidModel("W must be positive definite".into()));
        }
        if r.clone().cholesky().is_none() {
            return Err(Error::InvalidModel("R must be positive definite".into()));
        }
        for (name, mat) in [("Q", &q), ("X0", &x0)] {
            if min_eigenvalue(mat) < -1e-12 * (1.0 + mat.norm()) {
                return Err(Error::InvalidModel(format!("{name} must be positive semidefinite")));
            }
        }
        if !is_stabilizable(&a, &b) {
            return Err(Error::NonStabilizable(
                "PBH test failed on an eigenvalue with |lambda| >= 1".into(),
            ));
        }
        Ok(Self { a, b, w, x0, q, r, gamma })
    }

    /// Single-state, single-input plant.
    pub fn scalar(a: f64, b: f64, w: f64, x0: f64, q: f64, r: f64, gamma: f64) -> Result<Self> {
        let s = |v| DMatrix::from_element(1, 1, v);
        Self::new(s(a), s(b), s(w), s(x0), s(q), s(r), gamma)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self { gamma, ..self.clone() }
    }
}

/// Stabilizing solution of the control Riccati equation and derived gains.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSolution {
    pub s: DMatrix<f64>,
    /// `u = K x`, with `K = -(B'SB + R)^{-1} B'SA`.
    pub k: DMatrix<f64>,
    /// `K'(B'SB + R)K`, the cost weight on the estimation error.
    pub theta: DMatrix<f64>,
    /// `Tr(SW)`, the cost with perfect state information.
    pub min_cost: f64,
}

/// Measurement channel `y = Cx + v`, `v ~ (0, vI)`, and the steady-state
/// Kalman filter it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorGains {
    pub c: DMatrix<f64>,
    /// Measurement noise variance; the covariance is `v I`.
    pub v: f64,
    /// Kalman gain `P+ C'(C P+ C' + V)^{-1}`.
    pub j: DMatrix<f64>,
    /// `A J`.
    pub l: DMatrix<f64>,
    /// Closed-loop prediction-error dynamics `A - L C`.
    pub rcl: DMatrix<f64>,
    pub phat: DMatrix<f64>,
    pub phat_plus: DMatrix<f64>,
}

impl EstimatorGains {
    /// Builds the steady-state filter for a channel `C` with noise `vI`,
    /// given the prior covariance `P+` it should run at.
    pub fn from_channel(plant: &PlantModel, c: DMatrix<f64>, v: f64, phat_plus: DMatrix<f64>) -> Self {
        let m = plant.state_dim();
        let innov = &c * &phat_plus * c.transpose() + DMatrix::identity(c.nrows(), c.nrows()) * v;
        let innov_inv = sym_inverse(&innov);
        let j = &phat_plus * c.transpose() * innov_inv;
        let l = &plant.a * &j;
        let rcl = &plant.a - &l * &c;
        let phat = symmetrize(&((DMatrix::identity(m, m) - &j * &c) * &phat_plus));
        Self { c, v, j, l, rcl, phat, phat_plus }
    }

    /// Quantizer step matching the channel noise, `sqrt(12 v)`.
    pub fn delta(&self) -> f64 {
        (12.0 * self.v).sqrt()
    }

    pub fn v_matrix(&self) -> DMatrix<f64> {
        DMatrix::identity(self.c.nrows(), self.c.nrows()) * self.v
    }
}

pub fn solve_control_dare(plant: &PlantModel) -> Result<ControlSolution> {
    let (a, b, q, r) = (&plant.a, &plant.b, &plant.q, &plant.r);
    let m = plant.state_dim();
    let at = a.transpose();
    let bt = b.transpose();

    // Starting above Q keeps the iteration away from non-stabilizing
    // solutions when (A, Q^{1/2}) has unobservable unstable modes.
    let mut s = q + DMatrix::identity(m, m);
    let mut converged = false;
    for _ in 0..DARE_MAX_ITER {
        let next = riccati_map(&s, a, &at, b, &bt, q, r)?;
        let step = (&next - &s).norm();
        s = next;
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::NonStabilizable("Riccati iteration diverged".into()));
        }
        if step <= DARE_REL_TOL * (1.0 + s.norm()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonStabilizable("Riccati iteration did not converge".into()));
    }

    let gram = &bt * &s * b + r;
    let gram_inv = sym_inverse(&gram);
    let k = -(&gram_inv * &bt * &s * a);
    let closed = a + b * &k;
    let rho = spectral_radius(&closed);
    if rho >= 1.0 {
        return Err(Error::NonStabilizable(format!("rho(A + BK) = {rho}")));
    }
    let theta = symmetrize(&(k.transpose() * &gram * &k));
    let min_cost = (&s * &plant.w).trace();
    Ok(ControlSolution { s, k, theta, min_cost })
}

fn riccati_map(
    s: &DMatrix<f64>,
    a: &DMatrix<f64>,
    at: &DMatrix<f64>,
    b: &DMatrix<f64>,
    bt: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let sa = s * a;
    let gram = bt * s * b + r;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::NonStabilizable("B'SB + R lost definiteness".into()))?;
    let bsa = bt * &sa;
    let next = at * &sa - (bsa.transpose() * chol.solve(&bsa)) + q;
    Ok(symmetrize(&next))
}

/// Control DARE residual `A'SA - S - A'SB(B'SB+R)^{-1}B'SA + Q`.
pub fn dare_residual(plant: &PlantModel, s: &DMatrix<f64>) -> DMatrix<f64> {
    let (a, b) = (&plant.a, &plant.b);
    let sa = s * a;
    let bsa = b.transpose() * &sa;
    let gram = b.transpose() * s * b + &plant.r;
    a.transpose() * &sa - s - bsa.transpose() * sym_inverse(&gram) * &bsa + &plant.q
}

/// Prior error covariances `P_{t|t-1}`, `t = 0..=steps`, of the optimal
/// time-varying Kalman filter started at `X0`.
pub fn filter_prior_sequence(plant: &PlantModel, gains: &EstimatorGains, steps: usize) -> Vec<DMatrix<f64>> {
    let c = &gains.c;
    let v = gains.v_matrix();
    let mut out = Vec::with_capacity(steps + 1);
    let mut p = plant.x0.clone();
    out.push(p.clone());
    for _ in 0..steps {
        let innov = c * &p * c.transpose() + &v;
        let pc = &p * c.transpose();
        let post = &p - &pc * sym_inverse(&innov) * pc.transpose();
        p = symmetrize(&(&plant.a * post * plant.a.transpose() + &plant.w));
        out.push(p.clone());
    }
    out
}

/// One step of the prediction-error covariance under the fixed steady-state
/// gain: `P' = R P R' + L V L' + W`.
pub fn fixed_gain_prior_step(plant: &PlantModel, gains: &EstimatorGains, p: &DMatrix<f64>) -> DMatrix<f64> {
    let lvl = &gains.l * gains.l.transpose() * gains.v;
    symmetrize(&(&gains.rcl * p * gains.rcl.transpose() + lvl + &plant.w))
}

/// PBH test on every eigenvalue with modulus at least one.
pub fn is_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let m = a.nrows();
    let u = b.ncols();
    for lambda in a.complex_eigenvalues().iter() {
        if lambda.norm() < 1.0 {
            continue;
        }
        let mut pbh = DMatrix::<Complex<f64>>::zeros(m, m + u);
        for i in 0..m {
            for j in 0..m {
                pbh[(i, j)] = Complex::new(a[(i, j)], 0.0);
            }
            pbh[(i, i)] -= lambda;
            for j in 0..u {
                pbh[(i, m + j)] = Complex::new(b[(i, j)], 0.0);
            }
        }
        let sv = pbh.singular_values();
        let max = sv.max();
        let min = sv.min();
        if min <= PBH_RANK_TOL * max.max(1.0) {
            return false;
        }
    }
    true
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Solves `P = A P A' + W` for stable `A` via the Kronecker form.
pub fn discrete_lyapunov(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let m = a.nrows();
    let kron = a.kronecker(a);
    let lhs = DMatrix::identity(m * m, m * m) - kron;
    let rhs = nalgebra::DVector::from_column_slice(w.as_slice());
    let sol = lhs.lu().solve(&rhs)?;
    Some(symmetrize(&DMatrix::from_column_slice(m, m, sol.as_slice())))
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn is_symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && (m - m.transpose()).norm() <= 1e-12 * (1.0 + m.norm())
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

/// Inverse of a symmetric positive definite matrix, falling back to LU.
pub(crate) fn sym_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    match m.clone().cholesky() {
        Some(ch) => symmetrize(&ch.inverse()),
        None => m.clone().try_inverse().expect("singular matrix"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ref1() -> PlantModel {
        PlantModel::scalar(2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 5.6068884).unwrap()
    }

    // Scalar DARE reduces to s^2 - 4s - 1 = 0 for a=2, b=q=r=1.
    #[test]
    fn scalar_dare_matches_quadratic_root() {
        let sol = solve_control_dare(&ref1()).unwrap();
        let s = 2.0 + 5f64.sqrt();
        assert!((sol.s[(0, 0)] - s).abs() < 1e-9);
        // k = -2s/(s+1), theta = k^2 (s+1)
        let k = -2.0 * s / (s + 1.0);
        assert!((sol.k[(0, 0)] - k).abs() < 1e-9);
        assert!((sol.k[(0, 0)] + 1.6180340).abs() < 1e-7);
        assert!((sol.theta[(0, 0)] - k * k * (s + 1.0)).abs() < 1e-9);
        assert!((sol.theta[(0, 0)] - 13.7082039).abs() < 1e-6);
        assert!((sol.min_cost - s).abs() < 1e-9);
    }

    #[test]
    fn zero_dynamics_give_s_equal_q() {
        let p = PlantModel::scalar(0.0, 3.0, 1.0, 1.0, 1.0, 1.0, 10.0).unwrap();
        let sol = solve_control_dare(&p).unwrap();
        assert!((sol.s[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(sol.k[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn unobservable_unstable_mode_still_stabilized() {
        // q = 0: the DARE has roots 0 and 3; only s = 3 stabilizes.
        let p = PlantModel::scalar(2.0, 1.0, 1.0, 1.0, 0.0, 1.0, 10.0).unwrap();
        let sol = solve_control_dare(&p).unwrap();
        assert!((sol.s[(0, 0)] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn two_state_residual_and_stability() {
        let a = DMatrix::from_row_slice(2, 2, &[0.3, 0.2, -0.1, 0.5]);
        let i = DMatrix::<f64>::identity(2, 2);
        let p = PlantModel::new(a, i.clone(), i.clone(), i.clone(), i.clone(), i, 10.0).unwrap();
        let sol = solve_control_dare(&p).unwrap();
        let res = dare_residual(&p, &sol.s).norm();
        assert!(res <= 1e-9 * (1.0 + sol.s.norm()), "residual {res}");
        assert!(spectral_radius(&(&p.a + &p.b * &sol.k)) < 1.0);
    }

    #[test]
    fn uncontrollable_unstable_mode_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let i = DMatrix::<f64>::identity(2, 2);
        let err = PlantModel::new(a, b, i.clone(), i.clone(), i, DMatrix::identity(1, 1), 1.0);
        assert!(matches!(err, Err(Error::NonStabilizable(_))));
    }

    #[test]
    fn singular_noise_is_rejected() {
        let err = PlantModel::scalar(1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0);
        assert!(matches!(err, Err(Error::InvalidModel(_))));
    }

    #[test]
    fn riccati_sequence_from_zero_prior() {
        let plant = PlantModel::scalar(2.0, 1.0, 1.0, 0.0, 1.0, 1.0, 5.6068884).unwrap();
        let c = DMatrix::from_element(1, 1, 3.0);
        let gains = EstimatorGains::from_channel(&plant, c, 1.0, DMatrix::from_element(1, 1, 1.4));
        let seq = filter_prior_sequence(&plant, &gains, 3);
        assert_eq!(seq[0][(0, 0)], 0.0);
        assert!((seq[1][(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lyapunov_scalar() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let w = DMatrix::from_element(1, 1, 1.0);
        let p = discrete_lyapunov(&a, &w).unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
    }
}
