//! Rate lower bound `R(gamma)` for LQG control and the Gaussian test channel
//! that attains it.
//!
//! The bound is the optimum of a log-det program over the posterior
//! covariance `P` and a slack `Pi`:
//!
//! ```text
//! min  -1/2 log det Pi + 1/2 log det W
//! s.t. Tr(Theta P) + Tr(W S) <= gamma
//!      P <= A P A' + W
//!      [P - Pi, P A'; A P, A P A' + W] >= 0
//! ```
//!
//! For scalar plants it has a closed form; otherwise it is solved with a
//! log-barrier interior-point method (see [`solve_rdf_mimo`]).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::control::{
    discrete_lyapunov, min_eigenvalue, solve_control_dare, spectral_radius, sym_inverse, symmetrize,
    ControlSolution, EstimatorGains, PlantModel,
};
use crate::error::{Error, Result};

/// Default channel noise variance; the quantizer step is `sqrt(12 v)`.
pub const DEFAULT_V: f64 = 1.0;

const CLIP_EIG: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RdfSolution {
    /// Optimal posterior covariance.
    pub phat: DMatrix<f64>,
    /// `A Phat A' + W`.
    pub phat_plus: DMatrix<f64>,
    pub pi: DMatrix<f64>,
    /// `1/2 log2(det Phat+ / det Phat)`, bits per step.
    pub rate_bits: f64,
    pub gamma: f64,
    pub control: ControlSolution,
    pub v: f64,
    /// Quantizer step `sqrt(12 v)`.
    pub delta: f64,
    /// `None` when the optimum needs no measurement (zero rate).
    pub channel: Option<EstimatorGains>,
}

impl RdfSolution {
    /// `Tr(SW) + Tr(Theta Phat)`: LQG cost achieved by the test channel.
    pub fn control_cost(&self) -> f64 {
        self.control.min_cost + (&self.control.theta * &self.phat).trace()
    }

    fn assemble(
        plant: &PlantModel,
        control: ControlSolution,
        phat: DMatrix<f64>,
        pi: DMatrix<f64>,
        v: f64,
    ) -> Result<Self> {
        let phat = symmetrize(&phat);
        let phat_plus = symmetrize(&(&plant.a * &phat * plant.a.transpose() + &plant.w));
        let rate_bits = rate_from_phat(&phat, &phat_plus);
        let channel = match extract_test_channel(plant, &phat, v) {
            Ok(g) => Some(g),
            Err(Error::DegenerateChannel) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            phat,
            phat_plus,
            pi,
            rate_bits,
            gamma: plant.gamma,
            control,
            v,
            delta: (12.0 * v).sqrt(),
            channel,
        })
    }
}

/// `max(0, 1/2 log2(det P+ / det P))`.
pub fn rate_from_phat(phat: &DMatrix<f64>, phat_plus: &DMatrix<f64>) -> f64 {
    let r = 0.5 * (log_det(phat_plus) - log_det(phat)) / std::f64::consts::LN_2;
    r.max(0.0)
}

fn log_det(m: &DMatrix<f64>) -> f64 {
    match m.clone().cholesky() {
        Some(ch) => 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        None => m.determinant().ln(),
    }
}

fn check_budget(plant: &PlantModel, control: &ControlSolution) -> Result<()> {
    if !(plant.gamma > control.min_cost) {
        return Err(Error::InfeasibleBudget { gamma: plant.gamma, min_cost: control.min_cost });
    }
    Ok(())
}

/// Closed-form optimum for a scalar plant.
pub fn solve_rdf_siso(plant: &PlantModel, v: f64) -> Result<RdfSolution> {
    if plant.state_dim() != 1 || plant.input_dim() != 1 {
        return Err(Error::InvalidModel("closed form requires a scalar plant".into()));
    }
    check_v(v)?;
    let control = solve_control_dare(plant)?;
    check_budget(plant, &control)?;
    let a = plant.a[(0, 0)];
    let w = plant.w[(0, 0)];
    let theta = control.theta[(0, 0)];

    let mut p = if theta > 0.0 { (plant.gamma - control.min_cost) / theta } else { f64::INFINITY };
    if a.abs() < 1.0 {
        p = p.min(w / (1.0 - a * a));
    }
    let pi = p * w / (a * a * p + w);
    let one = |x| DMatrix::from_element(1, 1, x);
    RdfSolution::assemble(plant, control, one(p), one(pi), v)
}

/// Options for the barrier solver.
#[derive(Debug, Clone, Copy)]
pub struct BarrierOptions {
    /// Stop once the barrier duality-gap bound `theta / t` is below this.
    pub gap_tol: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Barrier parameter multiplier per outer stage.
    pub mu: f64,
    pub newton_tol: f64,
    pub max_newton: usize,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self { gap_tol: 1e-9, alpha: 0.3, beta: 0.8, mu: 10.0, newton_tol: 1e-12, max_newton: 200 }
    }
}

/// Log-barrier interior-point solution of the log-det program for any `m`.
pub fn solve_rdf_mimo(plant: &PlantModel, v: f64) -> Result<RdfSolution> {
    solve_rdf_mimo_with(plant, v, BarrierOptions::default())
}

pub fn solve_rdf_mimo_with(plant: &PlantModel, v: f64, opts: BarrierOptions) -> Result<RdfSolution> {
    check_v(v)?;
    let control = solve_control_dare(plant)?;
    check_budget(plant, &control)?;

    // Stable plant whose open-loop error covariance already meets the budget:
    // no information is needed.
    if spectral_radius(&plant.a) < 1.0 {
        if let Some(p_ol) = discrete_lyapunov(&plant.a, &plant.w) {
            if control.min_cost + (&control.theta * &p_ol).trace() <= plant.gamma {
                let pi = schur_complement(plant, &p_ol);
                return RdfSolution::assemble(plant, control, p_ol, pi, v);
            }
        }
    }

    let problem = LogDetProgram::new(plant, &control);
    let (p, pi) = problem.solve(&opts)?;
    RdfSolution::assemble(plant, control, p, pi, v)
}

fn check_v(v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidModel(format!("channel noise variance must be positive, got {v}")))
    }
}

/// `P - P A'(A P A' + W)^{-1} A P`.
pub fn schur_complement(plant: &PlantModel, p: &DMatrix<f64>) -> DMatrix<f64> {
    let ap = &plant.a * p;
    let plus = &ap * plant.a.transpose() + &plant.w;
    symmetrize(&(p - ap.transpose() * sym_inverse(&plus) * &ap))
}

/// Factorizes `Phat^{-1} - (A Phat A' + W)^{-1} = C' C / v` and builds the
/// corresponding steady-state filter.
pub fn extract_test_channel(plant: &PlantModel, phat: &DMatrix<f64>, v: f64) -> Result<EstimatorGains> {
    check_v(v)?;
    let phat_plus = symmetrize(&(&plant.a * phat * plant.a.transpose() + &plant.w));
    let pinv = sym_inverse(phat);
    let info = symmetrize(&(&pinv - sym_inverse(&phat_plus)));
    let eig = SymmetricEigen::new(info);
    let scale = pinv.norm().max(1.0);
    let lambda = eig.eigenvalues.map(|l| if l < CLIP_EIG { 0.0 } else { l });
    if lambda.max() <= CLIP_EIG * scale {
        return Err(Error::DegenerateChannel);
    }
    let m = plant.state_dim();
    let mut c = eig.eigenvectors.transpose();
    for i in 0..m {
        // sign convention: largest-magnitude entry of each row is positive
        let pivot = c.row(i).iter().copied().fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc });
        let f = (v * lambda[i]).sqrt() * if pivot < 0.0 { -1.0 } else { 1.0 };
        c.row_mut(i).scale_mut(f);
    }
    Ok(EstimatorGains::from_channel(plant, c, v, phat_plus))
}

/// Affine symmetric-matrix function `G(x) = G0 + sum_k x_k G_k`.
struct AffineLmi {
    base: DMatrix<f64>,
    terms: Vec<(usize, DMatrix<f64>)>,
    weight_by_t: bool,
}

impl AffineLmi {
    fn eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut g = self.base.clone();
        for (k, gk) in &self.terms {
            g += gk * x[*k];
        }
        g
    }
}

struct LogDetProgram {
    m: usize,
    nvars: usize,
    blocks: Vec<AffineLmi>,
    basis: Vec<DMatrix<f64>>,
    start: (DMatrix<f64>, DMatrix<f64>),
    degree: f64,
}

impl LogDetProgram {
    fn new(plant: &PlantModel, control: &ControlSolution) -> Self {
        let m = plant.state_dim();
        let a = &plant.a;
        let w = &plant.w;
        let basis = sym_basis(m);
        let n = basis.len();
        let zero = DMatrix::<f64>::zeros(m, m);

        // Tr(Theta P) + Tr(WS) <= gamma
        let budget = AffineLmi {
            base: DMatrix::from_element(1, 1, plant.gamma - control.min_cost),
            terms: basis
                .iter()
                .enumerate()
                .map(|(k, e)| (k, DMatrix::from_element(1, 1, -(&control.theta * e).trace())))
                .collect(),
            weight_by_t: false,
        };
        // A P A' + W - P >= 0
        let growth = AffineLmi {
            base: w.clone(),
            terms: basis.iter().enumerate().map(|(k, e)| (k, a * e * a.transpose() - e)).collect(),
            weight_by_t: false,
        };
        // [P - Pi, P A'; A P, A P A' + W] >= 0
        let mut schur_base = DMatrix::<f64>::zeros(2 * m, 2 * m);
        schur_base.view_mut((m, m), (m, m)).copy_from(w);
        let mut schur_terms = Vec::with_capacity(2 * n);
        for (k, e) in basis.iter().enumerate() {
            let mut g = DMatrix::<f64>::zeros(2 * m, 2 * m);
            g.view_mut((0, 0), (m, m)).copy_from(e);
            g.view_mut((0, m), (m, m)).copy_from(&(e * a.transpose()));
            g.view_mut((m, 0), (m, m)).copy_from(&(a * e));
            g.view_mut((m, m), (m, m)).copy_from(&(a * e * a.transpose()));
            schur_terms.push((k, g));
        }
        for (k, e) in basis.iter().enumerate() {
            let mut g = DMatrix::<f64>::zeros(2 * m, 2 * m);
            g.view_mut((0, 0), (m, m)).copy_from(&(-e));
            schur_terms.push((n + k, g));
        }
        let schur = AffineLmi { base: schur_base, terms: schur_terms, weight_by_t: false };
        // objective: -log det Pi
        let objective = AffineLmi {
            base: zero,
            terms: basis.iter().enumerate().map(|(k, e)| (n + k, e.clone())).collect(),
            weight_by_t: true,
        };

        // Strictly feasible start: P = tau I inside both the budget and the
        // growth constraint, Pi = half the Schur complement.
        let tr_theta = control.theta.trace();
        let tau_budget =
            if tr_theta > 0.0 { 0.5 * (plant.gamma - control.min_cost) / tr_theta } else { f64::INFINITY };
        let shrink = DMatrix::<f64>::identity(m, m) - a * a.transpose();
        let shrink_max = -min_eigenvalue(&(-shrink));
        let tau_growth =
            if shrink_max > 0.0 { 0.5 * min_eigenvalue(w) / shrink_max } else { f64::INFINITY };
        let tau = tau_budget.min(tau_growth).min(1e6);
        let p0 = DMatrix::<f64>::identity(m, m) * tau;
        let pi0 = schur_complement(plant, &p0) * 0.5;

        Self {
            m,
            nvars: 2 * n,
            blocks: vec![budget, growth, schur, objective],
            basis,
            start: (p0, pi0),
            degree: 1.0 + 3.0 * m as f64,
        }
    }

    fn pack(&self, p: &DMatrix<f64>, pi: &DMatrix<f64>) -> DVector<f64> {
        let n = self.basis.len();
        let mut x = DVector::zeros(self.nvars);
        let mut k = 0;
        for i in 0..self.m {
            for j in i..self.m {
                x[k] = p[(i, j)];
                x[n + k] = pi[(i, j)];
                k += 1;
            }
        }
        x
    }

    fn unpack(&self, x: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.basis.len();
        let mut p = DMatrix::zeros(self.m, self.m);
        let mut pi = DMatrix::zeros(self.m, self.m);
        for (k, e) in self.basis.iter().enumerate() {
            p += e * x[k];
            pi += e * x[n + k];
        }
        (p, pi)
    }

    /// Barrier value `t f0 + phi`, or `None` outside the interior.
    fn value(&self, x: &DVector<f64>, t: f64) -> Option<f64> {
        let mut total = 0.0;
        for b in &self.blocks {
            let ch = b.eval(x).cholesky()?;
            let ld: f64 = ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            if !ld.is_finite() {
                return None;
            }
            total -= if b.weight_by_t { t * ld } else { ld };
        }
        Some(total)
    }

    fn grad_hess(&self, x: &DVector<f64>, t: f64) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let mut grad = DVector::zeros(self.nvars);
        let mut hess = DMatrix::zeros(self.nvars, self.nvars);
        for b in &self.blocks {
            let g = b.eval(x);
            let ginv = g.cholesky()?.inverse();
            let wgt = if b.weight_by_t { t } else { 1.0 };
            let prods: Vec<(usize, DMatrix<f64>)> =
                b.terms.iter().map(|(k, gk)| (*k, &ginv * gk)).collect();
            for (i, (ki, hi)) in prods.iter().enumerate() {
                grad[*ki] -= wgt * hi.trace();
                for (kj, hj) in prods.iter().skip(i) {
                    let tr = hi.component_mul(&hj.transpose()).sum();
                    hess[(*ki, *kj)] += wgt * tr;
                    if ki != kj {
                        hess[(*kj, *ki)] += wgt * tr;
                    }
                }
            }
        }
        Some((grad, hess))
    }

    fn solve(&self, opts: &BarrierOptions) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let mut x = self.pack(&self.start.0, &self.start.1);
        if self.value(&x, 1.0).is_none() {
            return Err(Error::NumericalFailure("starting point is not strictly feasible".into()));
        }
        let mut t = 1.0;
        loop {
            self.center(&mut x, t, opts)?;
            if self.degree / t < opts.gap_tol {
                break;
            }
            t *= opts.mu;
        }
        Ok(self.unpack(&x))
    }

    fn center(&self, x: &mut DVector<f64>, t: f64, opts: &BarrierOptions) -> Result<()> {
        for _ in 0..opts.max_newton {
            let (g, h) = self
                .grad_hess(x, t)
                .ok_or_else(|| Error::NumericalFailure(format!("left the interior at t = {t:e}")))?;
            let dx = match h.clone().cholesky() {
                Some(ch) => -ch.solve(&g),
                None => -h
                    .lu()
                    .solve(&g)
                    .ok_or_else(|| Error::NumericalFailure(format!("singular Newton system at t = {t:e}")))?,
            };
            let slope = g.dot(&dx);
            let decrement = -slope;
            if decrement * 0.5 <= opts.newton_tol {
                return Ok(());
            }
            let f0 = self.value(x, t).expect("iterate is interior");
            let mut s = 1.0;
            loop {
                let trial = &*x + &dx * s;
                if let Some(f) = self.value(&trial, t) {
                    if f <= f0 + opts.alpha * s * slope {
                        *x = trial;
                        break;
                    }
                }
                s *= opts.beta;
                if s < 1e-20 {
                    // Newton decrement is at round-off level; accept the point.
                    if decrement < 1e-8 {
                        return Ok(());
                    }
                    return Err(Error::NumericalFailure(format!(
                        "line search stalled at t = {t:e}, Newton decrement {decrement:e}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn sym_basis(m: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(m * (m + 1) / 2);
    for i in 0..m {
        for j in i..m {
            let mut e = DMatrix::zeros(m, m);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            out.push(e);
        }
    }
    out
}

/// Both sides of `det(C P+ C' + V) = det(P+) det(V) / det(Phat)`, with the
/// optimizer's `Phat` and the extracted channel. `None` at zero rate.
pub fn determinant_identity(sol: &RdfSolution) -> Option<(f64, f64)> {
    let g = sol.channel.as_ref()?;
    let lhs = (&g.c * &sol.phat_plus * g.c.transpose() + g.v_matrix()).determinant();
    let rhs = sol.phat_plus.determinant() * g.v_matrix().determinant() / sol.phat.determinant();
    Some((lhs, rhs))
}
