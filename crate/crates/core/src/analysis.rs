//! Numerical certification: operator constants and step-size bounds, KKT
//! residuals, the regularization gap, tracking bounds and violation counts.

use std::collections::BTreeMap;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::control::{
    constraint_pullback, cvar_evaluate, voltage_constraint, AlgorithmState, ControlError, ControlProblem,
    CvarSubgradients, Mode, StaticProblem, StepSizes,
};
use crate::devices::DerCapability;
use crate::estimation::{se_gradient, se_hessian, wls_closed_form};
use crate::network::InjectionVector;
use crate::sensing::{MeasurementSnapshot, ScenarioSet, SensingError, SimRng};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("need at least {min} sample pairs, got {got}")]
    TooFewPairs { min: usize, got: usize },
    #[error("sampler produced only coincident pairs")]
    DegenerateSampler,
    #[error("{0} did not converge")]
    NoConvergence(&'static str),
    #[error("trajectory has {traj} states but {refs} references")]
    Misaligned { traj: usize, refs: usize },
    #[error("empty voltage history")]
    EmptyHistory,
    #[error("QP oracle failed: {0}")]
    Qp(String),
    #[error(transparent)]
    Sensing(#[from] SensingError),
    #[error("{0} requires stochastic mode")]
    NeedsStochastic(&'static str),
}

pub const MIN_PAIRS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorConstants {
    pub m_hat: f64,
    pub l_hat: f64,
    pub n_pairs: usize,
    pub min_ratio_witness: (DVector<f64>, DVector<f64>),
    /// Exact `(m, L)` when the operator is affine and its matrix is known.
    pub exact: Option<(f64, f64)>,
}

impl OperatorConstants {
    /// Exact values when present, sampled otherwise.
    pub fn best(&self) -> (f64, f64) {
        self.exact.unwrap_or((self.m_hat, self.l_hat))
    }
}

/// Sampled strong-monotonicity and Lipschitz constants of `op` over pairs
/// drawn by `sampler`. Coincident pairs are redrawn.
pub fn estimate_constants<F, S>(
    op: F,
    mut sampler: S,
    n_pairs: usize,
    rng: &mut SimRng,
) -> Result<OperatorConstants, AnalysisError>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    S: FnMut(&mut SimRng) -> (DVector<f64>, DVector<f64>),
{
    if n_pairs < MIN_PAIRS {
        return Err(AnalysisError::TooFewPairs { min: MIN_PAIRS, got: n_pairs });
    }
    let mut m_hat = f64::INFINITY;
    let mut l_hat: f64 = 0.0;
    let mut witness = None;
    let mut taken = 0;
    let mut rejected = 0;
    while taken < n_pairs {
        let (a, b) = sampler(rng);
        let d = &a - &b;
        let dd = d.norm_squared();
        if !(dd > 0.0) {
            rejected += 1;
            if rejected > 10 * n_pairs {
                return Err(AnalysisError::DegenerateSampler);
            }
            continue;
        }
        let df = op(&a) - op(&b);
        let ratio = df.dot(&d) / dd;
        if ratio < m_hat {
            m_hat = ratio;
            witness = Some((a.clone(), b.clone()));
        }
        l_hat = l_hat.max(df.norm() / dd.sqrt());
        taken += 1;
    }
    Ok(OperatorConstants { m_hat, l_hat, n_pairs, min_ratio_witness: witness.expect("n_pairs > 0"), exact: None })
}

/// `(lambda_min(sym A), sigma_max(A))`
pub fn exact_constants(a: &DMatrix<f64>) -> (f64, f64) {
    let sym = (a + a.transpose()) * 0.5;
    let m = sym.symmetric_eigenvalues().min();
    let l = a.clone().singular_values().max();
    (m, l)
}

/// `2 m / L^2`, zero when there is no monotonicity margin.
pub fn max_step_size(c: &OperatorConstants) -> f64 {
    let (m, l) = c.best();
    if m <= 0.0 {
        0.0
    } else {
        2.0 * m / (l * l)
    }
}

/// Contraction factor `sqrt(1 - 2 eps m + eps^2 L^2)`.
pub fn contraction_factor(m: f64, l: f64, eps: f64) -> f64 {
    (1.0 - 2.0 * eps * m + eps * eps * l * l).max(0.0).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub measured: f64,
    pub bound: f64,
    pub satisfied: bool,
    pub ingredients: BTreeMap<String, f64>,
}

impl BoundReport {
    pub fn new(measured: f64, bound: f64, ingredients: &[(&str, f64)]) -> Self {
        Self {
            measured,
            bound,
            satisfied: measured <= bound * (1.0 + 1e-9),
            ingredients: ingredients.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    /// `prefix.key=value` lines.
    pub fn key_values(&self, prefix: &str) -> Vec<String> {
        let mut out = vec![
            format!("{prefix}.measured={:.12e}", self.measured),
            format!("{prefix}.bound={:.12e}", self.bound),
            format!("{prefix}.satisfied={}", self.satisfied),
        ];
        out.extend(self.ingredients.iter().map(|(k, v)| format!("{prefix}.{k}={v:.12e}")));
        out
    }
}

/// Fixed-point residual `||s - step(s)||_inf` of the online iteration.
pub fn kkt_residual(s: &AlgorithmState, problem: &StaticProblem, steps: &StepSizes) -> Result<f64, AnalysisError> {
    Ok(problem.step(s, steps)?.distance_inf(s))
}

/// Frozen instance for the theory checks. The constraint rows read the
/// voltages produced by `u + loads`; measurements are fixed, so the
/// estimate block decouples from the control blocks.
#[derive(Debug, Clone)]
pub struct TheoryProblem {
    pub control: ControlProblem,
    pub meas: MeasurementSnapshot,
    pub loads: InjectionVector,
    pub mode: Mode,
    pub phi: f64,
    pub nu: f64,
}

impl TheoryProblem {
    pub fn n(&self) -> usize {
        self.control.n()
    }

    fn stochastic(&self) -> bool {
        matches!(self.mode, Mode::Stochastic(_))
    }

    /// Length of the packed iterate: `[u; dual; z]`, with `tau` after `u` in stochastic mode.
    pub fn dim(&self) -> usize {
        if self.stochastic() {
            8 * self.n()
        } else {
            6 * self.n()
        }
    }

    pub fn pack(&self, s: &AlgorithmState) -> DVector<f64> {
        let mut parts: Vec<&DVector<f64>> = vec![&s.u];
        if self.stochastic() {
            parts.push(&s.tau);
        }
        parts.push(&s.dual);
        parts.push(&s.z);
        let mut out = DVector::zeros(self.dim());
        let mut off = 0;
        for p in parts {
            out.rows_mut(off, p.len()).copy_from(p);
            off += p.len();
        }
        out
    }

    pub fn unpack(&self, e: &DVector<f64>) -> AlgorithmState {
        let k = 2 * self.n();
        let mut s = AlgorithmState::zeros(self.n());
        let mut off = 0;
        let mut take = |dst: &mut DVector<f64>| {
            dst.copy_from(&e.rows(off, k));
            off += k;
        };
        take(&mut s.u);
        if self.stochastic() {
            take(&mut s.tau);
        }
        take(&mut s.dual);
        take(&mut s.z);
        s
    }

    pub fn voltages(&self, u: &DVector<f64>) -> DVector<f64> {
        let inj = InjectionVector::from_stacked(u).add(&self.loads);
        self.control.model.predict_stacked(&inj.stacked())
    }

    /// Unprojected operator blocks, returned in state layout.
    pub fn operator(&self, s: &AlgorithmState) -> Result<AlgorithmState, AnalysisError> {
        let prob = &self.control;
        let v = self.voltages(&s.u);
        let z = se_gradient(&s.z, &self.meas, &prob.model).map_err(ControlError::from)?;
        match &self.mode {
            Mode::Deterministic => Ok(AlgorithmState {
                u: prob.cost.gradient(&s.u) + constraint_pullback(&prob.model, &s.dual),
                z,
                tau: DVector::zeros(s.tau.len()),
                dual: self.phi * &s.dual - voltage_constraint(&v, &prob.limits),
            }),
            Mode::Stochastic(scen) => {
                let e = cvar_evaluate(&v, &s.tau, scen, &prob.limits)?;
                let sub = subgradients(&e.frac_upper, &e.frac_lower, scen.beta);
                Ok(AlgorithmState {
                    u: prob.cost.gradient(&s.u) + sub.apply_u(&prob.model, &s.dual),
                    z,
                    tau: sub.d_tau.component_mul(&s.dual) + self.nu * &s.tau,
                    dual: self.phi * &s.dual - e.g,
                })
            }
        }
    }

    pub fn operator_packed(&self, e: &DVector<f64>) -> Result<DVector<f64>, AnalysisError> {
        Ok(self.pack(&self.operator(&self.unpack(e))?))
    }

    pub fn project(&self, s: AlgorithmState) -> Result<AlgorithmState, AnalysisError> {
        Ok(AlgorithmState {
            u: self.control.project(&s.u)?,
            z: s.z,
            tau: if self.stochastic() { s.tau.map(|t| t.max(0.0)) } else { s.tau * 0.0 },
            dual: s.dual.map(|d| d.max(0.0)),
        })
    }

    /// `Proj(e - eps F(e))`
    pub fn step(&self, s: &AlgorithmState, eps: f64) -> Result<AlgorithmState, AnalysisError> {
        let f = self.operator(s)?;
        self.project(AlgorithmState {
            u: &s.u - eps * f.u,
            z: &s.z - eps * f.z,
            tau: &s.tau - eps * f.tau,
            dual: &s.dual - eps * f.dual,
        })
    }

    /// Operator matrix from finite columns; exact in deterministic mode.
    pub fn affine_matrix(&self) -> Result<DMatrix<f64>, AnalysisError> {
        let d = self.dim();
        let f0 = self.operator_packed(&DVector::zeros(d))?;
        let mut a = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut e = DVector::zeros(d);
            e[j] = 1.0;
            a.set_column(j, &(self.operator_packed(&e)? - &f0));
        }
        Ok(a)
    }

    /// Iterate `step` until the max-norm displacement drops below `tol`.
    pub fn solve(
        &self,
        eps: f64,
        init: &AlgorithmState,
        tol: f64,
        max_iters: usize,
    ) -> Result<(AlgorithmState, usize), AnalysisError> {
        let mut s = self.project(init.clone())?;
        for k in 1..=max_iters {
            let next = self.step(&s, eps)?;
            let d = next.distance_inf(&s);
            s = next;
            if d < tol {
                return Ok((s, k));
            }
        }
        Err(AnalysisError::NoConvergence("theory iteration"))
    }

    /// Random point of the feasible set: `u` inside the capability regions,
    /// `dual` and `tau` in `[0, box]`, `z` within `z_box` of the closed-form estimate.
    pub fn sample_point(&self, rng: &mut SimRng, dual_box: f64, z_box: f64, tau_box: f64) -> AlgorithmState {
        let n = self.n();
        let mut s = AlgorithmState::zeros(n);
        for cap in &self.control.fleet {
            let (p, q) = sample_capability(cap, rng);
            s.u[cap.node - 1] = p;
            s.u[n + cap.node - 1] = q;
        }
        let z0 = wls_closed_form(&self.meas, &self.control.model).unwrap_or_else(|_| DVector::zeros(2 * n));
        s.z = z0.map(|z| z + rng.random_range(-z_box..=z_box));
        s.dual = DVector::from_fn(2 * n, |_, _| rng.random_range(0.0..=dual_box));
        if self.stochastic() {
            s.tau = DVector::from_fn(2 * n, |_, _| rng.random_range(0.0..=tau_box));
        }
        s
    }

    /// Pair of packed points that differ in one block or, with probability
    /// one half, everywhere.
    pub fn sample_pair(&self, rng: &mut SimRng, dual_box: f64, z_box: f64, tau_box: f64) -> (DVector<f64>, DVector<f64>) {
        let a = self.sample_point(rng, dual_box, z_box, tau_box);
        let fresh = self.sample_point(rng, dual_box, z_box, tau_box);
        let mut b = a.clone();
        let blocks = if self.stochastic() { 4 } else { 3 };
        match rng.random_range(0..2 * blocks) {
            0 => b.u = fresh.u,
            1 => b.dual = fresh.dual,
            2 => b.z = fresh.z,
            3 if blocks == 4 => b.tau = fresh.tau,
            _ => b = fresh,
        }
        (self.pack(&a), self.pack(&b))
    }

    /// Sampled constants, with exact values attached in deterministic mode.
    pub fn constants(&self, n_pairs: usize, rng: &mut SimRng) -> Result<OperatorConstants, AnalysisError> {
        let op = |e: &DVector<f64>| self.operator_packed(e).expect("dimensions fixed by pack");
        let mut c = estimate_constants(op, |r: &mut SimRng| self.sample_pair(r, 1.0, 0.1, 0.05), n_pairs, rng)?;
        if !self.stochastic() {
            c.exact = Some(exact_constants(&self.affine_matrix()?));
        }
        Ok(c)
    }
}

fn subgradients(frac_upper: &DVector<f64>, frac_lower: &DVector<f64>, beta: f64) -> CvarSubgradients {
    let n = frac_upper.len();
    let d_tau = DVector::from_fn(2 * n, |k, _| if k < n { frac_upper[k] - beta } else { frac_lower[k - n] - beta });
    CvarSubgradients { frac_upper: frac_upper.clone(), frac_lower: frac_lower.clone(), d_tau }
}

fn sample_capability(cap: &DerCapability, rng: &mut SimRng) -> (f64, f64) {
    let s = cap.s_rating;
    let lo = cap.p_min.max(-s);
    let hi = cap.p_av.min(s).max(lo);
    loop {
        let p = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let q = rng.random_range(-s..=s);
        if cap.contains(p, q, 0.0) {
            return (p, q);
        }
    }
}

/// Saddle point of the CVaR problem from the exact conic reformulation.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSaddle {
    pub u: DVector<f64>,
    pub z: DVector<f64>,
    pub tau: DVector<f64>,
    pub lambda: DVector<f64>,
}

impl QpSaddle {
    /// `x = [u; z; tau]`
    pub fn x(&self) -> DVector<f64> {
        let k = self.u.len();
        let mut out = DVector::zeros(3 * k);
        out.rows_mut(0, k).copy_from(&self.u);
        out.rows_mut(k, k).copy_from(&self.z);
        out.rows_mut(2 * k, k).copy_from(&self.tau);
        out
    }
}

/// Solve the sample-average CVaR problem as a conic QP. Hinge terms become
/// epigraph variables; with `phi > 0` the regularized dual is realized by the
/// equivalent quadratic penalty `||g_+||^2 / (2 phi)` on a slack `w >= g`.
pub fn cvar_saddle_qp(problem: &TheoryProblem, phi: f64, nu: f64) -> Result<QpSaddle, AnalysisError> {
    let Mode::Stochastic(scen) = &problem.mode else {
        return Err(AnalysisError::NeedsStochastic("cvar_saddle_qp"));
    };
    let prob = &problem.control;
    let n = prob.n();
    let k = 2 * n;
    let ns = scen.len();
    let with_w = phi > 0.0;
    let (iu, it, iy) = (0, k, 2 * k);
    let iw = iy + k * ns;
    let nvar = iw + if with_w { k } else { 0 };

    let mut p_i = Vec::new();
    let mut p_j = Vec::new();
    let mut p_v = Vec::new();
    let mut q = vec![0.0; nvar];
    for i in 0..n {
        p_i.push(iu + i);
        p_j.push(iu + i);
        p_v.push(2.0 * prob.cost.w_p[i]);
        q[iu + i] = -2.0 * prob.cost.w_p[i] * prob.cost.p_ref[i];
        p_i.push(iu + n + i);
        p_j.push(iu + n + i);
        p_v.push(2.0 * prob.cost.w_q[i]);
    }
    if nu > 0.0 {
        for j in 0..k {
            p_i.push(it + j);
            p_j.push(it + j);
            p_v.push(nu);
        }
    }
    if with_w {
        for j in 0..k {
            p_i.push(iw + j);
            p_j.push(iw + j);
            p_v.push(1.0 / phi);
        }
    }
    let pmat = CscMatrix::new_from_triplets(nvar, nvar, p_i, p_j, p_v);

    let mut rows = Rows::default();
    // Non-DER setpoints are pinned to zero.
    let mut is_der = vec![false; n];
    for cap in &prob.fleet {
        is_der[cap.node - 1] = true;
    }
    for i in (0..n).filter(|&i| !is_der[i]) {
        rows.push(&[(iu + i, 1.0)], 0.0);
        rows.push(&[(iu + n + i, 1.0)], 0.0);
    }
    let n_zero = rows.len();

    for cap in &prob.fleet {
        let i = cap.node - 1;
        let lo = cap.p_min.max(-cap.s_rating);
        let hi = cap.p_av.min(cap.s_rating).max(lo);
        rows.push(&[(iu + i, 1.0)], hi);
        rows.push(&[(iu + i, -1.0)], -lo);
    }
    for j in 0..k {
        rows.push(&[(it + j, -1.0)], 0.0);
    }
    for j in 0..k * ns {
        rows.push(&[(iy + j, -1.0)], 0.0);
    }
    let h = prob.model.sensitivity();
    let c = problem.voltages(&DVector::zeros(k));
    for (s, xi) in scen.samples.iter().enumerate() {
        for i in 0..n {
            let mut up: Vec<(usize, f64)> = (0..k).filter(|&j| h[(i, j)] != 0.0).map(|j| (iu + j, h[(i, j)])).collect();
            let mut lo: Vec<(usize, f64)> = up.iter().map(|&(j, v)| (j, -v)).collect();
            up.push((it + i, 1.0));
            up.push((iy + i * ns + s, -1.0));
            rows.push(&up, prob.limits.v_max[i] - c[i] - xi[i]);
            lo.push((it + n + i, 1.0));
            lo.push((iy + (n + i) * ns + s, -1.0));
            rows.push(&lo, -prob.limits.v_min[i] + c[i] + xi[i]);
        }
    }
    let cvar_row0 = rows.len();
    for j in 0..k {
        let mut r: Vec<(usize, f64)> = (0..ns).map(|s| (iy + j * ns + s, 1.0 / ns as f64)).collect();
        r.push((it + j, -scen.beta));
        if with_w {
            r.push((iw + j, -1.0));
        }
        rows.push(&r, 0.0);
    }
    let n_nonneg = rows.len() - n_zero;
    let mut cones = vec![SupportedConeT::ZeroConeT(n_zero), SupportedConeT::NonnegativeConeT(n_nonneg)];
    for cap in &prob.fleet {
        let i = cap.node - 1;
        rows.push(&[], cap.s_rating);
        rows.push(&[(iu + i, -1.0)], 0.0);
        rows.push(&[(iu + n + i, -1.0)], 0.0);
        cones.push(SupportedConeT::SecondOrderConeT(3));
    }
    if n_zero == 0 {
        cones.remove(0);
    }

    let amat = CscMatrix::new_from_triplets(rows.len(), nvar, rows.i, rows.j, rows.v);
    let settings = DefaultSettings {
        verbose: false,
        tol_gap_abs: 1e-12,
        tol_gap_rel: 1e-12,
        tol_feas: 1e-12,
        tol_ktratio: 1e-10,
        max_iter: 400,
        ..DefaultSettings::default()
    };
    let mut solver =
        DefaultSolver::new(&pmat, &q, &amat, &rows.b, &cones, settings).map_err(|e| AnalysisError::Qp(format!("{e:?}")))?;
    solver.solve();
    let sol = &solver.solution;
    if !matches!(sol.status, SolverStatus::Solved | SolverStatus::AlmostSolved) {
        return Err(AnalysisError::Qp(format!("{:?}", sol.status)));
    }
    let x = DVector::from_column_slice(&sol.x);
    let z = wls_closed_form(&problem.meas, &prob.model).map_err(ControlError::from)?;
    Ok(QpSaddle {
        u: x.rows(iu, k).into_owned(),
        z,
        tau: x.rows(it, k).map(|t| t.max(0.0)),
        lambda: DVector::from_fn(k, |j, _| sol.z[cvar_row0 + j].max(0.0)),
    })
}

#[derive(Default)]
struct Rows {
    i: Vec<usize>,
    j: Vec<usize>,
    v: Vec<f64>,
    b: Vec<f64>,
}

impl Rows {
    fn len(&self) -> usize {
        self.b.len()
    }

    fn push(&mut self, entries: &[(usize, f64)], rhs: f64) {
        let r = self.b.len();
        for &(j, v) in entries {
            self.i.push(r);
            self.j.push(j);
            self.v.push(v);
        }
        self.b.push(rhs);
    }
}

/// `nu` used to pick the minimum-norm `tau` when the unregularized problem
/// leaves it non-unique.
pub const TAU_SELECTION_NU: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct RegularizationReport {
    pub x_star: QpSaddle,
    pub x_v: QpSaddle,
    pub x_eta: QpSaddle,
    /// `||x* - x*_v||^2`
    pub gap_relax: f64,
    /// `||x*_v - x*_eta||^2`
    pub gap_reg: f64,
    /// `||x* - x*_eta||^2`
    pub gap_total: f64,
    pub g_f: f64,
    pub g_g: f64,
    pub c: f64,
    /// Regularization term against `gap_reg`.
    pub reg: BoundReport,
    /// Full right side against `gap_total`.
    pub total: BoundReport,
}

/// Compare the unregularized, `nu`-regularized and fully regularized saddle
/// points. `G_f`, `G_g` are suprema over `n_samples` feasible points, inflated by 10%.
pub fn regularization_gap(
    problem: &TheoryProblem,
    phi: f64,
    nu: f64,
    n_samples: usize,
    rng: &mut SimRng,
) -> Result<RegularizationReport, AnalysisError> {
    let Mode::Stochastic(scen) = &problem.mode else {
        return Err(AnalysisError::NeedsStochastic("regularization_gap"));
    };
    let x_star = cvar_saddle_qp(problem, 0.0, TAU_SELECTION_NU)?;
    let x_v = cvar_saddle_qp(problem, 0.0, nu)?;
    let x_eta = cvar_saddle_qp(problem, phi, nu)?;
    let sq = |a: &QpSaddle, b: &QpSaddle| (a.x() - b.x()).norm_squared();
    let gap_relax = sq(&x_star, &x_v);
    let gap_reg = sq(&x_v, &x_eta);
    let gap_total = sq(&x_star, &x_eta);

    let prob = &problem.control;
    let n = prob.n();
    let k = 2 * n;
    let wc = DVector::from_fn(k, |j, _| if j < n { 2.0 * prob.cost.w_p[j] } else { 2.0 * prob.cost.w_q[j - n] });
    let g_eig = se_hessian(&problem.meas, &prob.model).symmetric_eigenvalues().min();
    let c = wc.min().min(g_eig).min(nu);

    let tau_box = 2.0 * x_v.tau.amax().max(x_eta.tau.amax()) + 0.05;
    let h = prob.model.sensitivity();
    let mut g_f: f64 = 0.0;
    let mut g_g: f64 = 0.0;
    for _ in 0..n_samples {
        let s = problem.sample_point(rng, 0.0, 0.1, tau_box);
        let grad_se = se_gradient(&s.z, &problem.meas, &prob.model).map_err(ControlError::from)?;
        let grad = prob.cost.gradient(&s.u).norm_squared() + grad_se.norm_squared() + (nu * &s.tau).norm_squared();
        g_f = g_f.max(grad.sqrt());
        let v = problem.voltages(&s.u);
        let e = cvar_evaluate(&v, &s.tau, scen, &prob.limits)?;
        let mut jac = DMatrix::zeros(k, 2 * k);
        for i in 0..n {
            jac.view_mut((i, 0), (1, k)).copy_from(&(h.row(i) * e.frac_upper[i]));
            jac.view_mut((n + i, 0), (1, k)).copy_from(&(h.row(i) * -e.frac_lower[i]));
            jac[(i, k + i)] = e.frac_upper[i] - scen.beta;
            jac[(n + i, k + n + i)] = e.frac_lower[i] - scen.beta;
        }
        g_g = g_g.max(jac.singular_values().max());
    }
    g_f *= 1.1;
    g_g *= 1.1;

    let lv1 = x_v.lambda.iter().map(|l| l.abs()).sum::<f64>();
    let first = (2.0 * (g_f + g_g * lv1) / c).powi(2);
    let second = phi / (2.0 * c) * (x_v.lambda.norm_squared() - x_eta.lambda.norm_squared());
    let ingredients = [
        ("g_f", g_f),
        ("g_g", g_g),
        ("c", c),
        ("phi", phi),
        ("nu", nu),
        ("lambda_v_l1", lv1),
        ("lambda_v_sq", x_v.lambda.norm_squared()),
        ("lambda_eta_sq", x_eta.lambda.norm_squared()),
        ("first_term", first),
        ("second_term", second),
        ("gap_relax", gap_relax),
    ];
    Ok(RegularizationReport {
        reg: BoundReport::new(gap_reg, second, &ingredients),
        total: BoundReport::new(gap_total, first + second, &ingredients),
        x_star,
        x_v,
        x_eta,
        gap_relax,
        gap_reg,
        gap_total,
        g_f,
        g_g,
        c,
    })
}

#[derive(Debug, Clone)]
pub struct TrackingReport {
    pub sigma_e: f64,
    pub alpha: f64,
    pub tail_error: f64,
    /// Against `sigma_e / alpha`.
    pub over_alpha: BoundReport,
    /// Against `sigma_e / (1 - alpha)`.
    pub geometric: BoundReport,
}

/// Tail tracking error over the last `tail` fraction of the run. `trajectory[t]`
/// is compared with `references[t]`.
pub fn tracking_report(
    trajectory: &[DVector<f64>],
    references: &[DVector<f64>],
    c: &OperatorConstants,
    eps: f64,
    tail: f64,
) -> Result<TrackingReport, AnalysisError> {
    if trajectory.len() != references.len() || trajectory.is_empty() {
        return Err(AnalysisError::Misaligned { traj: trajectory.len(), refs: references.len() });
    }
    let sigma_e = references.windows(2).map(|w| (&w[1] - &w[0]).norm()).fold(0.0, f64::max);
    let (m, l) = c.best();
    let alpha = contraction_factor(m, l, eps);
    let t = trajectory.len();
    let start = ((1.0 - tail.clamp(0.0, 1.0)) * t as f64).floor() as usize;
    let tail_error =
        (start.min(t - 1)..t).map(|i| (&trajectory[i] - &references[i]).norm()).fold(0.0, f64::max);
    let ingredients = [("sigma_e", sigma_e), ("alpha", alpha), ("m", m), ("l", l), ("eps", eps)];
    let over_alpha_bound = if alpha > 0.0 { sigma_e / alpha } else { f64::INFINITY };
    let geometric_bound = if alpha < 1.0 { sigma_e / (1.0 - alpha) } else { f64::INFINITY };
    Ok(TrackingReport {
        sigma_e,
        alpha,
        tail_error,
        over_alpha: BoundReport::new(tail_error, over_alpha_bound, &ingredients),
        geometric: BoundReport::new(tail_error, geometric_bound, &ingredients),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViolationStats {
    pub steps: usize,
    /// Fraction of steps outside `[v_min, v_max]`, per node.
    pub node_fraction: Vec<f64>,
    pub node_upper_fraction: Vec<f64>,
    pub node_lower_fraction: Vec<f64>,
    /// Fraction over all node-steps.
    pub aggregate_fraction: f64,
    pub max_node_fraction: f64,
    /// Largest distance outside the band.
    pub max_depth: f64,
    /// 50/90/99% quantiles of nonzero violation depths.
    pub depth_quantiles: [f64; 3],
}

pub fn violation_stats(history: &[DVector<f64>], limits: &crate::control::VoltageLimits) -> Result<ViolationStats, AnalysisError> {
    if history.is_empty() {
        return Err(AnalysisError::EmptyHistory);
    }
    let n = limits.n();
    let mut up = vec![0usize; n];
    let mut lo = vec![0usize; n];
    let mut depths = Vec::new();
    for v in history {
        for i in 0..n {
            if v[i] > limits.v_max[i] {
                up[i] += 1;
                depths.push(v[i] - limits.v_max[i]);
            } else if v[i] < limits.v_min[i] {
                lo[i] += 1;
                depths.push(limits.v_min[i] - v[i]);
            }
        }
    }
    let t = history.len() as f64;
    let node_fraction: Vec<f64> = (0..n).map(|i| (up[i] + lo[i]) as f64 / t).collect();
    depths.sort_by(f64::total_cmp);
    let quant = |p: f64| {
        if depths.is_empty() {
            0.0
        } else {
            depths[((p * depths.len() as f64).ceil() as usize).clamp(1, depths.len()) - 1]
        }
    };
    Ok(ViolationStats {
        steps: history.len(),
        aggregate_fraction: depths.len() as f64 / (t * n as f64),
        max_node_fraction: node_fraction.iter().copied().fold(0.0, f64::max),
        node_fraction,
        node_upper_fraction: up.iter().map(|&c| c as f64 / t).collect(),
        node_lower_fraction: lo.iter().map(|&c| c as f64 / t).collect(),
        max_depth: depths.last().copied().unwrap_or(0.0),
        depth_quantiles: [quant(0.5), quant(0.9), quant(0.99)],
    })
}

/// Sample set used when a theory instance needs a fixed scenario draw.
pub fn scenario_from_rows(rows: Vec<Vec<f64>>, beta: f64) -> Result<ScenarioSet, AnalysisError> {
    Ok(ScenarioSet::new(rows.into_iter().map(DVector::from_vec).collect(), beta)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{OpfCost, VoltageLimits};
    use crate::network::{build_linear_model, FeederModel, Line};
    use crate::sensing::rng_from_seed;

    fn affine(a: DMatrix<f64>) -> impl Fn(&DVector<f64>) -> DVector<f64> {
        move |e| &a * e + DVector::from_element(e.len(), 0.3)
    }

    fn box_pairs(d: usize) -> impl FnMut(&mut SimRng) -> (DVector<f64>, DVector<f64>) {
        move |r| {
            (
                DVector::from_fn(d, |_, _| r.random_range(-1.0..1.0)),
                DVector::from_fn(d, |_, _| r.random_range(-1.0..1.0)),
            )
        }
    }

    #[test]
    fn diagonal_operator_constants() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        let mut rng = rng_from_seed(3);
        let c = estimate_constants(affine(a.clone()), box_pairs(2), 10_000, &mut rng).unwrap();
        assert!(c.m_hat >= 2.0 - 1e-12 && c.m_hat < 2.001, "{}", c.m_hat);
        assert!(c.l_hat <= 3.0 + 1e-12 && c.l_hat > 2.999, "{}", c.l_hat);
        let (m, l) = exact_constants(&a);
        assert!((m - 2.0).abs() < 1e-12 && (l - 3.0).abs() < 1e-12);
        let again = estimate_constants(affine(a), box_pairs(2), 10_000, &mut rng_from_seed(3)).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn too_few_pairs_and_degenerate_sampler() {
        let op = |e: &DVector<f64>| e.clone();
        let mut rng = rng_from_seed(1);
        assert!(matches!(estimate_constants(op, box_pairs(2), 10, &mut rng), Err(AnalysisError::TooFewPairs { .. })));
        let same = |_: &mut SimRng| (DVector::zeros(2), DVector::zeros(2));
        assert!(matches!(estimate_constants(op, same, 100, &mut rng), Err(AnalysisError::DegenerateSampler)));
    }

    #[test]
    fn step_bound_formula() {
        let w = (DVector::zeros(1), DVector::zeros(1));
        let c = OperatorConstants { m_hat: 2.0, l_hat: 3.0, n_pairs: 100, min_ratio_witness: w.clone(), exact: None };
        assert!((max_step_size(&c) - 4.0 / 9.0).abs() < 1e-15);
        let c0 = OperatorConstants { m_hat: 0.0, l_hat: 3.0, n_pairs: 100, min_ratio_witness: w, exact: None };
        assert_eq!(max_step_size(&c0), 0.0);
    }

    #[test]
    fn bound_report_tolerance() {
        assert!(BoundReport::new(1.0 + 1e-10, 1.0, &[]).satisfied);
        assert!(!BoundReport::new(1.0 + 1e-8, 1.0, &[]).satisfied);
        let kv = BoundReport::new(0.5, 1.0, &[("c", 2.0)]).key_values("t2");
        assert!(kv.contains(&"t2.satisfied=true".to_string()));
        assert!(kv.iter().any(|l| l.starts_with("t2.c=")));
    }

    #[test]
    fn violation_counting() {
        let lim = VoltageLimits::uniform(3, 0.95, 1.05).unwrap();
        let mut hist = vec![DVector::from_element(3, 1.0); 100];
        let s = violation_stats(&hist, &lim).unwrap();
        assert!(s.node_fraction.iter().all(|&f| f == 0.0));
        assert_eq!(s.max_depth, 0.0);
        hist[17][2] = 1.06;
        let s = violation_stats(&hist, &lim).unwrap();
        assert_eq!(s.node_fraction, vec![0.0, 0.0, 0.01]);
        assert!((s.max_depth - 0.01).abs() < 1e-12);
        assert!(violation_stats(&[], &lim).is_err());
    }

    #[test]
    fn tracking_static_and_monotone() {
        let w = (DVector::zeros(1), DVector::zeros(1));
        let c = OperatorConstants { m_hat: 1.0, l_hat: 2.0, n_pairs: 100, min_ratio_witness: w, exact: None };
        let refs = vec![DVector::from_element(2, 1.0); 10];
        let traj: Vec<_> = (0..10).map(|k| DVector::from_element(2, 1.0 + 0.5f64.powi(k))).collect();
        let r = tracking_report(&traj, &refs, &c, 0.2, 0.2).unwrap();
        assert_eq!(r.sigma_e, 0.0);
        assert_eq!(r.geometric.bound, 0.0);
        assert!(r.tail_error < 0.01);
        let a1 = contraction_factor(1.0, 2.0, 0.2);
        let a2 = contraction_factor(1.0, 2.0, 0.1);
        assert!(a2 > a1 && a1 < 1.0);
        assert!(tracking_report(&traj[..3], &refs, &c, 0.2, 0.5).is_err());
    }

    fn three_node(mode: Mode, phi: f64, nu: f64) -> TheoryProblem {
        let lines = vec![
            Line { from: 0, to: 1, r: 0.05, x: 0.05 },
            Line { from: 1, to: 2, r: 0.05, x: 0.05 },
            Line { from: 1, to: 3, r: 0.04, x: 0.06 },
        ];
        let model = build_linear_model(&FeederModel::new(lines, 1.0).unwrap());
        let p_av = [0.0, 0.4, 0.35];
        let fleet = vec![DerCapability::new(2, 0.4, 0.6), DerCapability::new(3, 0.35, 0.6)];
        let control = ControlProblem {
            model: model.clone(),
            fleet,
            cost: OpfCost::uniform(DVector::from_row_slice(&p_av), 1.0, 3.0).unwrap(),
            limits: VoltageLimits::uniform(3, 0.95, 1.03).unwrap(),
        };
        let loads = InjectionVector::new(DVector::from_element(3, -0.05), DVector::from_element(3, -0.02)).unwrap();
        let v = model.predict_stacked(&loads.stacked());
        let meas = MeasurementSnapshot {
            v_nodes: vec![2],
            v_hat: vec![v[1]],
            w_v: vec![4.0],
            p_hat: loads.p.clone(),
            q_hat: loads.q.clone(),
            w_p: DVector::from_element(3, 1.0),
            w_q: DVector::from_element(3, 1.0),
        };
        TheoryProblem { control, meas, loads, mode, phi, nu }
    }

    #[test]
    fn affine_matrix_matches_operator() {
        let p = three_node(Mode::Deterministic, 0.5, 0.0);
        let a = p.affine_matrix().unwrap();
        let f0 = p.operator_packed(&DVector::zeros(p.dim())).unwrap();
        let mut rng = rng_from_seed(9);
        let s = p.sample_point(&mut rng, 1.0, 0.1, 0.0);
        let e = p.pack(&s);
        assert!((p.operator_packed(&e).unwrap() - (&a * &e + f0)).amax() < 1e-12);
        assert_eq!(p.unpack(&e), s);
        let (m, _) = exact_constants(&a);
        let sym_min = 2.0f64.min(0.5).min(se_hessian(&p.meas, &p.control.model).symmetric_eigenvalues().min());
        assert!((m - sym_min).abs() < 1e-10);
    }

    #[test]
    fn qp_oracle_matches_cvar_feasibility() {
        let scen = scenario_from_rows(vec![vec![0.0, 0.01, -0.01], vec![0.0, -0.01, 0.02], vec![0.0, 0.0, 0.0]], 0.1).unwrap();
        let p = three_node(Mode::Stochastic(scen.clone()), 0.0, 1e-3);
        let sol = cvar_saddle_qp(&p, 0.0, 1e-3).unwrap();
        let v = p.voltages(&sol.u);
        let g = cvar_evaluate(&v, &sol.tau, &scen, &p.control.limits).unwrap().g;
        assert!(g.max() < 1e-7, "{g}");
        // Overvoltage pressure makes some constraint bind.
        assert!(sol.lambda.max() > 1e-3);
        for j in 0..6 {
            assert!((sol.lambda[j] * g[j]).abs() < 1e-7);
        }
        let reg = cvar_saddle_qp(&p, 1e-3, 1e-3).unwrap();
        let g = cvar_evaluate(&p.voltages(&reg.u), &reg.tau, &scen, &p.control.limits).unwrap().g;
        for j in 0..6 {
            assert!((reg.lambda[j] - g[j].max(0.0) / 1e-3).abs() < 1e-5 * (1.0 + reg.lambda[j]));
        }
    }

    #[test]
    fn zero_phi_has_no_regularization_gap() {
        let scen = scenario_from_rows(vec![vec![0.0, 0.01, -0.01], vec![0.0, -0.01, 0.02]], 0.1).unwrap();
        let p = three_node(Mode::Stochastic(scen), 0.0, 1e-3);
        let mut rng = rng_from_seed(4);
        let r = regularization_gap(&p, 0.0, 1e-3, 200, &mut rng).unwrap();
        assert!(r.gap_reg < 1e-14);
        assert_eq!(r.reg.bound, 0.0);
    }
}
