//! Primal-dual controllers: the deterministic joint OPF/SE iteration, the
//! measurement-feedback baseline and the CVaR-constrained stochastic variant.

use nalgebra::DVector;
use thiserror::Error;

use crate::devices::{fleet_project, DerCapability, DeviceError};
use crate::estimation::{se_gradient, EstimationError};
use crate::network::{InjectionVector, LinearVoltageModel};
use crate::sensing::{MeasurementSnapshot, ScenarioSet};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error("cost weights must be positive")]
    NonPositiveWeight,
    #[error("voltage limits must satisfy v_min < v_max")]
    BadLimits,
}

fn dim(what: &'static str, expected: usize, got: usize) -> Result<(), ControlError> {
    if expected == got {
        Ok(())
    } else {
        Err(ControlError::Dimension { what, expected, got })
    }
}

/// `sum w_p (p_ref - p)^2 + w_q q^2`
#[derive(Debug, Clone, PartialEq)]
pub struct OpfCost {
    pub p_ref: DVector<f64>,
    pub w_p: DVector<f64>,
    pub w_q: DVector<f64>,
}

impl OpfCost {
    pub fn new(p_ref: DVector<f64>, w_p: DVector<f64>, w_q: DVector<f64>) -> Result<Self, ControlError> {
        dim("cost weights", p_ref.len(), w_p.len())?;
        dim("cost weights", p_ref.len(), w_q.len())?;
        if w_p.iter().chain(w_q.iter()).any(|&w| !(w > 0.0)) {
            return Err(ControlError::NonPositiveWeight);
        }
        Ok(Self { p_ref, w_p, w_q })
    }

    pub fn uniform(p_ref: DVector<f64>, w_p: f64, w_q: f64) -> Result<Self, ControlError> {
        let n = p_ref.len();
        Self::new(p_ref, DVector::from_element(n, w_p), DVector::from_element(n, w_q))
    }

    pub fn n(&self) -> usize {
        self.p_ref.len()
    }

    pub fn value(&self, u: &DVector<f64>) -> f64 {
        let n = self.n();
        (0..n).map(|i| self.w_p[i] * (self.p_ref[i] - u[i]).powi(2) + self.w_q[i] * u[n + i].powi(2)).sum()
    }

    pub fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        DVector::from_fn(2 * n, |k, _| {
            if k < n {
                2.0 * self.w_p[k] * (u[k] - self.p_ref[k])
            } else {
                2.0 * self.w_q[k - n] * u[k]
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoltageLimits {
    pub v_max: DVector<f64>,
    pub v_min: DVector<f64>,
}

impl VoltageLimits {
    pub fn new(v_min: DVector<f64>, v_max: DVector<f64>) -> Result<Self, ControlError> {
        dim("voltage limits", v_min.len(), v_max.len())?;
        if v_min.iter().zip(v_max.iter()).any(|(lo, hi)| !(lo < hi)) {
            return Err(ControlError::BadLimits);
        }
        Ok(Self { v_max, v_min })
    }

    pub fn uniform(n: usize, v_min: f64, v_max: f64) -> Result<Self, ControlError> {
        Self::new(DVector::from_element(n, v_min), DVector::from_element(n, v_max))
    }

    pub fn n(&self) -> usize {
        self.v_max.len()
    }
}

/// Primal-dual iterate. `tau` stays zero in deterministic mode; `dual` is
/// the multiplier of whichever constraint family is active.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmState {
    pub u: DVector<f64>,
    pub z: DVector<f64>,
    pub tau: DVector<f64>,
    pub dual: DVector<f64>,
}

impl AlgorithmState {
    pub fn zeros(n: usize) -> Self {
        Self {
            u: DVector::zeros(2 * n),
            z: DVector::zeros(2 * n),
            tau: DVector::zeros(2 * n),
            dual: DVector::zeros(2 * n),
        }
    }

    pub fn n(&self) -> usize {
        self.u.len() / 2
    }

    /// Max-norm distance over all blocks.
    pub fn distance_inf(&self, other: &Self) -> f64 {
        [(&self.u, &other.u), (&self.z, &other.z), (&self.tau, &other.tau), (&self.dual, &other.dual)]
            .iter()
            .map(|(a, b)| (*a - *b).amax())
            .fold(0.0, f64::max)
    }

    /// Stacked `[u; z; tau; dual]`.
    pub fn stacked(&self) -> DVector<f64> {
        let parts = [&self.u, &self.z, &self.tau, &self.dual];
        let len: usize = parts.iter().map(|p| p.len()).sum();
        let mut out = DVector::zeros(len);
        let mut off = 0;
        for p in parts {
            out.rows_mut(off, p.len()).copy_from(p);
            off += p.len();
        }
        out
    }

    fn check(&self, n: usize) -> Result<(), ControlError> {
        dim("u", 2 * n, self.u.len())?;
        dim("z", 2 * n, self.z.len())?;
        dim("tau", 2 * n, self.tau.len())?;
        dim("dual", 2 * n, self.dual.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    pub eps_u: f64,
    pub eps_z: f64,
    pub eps_tau: f64,
    pub eps_dual: f64,
    pub phi: f64,
    pub nu: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        Self { eps_u: 8e-4, eps_z: 9e-4, eps_tau: 3e-3, eps_dual: 5e-3, phi: 1e-4, nu: 1e-4 }
    }
}

impl StepSizes {
    /// One step size for every block.
    pub fn single(eps: f64, phi: f64, nu: f64) -> Self {
        Self { eps_u: eps, eps_z: eps, eps_tau: eps, eps_dual: eps, phi, nu }
    }
}

/// Everything the controller needs at one time instant.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub model: LinearVoltageModel,
    pub fleet: Vec<DerCapability>,
    pub cost: OpfCost,
    pub limits: VoltageLimits,
}

impl ControlProblem {
    pub fn n(&self) -> usize {
        self.model.n()
    }

    pub fn project(&self, u: &DVector<f64>) -> Result<DVector<f64>, ControlError> {
        Ok(fleet_project(&InjectionVector::from_stacked(u), &self.fleet)?.stacked())
    }

    /// Set the available power of every DER and use it as the active-power reference.
    pub fn set_availability(&mut self, p_av: &[f64]) {
        for (cap, &p) in self.fleet.iter_mut().zip(p_av) {
            cap.p_av = p;
            self.cost.p_ref[cap.node - 1] = p;
        }
    }
}

/// `[v - v_max; v_min - v]`
pub fn voltage_constraint(v: &DVector<f64>, limits: &VoltageLimits) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(2 * n, |k, _| if k < n { v[k] - limits.v_max[k] } else { limits.v_min[k - n] - v[k - n] })
}

/// `[R X; -R -X]^T dual`
pub fn constraint_pullback(model: &LinearVoltageModel, dual: &DVector<f64>) -> DVector<f64> {
    let n = model.n();
    let w = dual.rows(0, n) - dual.rows(n, n);
    model.pullback(&w)
}

fn project_nonneg(x: DVector<f64>) -> DVector<f64> {
    x.map(|v| v.max(0.0))
}

fn deterministic_step(
    s: &AlgorithmState,
    m: &MeasurementSnapshot,
    v_dual: &DVector<f64>,
    prob: &ControlProblem,
    steps: &StepSizes,
) -> Result<AlgorithmState, ControlError> {
    let n = prob.n();
    s.check(n)?;
    dim("voltage vector", n, v_dual.len())?;
    let grad_u = prob.cost.gradient(&s.u) + constraint_pullback(&prob.model, &s.dual);
    let u = prob.project(&(&s.u - steps.eps_u * grad_u))?;
    let r = voltage_constraint(v_dual, &prob.limits);
    let dual = project_nonneg(&s.dual + steps.eps_dual * (r - steps.phi * &s.dual));
    let z = &s.z - steps.eps_z * se_gradient(&s.z, m, &prob.model)?;
    Ok(AlgorithmState { u, z, tau: s.tau.clone(), dual })
}

/// One pass of the joint update: projected primal step, dual step driven by
/// the estimated voltages `v(z)`, gradient step on the estimate.
pub fn joint_step_deterministic(
    s: &AlgorithmState,
    m: &MeasurementSnapshot,
    prob: &ControlProblem,
    steps: &StepSizes,
) -> Result<AlgorithmState, ControlError> {
    dim("z", 2 * prob.n(), s.z.len())?;
    let v_est = prob.model.predict_stacked(&s.z);
    deterministic_step(s, m, &v_est, prob, steps)
}

/// Baseline where the dual step reads a full measured voltage vector.
pub fn joint_step_measured(
    s: &AlgorithmState,
    v_measured: &DVector<f64>,
    m: &MeasurementSnapshot,
    prob: &ControlProblem,
    steps: &StepSizes,
) -> Result<AlgorithmState, ControlError> {
    deterministic_step(s, m, v_measured, prob, steps)
}

/// Sample-average CVaR constraint values with the hinge activity fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct CvarEval {
    pub g: DVector<f64>,
    /// Fraction of samples with a strictly positive upper hinge, per node.
    pub frac_upper: DVector<f64>,
    pub frac_lower: DVector<f64>,
}

pub fn cvar_evaluate(
    v: &DVector<f64>,
    tau: &DVector<f64>,
    scen: &ScenarioSet,
    limits: &VoltageLimits,
) -> Result<CvarEval, ControlError> {
    let n = v.len();
    dim("tau", 2 * n, tau.len())?;
    dim("scenario width", n, scen.n())?;
    dim("limits", n, limits.n())?;
    let mut sum = vec![0.0; 2 * n];
    let mut cnt = vec![0usize; 2 * n];
    let a_up: Vec<f64> = (0..n).map(|i| v[i] - limits.v_max[i] + tau[i]).collect();
    let a_lo: Vec<f64> = (0..n).map(|i| limits.v_min[i] - v[i] + tau[n + i]).collect();
    for xi in &scen.samples {
        for i in 0..n {
            let up = a_up[i] + xi[i];
            if up > 0.0 {
                sum[i] += up;
                cnt[i] += 1;
            }
            let lo = a_lo[i] - xi[i];
            if lo > 0.0 {
                sum[n + i] += lo;
                cnt[n + i] += 1;
            }
        }
    }
    let ns = scen.len() as f64;
    let g = DVector::from_fn(2 * n, |k, _| sum[k] / ns - scen.beta * tau[k]);
    Ok(CvarEval {
        g,
        frac_upper: DVector::from_fn(n, |i, _| cnt[i] as f64 / ns),
        frac_lower: DVector::from_fn(n, |i, _| cnt[n + i] as f64 / ns),
    })
}

/// `[g_upper; g_lower]`, each entry the sample mean of hinge terms minus `beta tau`.
pub fn cvar_constraint(
    v: &DVector<f64>,
    tau: &DVector<f64>,
    scen: &ScenarioSet,
    limits: &VoltageLimits,
) -> Result<DVector<f64>, ControlError> {
    Ok(cvar_evaluate(v, tau, scen, limits)?.g)
}

/// Subgradient of the CVaR constraints. Row `i` of the control Jacobian is
/// `f_upper[i]` times row `i` of `[R X]`; lower rows carry a minus sign.
#[derive(Debug, Clone, PartialEq)]
pub struct CvarSubgradients {
    pub frac_upper: DVector<f64>,
    pub frac_lower: DVector<f64>,
    /// Diagonal of the Jacobian with respect to `tau`.
    pub d_tau: DVector<f64>,
}

impl CvarSubgradients {
    /// `J_u^T dual`
    pub fn apply_u(&self, model: &LinearVoltageModel, dual: &DVector<f64>) -> DVector<f64> {
        let n = model.n();
        let w = DVector::from_fn(n, |i, _| self.frac_upper[i] * dual[i] - self.frac_lower[i] * dual[n + i]);
        model.pullback(&w)
    }

    /// Dense `2N x 2N` Jacobian with respect to `u`.
    pub fn jacobian_u(&self, model: &LinearVoltageModel) -> nalgebra::DMatrix<f64> {
        let n = model.n();
        let h = model.sensitivity();
        let mut j = nalgebra::DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            j.row_mut(i).copy_from(&(h.row(i) * self.frac_upper[i]));
            j.row_mut(n + i).copy_from(&(h.row(i) * -self.frac_lower[i]));
        }
        j
    }
}

pub fn cvar_subgradients(
    v: &DVector<f64>,
    tau: &DVector<f64>,
    scen: &ScenarioSet,
    limits: &VoltageLimits,
) -> Result<CvarSubgradients, ControlError> {
    let e = cvar_evaluate(v, tau, scen, limits)?;
    Ok(subgradients_from(&e, scen.beta))
}

fn subgradients_from(e: &CvarEval, beta: f64) -> CvarSubgradients {
    let n = e.frac_upper.len();
    let d_tau = DVector::from_fn(2 * n, |k, _| if k < n { e.frac_upper[k] - beta } else { e.frac_lower[k - n] - beta });
    CvarSubgradients { frac_upper: e.frac_upper.clone(), frac_lower: e.frac_lower.clone(), d_tau }
}

/// One time step of the online stochastic algorithm. Every block reads the
/// incoming iterate; constraint values and hinge fractions use `v(z)`.
pub fn joint_step_stochastic(
    s: &AlgorithmState,
    m: &MeasurementSnapshot,
    scen: &ScenarioSet,
    prob: &ControlProblem,
    steps: &StepSizes,
) -> Result<AlgorithmState, ControlError> {
    let n = prob.n();
    s.check(n)?;
    let z = &s.z - steps.eps_z * se_gradient(&s.z, m, &prob.model)?;
    let v_est = prob.model.predict_stacked(&s.z);
    let e = cvar_evaluate(&v_est, &s.tau, scen, &prob.limits)?;
    let dual = project_nonneg(&s.dual + steps.eps_dual * (&e.g - steps.phi * &s.dual));
    let sub = subgradients_from(&e, scen.beta);
    let grad_u = prob.cost.gradient(&s.u) + sub.apply_u(&prob.model, &s.dual);
    let u = prob.project(&(&s.u - steps.eps_u * grad_u))?;
    let grad_tau = sub.d_tau.component_mul(&s.dual) + steps.nu * &s.tau;
    let tau = project_nonneg(&s.tau - steps.eps_tau * grad_tau);
    Ok(AlgorithmState { u, z, tau, dual })
}

/// Where a frozen problem gets its measurements from.
#[derive(Debug, Clone)]
pub enum MeasurementSource {
    Fixed(MeasurementSnapshot),
    /// Noise-free readings regenerated from `u + loads` through the linear
    /// model at every iteration; weights and sensor set come from `template`.
    LinearPlant { loads: InjectionVector, template: MeasurementSnapshot },
}

impl MeasurementSource {
    pub fn snapshot(&self, model: &LinearVoltageModel, u: &DVector<f64>) -> MeasurementSnapshot {
        match self {
            MeasurementSource::Fixed(m) => m.clone(),
            MeasurementSource::LinearPlant { loads, template } => {
                let n = model.n();
                let inj = InjectionVector::from_stacked(u).add(loads);
                let v = model.predict_stacked(&inj.stacked());
                let mut m = template.clone();
                m.v_hat = m.v_nodes.iter().map(|&k| v[k - 1]).collect();
                m.p_hat = inj.p.clone();
                m.q_hat = inj.q.clone();
                debug_assert_eq!(m.p_hat.len(), n);
                m
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Mode {
    Deterministic,
    Stochastic(ScenarioSet),
}

/// A frozen-time problem instance.
#[derive(Debug, Clone)]
pub struct StaticProblem {
    pub control: ControlProblem,
    pub source: MeasurementSource,
    pub mode: Mode,
}

impl StaticProblem {
    pub fn step(&self, s: &AlgorithmState, steps: &StepSizes) -> Result<AlgorithmState, ControlError> {
        let m = self.source.snapshot(&self.control.model, &s.u);
        match &self.mode {
            Mode::Deterministic => joint_step_deterministic(s, &m, &self.control, steps),
            Mode::Stochastic(scen) => joint_step_stochastic(s, &m, scen, &self.control, steps),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StaticSolution {
    pub state: AlgorithmState,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm displacement of the last step.
    pub displacement: f64,
}

/// Iterate the frozen problem until successive iterates move less than `tol`.
/// When the cap is hit the last iterate is returned with `converged = false`.
pub fn solve_static(
    problem: &StaticProblem,
    steps: &StepSizes,
    init: &AlgorithmState,
    tol: f64,
    max_iters: usize,
) -> Result<StaticSolution, ControlError> {
    let mut s = init.clone();
    s.u = problem.control.project(&s.u)?;
    let mut displacement = f64::INFINITY;
    for k in 1..=max_iters {
        let next = problem.step(&s, steps)?;
        displacement = next.distance_inf(&s);
        s = next;
        if displacement < tol {
            return Ok(StaticSolution { state: s, iterations: k, converged: true, displacement });
        }
    }
    Ok(StaticSolution { state: s, iterations: max_iters, converged: false, displacement })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_linear_model, FeederModel, Line};
    use crate::sensing::ScenarioSet;

    fn chain(n: usize) -> LinearVoltageModel {
        let lines = (0..n).map(|k| Line { from: k, to: k + 1, r: 0.02, x: 0.03 }).collect();
        build_linear_model(&FeederModel::new(lines, 1.0).unwrap())
    }

    fn problem(n: usize, p_av: f64) -> ControlProblem {
        let model = chain(n);
        let fleet: Vec<_> = (1..=n).map(|i| DerCapability::new(i, p_av, 0.5)).collect();
        ControlProblem {
            model,
            fleet,
            cost: OpfCost::uniform(DVector::from_element(n, p_av), 1.0, 3.0).unwrap(),
            limits: VoltageLimits::uniform(n, 0.95, 1.045).unwrap(),
        }
    }

    fn exact_snapshot(model: &LinearVoltageModel, z: &DVector<f64>) -> MeasurementSnapshot {
        let n = model.n();
        let v = model.predict_stacked(z);
        MeasurementSnapshot {
            v_nodes: vec![1, n],
            v_hat: vec![v[0], v[n - 1]],
            w_v: vec![1e4, 1e4],
            p_hat: z.rows(0, n).into_owned(),
            q_hat: z.rows(n, n).into_owned(),
            w_p: DVector::from_element(n, 100.0),
            w_q: DVector::from_element(n, 100.0),
        }
    }

    #[test]
    fn constraint_vector() {
        let lim = VoltageLimits::uniform(3, 0.95, 1.05).unwrap();
        let at_max = voltage_constraint(&DVector::from_element(3, 1.05), &lim);
        assert!(at_max.rows(0, 3).iter().all(|&x| x == 0.0));
        let mid = voltage_constraint(&DVector::from_element(3, 1.0), &lim);
        assert!(mid.iter().all(|&x| x < 0.0));
        let mut v = DVector::from_element(3, 1.0);
        v[1] = 1.06;
        assert!((voltage_constraint(&v, &lim)[1] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn unconstrained_minimizer_is_fixed_point() {
        let prob = problem(3, 0.05);
        let mut s = AlgorithmState::zeros(3);
        s.u = InjectionVector::new(DVector::from_element(3, 0.05), DVector::zeros(3)).unwrap().stacked();
        s.z = s.u.clone();
        let m = exact_snapshot(&prob.model, &s.z);
        let next = joint_step_deterministic(&s, &m, &prob, &StepSizes::default()).unwrap();
        assert!(next.distance_inf(&s) < 1e-15);
    }

    #[test]
    fn dual_stays_zero_when_feasible() {
        let prob = problem(3, 0.05);
        let s = AlgorithmState::zeros(3);
        let m = exact_snapshot(&prob.model, &s.z);
        let next = joint_step_deterministic(&s, &m, &prob, &StepSizes::default()).unwrap();
        assert!(next.dual.iter().all(|&d| d == 0.0));
        let v = prob.model.predict_stacked(&s.z);
        let meas = joint_step_measured(&s, &v, &m, &prob, &StepSizes::default()).unwrap();
        assert_eq!(meas, next);
    }

    #[test]
    fn scalar_dual_decay() {
        let model = build_linear_model(&FeederModel::new(vec![Line { from: 0, to: 1, r: 0.1, x: 0.1 }], 1.0).unwrap());
        let prob = ControlProblem {
            fleet: vec![DerCapability::new(1, 0.0, 1.0)],
            cost: OpfCost::uniform(DVector::zeros(1), 1.0, 3.0).unwrap(),
            limits: VoltageLimits::uniform(1, 0.9, 1.0).unwrap(),
            model,
        };
        // z = 0 puts v(z) exactly on v_max, so r_upper = 0.
        let mut s = AlgorithmState::zeros(1);
        s.dual[0] = 0.1;
        let m = exact_snapshot(&prob.model, &s.z);
        let m = MeasurementSnapshot { v_nodes: vec![1], v_hat: vec![1.0], w_v: vec![1.0], ..m };
        let steps = StepSizes { eps_dual: 5e-3, phi: 1e-4, ..StepSizes::default() };
        let next = joint_step_deterministic(&s, &m, &prob, &steps).unwrap();
        assert!((next.dual[0] - 0.09999995).abs() < 1e-15);
    }

    fn flat_scen(n: usize, beta: f64) -> ScenarioSet {
        ScenarioSet::new(vec![DVector::zeros(n); 4], beta).unwrap()
    }

    #[test]
    fn cvar_values() {
        let lim = VoltageLimits::uniform(2, 0.95, 1.05).unwrap();
        let scen = flat_scen(2, 0.1);
        let g = cvar_constraint(&DVector::from_element(2, 1.05), &DVector::zeros(4), &scen, &lim).unwrap();
        assert_eq!(g[0], 0.0);
        let g = cvar_constraint(&DVector::from_element(2, 1.06), &DVector::zeros(4), &scen, &lim).unwrap();
        assert!((g[0] - 0.01).abs() < 1e-12);
        let mut tau = DVector::zeros(4);
        tau[0] = 0.02;
        let g = cvar_constraint(&DVector::from_element(2, 1.05), &tau, &scen, &lim).unwrap();
        assert!((g[0] - 0.018).abs() < 1e-15);
    }

    #[test]
    fn cvar_subgradient_extremes() {
        let lim = VoltageLimits::uniform(2, 0.95, 1.05).unwrap();
        let scen = flat_scen(2, 0.1);
        let sub = cvar_subgradients(&DVector::from_element(2, 1.0), &DVector::zeros(4), &scen, &lim).unwrap();
        assert!(sub.frac_upper.iter().chain(sub.frac_lower.iter()).all(|&f| f == 0.0));
        assert!(sub.d_tau.iter().all(|&d| (d + 0.1).abs() < 1e-15));
        let sub = cvar_subgradients(&DVector::from_element(2, 1.2), &DVector::from_element(4, 0.0), &scen, &lim).unwrap();
        assert!(sub.d_tau.rows(0, 2).iter().all(|&d| (d - 0.9).abs() < 1e-15));
    }

    #[test]
    fn stochastic_fixed_point_with_slack_constraints() {
        let prob = problem(3, 0.01);
        let mut s = AlgorithmState::zeros(3);
        s.u = InjectionVector::new(DVector::from_element(3, 0.01), DVector::zeros(3)).unwrap().stacked();
        s.z = s.u.clone();
        let m = exact_snapshot(&prob.model, &s.z);
        let steps = StepSizes { nu: 0.0, ..StepSizes::default() };
        let next = joint_step_stochastic(&s, &m, &flat_scen(3, 0.05), &prob, &steps).unwrap();
        assert!(next.distance_inf(&s) < 1e-15);
    }

    #[test]
    fn regularization_decays_dual() {
        let prob = problem(2, 0.01);
        let mut s = AlgorithmState::zeros(2);
        s.u = InjectionVector::new(DVector::from_element(2, 0.01), DVector::zeros(2)).unwrap().stacked();
        s.z = s.u.clone();
        // Voltages sit well inside the limits with tau = 0, so g = 0.
        let scen = ScenarioSet::new(vec![DVector::zeros(2)], 0.5).unwrap();
        let m = exact_snapshot(&prob.model, &s.z);
        let steps = StepSizes { eps_dual: 0.5, phi: 0.1, eps_tau: 0.0, ..StepSizes::default() };
        s.dual = DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0]);
        let mut prev = s.dual.norm();
        for _ in 0..40 {
            s = joint_step_stochastic(&s, &m, &scen, &prob, &steps).unwrap();
            assert!(s.dual.norm() <= prev);
            prev = s.dual.norm();
        }
        assert!(prev < 0.5);
    }

    #[test]
    fn solve_static_wide_limits() {
        let mut prob = problem(3, 0.05);
        prob.fleet[1].p_av = 0.02;
        prob.cost.p_ref[1] = 0.03;
        prob.limits = VoltageLimits::uniform(3, 0.5, 1.5).unwrap();
        let loads = InjectionVector::new(DVector::from_element(3, -0.02), DVector::from_element(3, -0.01)).unwrap();
        let template = exact_snapshot(&prob.model, &DVector::zeros(6));
        let sp = StaticProblem { control: prob, source: MeasurementSource::LinearPlant { loads, template }, mode: Mode::Deterministic };
        let steps = StepSizes::single(2e-3, 1e-4, 1e-4);
        let sol = solve_static(&sp, &steps, &AlgorithmState::zeros(3), 1e-12, 200_000).unwrap();
        assert!(sol.converged);
        assert!((sol.state.u[0] - 0.05).abs() < 1e-9);
        assert!((sol.state.u[1] - 0.02).abs() < 1e-9);
        assert!(sol.state.u.rows(3, 3).amax() < 1e-9);
        assert!(sol.state.dual.amax() == 0.0);
    }
}
