//! Closed-loop simulation, configuration files and the frozen-instance report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use thiserror::Error;

use crate::analysis::{
    self, kkt_residual, max_step_size, regularization_gap, tracking_report, violation_stats, AnalysisError,
    TheoryProblem, ViolationStats,
};
use crate::control::{
    cvar_constraint, joint_step_deterministic, joint_step_measured, joint_step_stochastic, solve_static,
    voltage_constraint, AlgorithmState, ControlError, ControlProblem, MeasurementSource, Mode, OpfCost,
    StaticProblem, StepSizes, VoltageLimits,
};
use crate::devices::{load_fleet, DerUnit, DeviceError};
use crate::network::{
    build_linear_model, load_feeder, solve_distflow, FeederModel, InjectionVector, LinearVoltageModel, NetworkError,
};
use crate::scenario::{load_base_loads, load_timeseries, synth_profiles, ScenarioError, SynthParams, TimeSeries};
use crate::sensing::{
    draw_error_samples, rng_from_seed, sample_measurements_with_nominal, MeasurementSnapshot, ScenarioSet,
    SensingError, SensorConfig, weight, INJECTION_NOMINAL_FLOOR,
};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("config: missing key '{section}.{key}'")]
    MissingKey { section: String, key: String },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("cannot write {path}: {source}")]
    Output { path: String, source: std::io::Error },
    #[error("plant power flow failed at step {step}: {msg}")]
    Plant { step: usize, msg: String },
}

impl RunnerError {
    /// True for problems with the inputs rather than with the computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            RunnerError::Config { .. }
                | RunnerError::MissingKey { .. }
                | RunnerError::Io { .. }
                | RunnerError::Network(NetworkError::Io(_))
                | RunnerError::Device(DeviceError::Io(_))
                | RunnerError::Scenario(ScenarioError::Io(_))
                | RunnerError::Sensing(_)
                | RunnerError::Network(NetworkError::Parse { .. })
                | RunnerError::Network(NetworkError::Cycle { .. })
                | RunnerError::Network(NetworkError::Disconnected { .. })
                | RunnerError::Network(NetworkError::NegativeImpedance { .. })
                | RunnerError::Network(NetworkError::BadSubstationVoltage(_))
                | RunnerError::Network(NetworkError::Empty)
                | RunnerError::Device(DeviceError::Parse { .. })
                | RunnerError::Device(DeviceError::NodeOutOfRange { .. })
                | RunnerError::Device(DeviceError::Duplicate(_))
                | RunnerError::Scenario(ScenarioError::Parse { .. })
                | RunnerError::Scenario(ScenarioError::MissingColumn(_))
                | RunnerError::Scenario(ScenarioError::Dimension { .. })
                | RunnerError::Scenario(ScenarioError::NonUniform { .. })
                | RunnerError::Scenario(ScenarioError::NegativeAvailability { .. })
        )
    }
}

fn config_err(line: usize, msg: impl Into<String>) -> RunnerError {
    RunnerError::Config { line, msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerMode {
    Uncontrolled,
    MeasuredBaseline,
    DeterministicJoint,
    StochasticJoint,
}

impl ControllerMode {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerMode::Uncontrolled => "uncontrolled",
            ControllerMode::MeasuredBaseline => "measured-baseline",
            ControllerMode::DeterministicJoint => "deterministic-joint",
            ControllerMode::StochasticJoint => "stochastic-joint",
        }
    }
}

/// Magnitude used to normalise the injection pseudo-measurement weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightNominal {
    /// The previous estimate.
    Estimate,
    /// The noisy reading itself.
    Measurement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialSetpoint {
    Zero,
    Available,
}

#[derive(Debug, Clone)]
pub enum SeriesSource {
    File(PathBuf),
    Synth { base_loads: PathBuf, duration_s: usize, seed: u64, params: SynthParams },
    InMemory(TimeSeries),
}

#[derive(Debug, Clone)]
pub struct AnalysisConfig {
    pub time_index: usize,
    pub n_pairs: usize,
    pub seed: u64,
    /// Step for the frozen-instance solves; defaults to 0.9 of the certified bound.
    pub eps: Option<f64>,
    pub tol: f64,
    pub max_iters: usize,
    pub phi: f64,
    pub nu: f64,
    pub gap_samples: usize,
    /// Regularization weights for the gap certification.
    pub gap_phi: f64,
    pub gap_nu: f64,
    pub ramp_steps: usize,
    /// Availability rises linearly from `(1 - ramp_depth) p_av` to `p_av`.
    pub ramp_depth: f64,
    /// Uniform estimator weights for the frozen instance; sensor-derived when unset.
    pub w_v: Option<f64>,
    pub w_p: Option<f64>,
    pub w_q: Option<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            time_index: 0,
            n_pairs: 10_000,
            seed: 5,
            eps: None,
            tol: 1e-10,
            max_iters: 2_000_000,
            phi: 1.0,
            nu: 1.0,
            gap_samples: 10_000,
            gap_phi: 1e-3,
            gap_nu: 1e-3,
            ramp_steps: 500,
            ramp_depth: 0.2,
            w_v: None,
            w_p: None,
            w_q: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub feeder: PathBuf,
    pub fleet: PathBuf,
    pub series: SeriesSource,
    pub sensors: SensorConfig,
    pub weight_nominal: WeightNominal,
    pub mode: ControllerMode,
    pub steps: StepSizes,
    pub inner_iters: usize,
    pub w_p: f64,
    pub w_q: f64,
    pub init_u: InitialSetpoint,
    pub v_min: f64,
    pub v_max: f64,
    pub beta: f64,
    pub n_samples: usize,
    pub sigma_xi: f64,
    pub xi_seed: u64,
    pub out_dir: Option<PathBuf>,
    pub analysis: AnalysisConfig,
}

const SECTIONS: &[&str] = &["network", "timeseries", "sensors", "controller", "limits", "stochastic", "output", "analysis"];

/// Raw `section.key -> (value, line)` map.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<(String, String), (String, usize)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, RunnerError> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (k, line) in text.lines().enumerate() {
            let lineno = k + 1;
            let body = line.split(['#', ';']).next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(name) = body.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| config_err(lineno, "unterminated section header"))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(config_err(lineno, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) =
                body.split_once('=').ok_or_else(|| config_err(lineno, format!("expected key = value, got '{body}'")))?;
            let sec = section.clone().ok_or_else(|| config_err(lineno, "key outside any section"))?;
            let key = key.trim().to_string();
            if entries.insert((sec.clone(), key.clone()), (value.trim().to_string(), lineno)).is_some() {
                return Err(config_err(lineno, format!("duplicate key '{sec}.{key}'")));
            }
        }
        Ok(Self { entries })
    }

    /// Apply a `section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), RunnerError> {
        let (path, value) =
            assignment.split_once('=').ok_or_else(|| config_err(0, format!("bad override '{assignment}'")))?;
        let (sec, key) =
            path.trim().split_once('.').ok_or_else(|| config_err(0, format!("override needs section.key: '{path}'")))?;
        if !SECTIONS.contains(&sec) {
            return Err(config_err(0, format!("unknown section [{sec}]")));
        }
        self.entries.insert((sec.to_string(), key.to_string()), (value.trim().to_string(), 0));
        Ok(())
    }

    fn take(&mut self, sec: &str, key: &str) -> Option<(String, usize)> {
        self.entries.remove(&(sec.to_string(), key.to_string()))
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, sec: &str, key: &str) -> Result<Option<T>, RunnerError> {
        match self.take(sec, key) {
            None => Ok(None),
            Some((v, line)) => {
                v.parse().map(Some).map_err(|_| config_err(line, format!("bad value '{v}' for '{sec}.{key}'")))
            }
        }
    }

    fn or<T: std::str::FromStr>(&mut self, sec: &str, key: &str, default: T) -> Result<T, RunnerError> {
        Ok(self.take_parsed(sec, key)?.unwrap_or(default))
    }

    fn required(&mut self, sec: &str, key: &str) -> Result<(String, usize), RunnerError> {
        self.take(sec, key).ok_or_else(|| RunnerError::MissingKey { section: sec.into(), key: key.into() })
    }

    fn finish(self) -> Result<(), RunnerError> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some(((sec, key), (_, line))) => Err(config_err(line, format!("unknown key '{sec}.{key}'"))),
        }
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl SimulationConfig {
    /// Build from parsed entries; relative paths are resolved against `base_dir`.
    pub fn from_raw(mut raw: RawConfig, base_dir: &Path) -> Result<Self, RunnerError> {
        let feeder = resolve(base_dir, &raw.required("network", "feeder")?.0);
        let fleet = resolve(base_dir, &raw.required("network", "fleet")?.0);

        let series = match raw.take("timeseries", "path") {
            Some((p, line)) => {
                if raw.entries.keys().any(|(s, _)| s == "timeseries") {
                    return Err(config_err(line, "timeseries.path excludes the synthesis keys"));
                }
                SeriesSource::File(resolve(base_dir, &p))
            }
            None => {
                let d = SynthParams::default();
                SeriesSource::Synth {
                    base_loads: resolve(base_dir, &raw.required("timeseries", "base_loads")?.0),
                    duration_s: raw.required("timeseries", "duration_s").and_then(|(v, line)| {
                        v.parse().map_err(|_| config_err(line, format!("bad duration '{v}'")))
                    })?,
                    seed: raw.or("timeseries", "seed", 1)?,
                    params: SynthParams {
                        start_hour: raw.or("timeseries", "start_hour", d.start_hour)?,
                        sunrise_hour: raw.or("timeseries", "sunrise_hour", d.sunrise_hour)?,
                        sunset_hour: raw.or("timeseries", "sunset_hour", d.sunset_hour)?,
                        load_mean: raw.or("timeseries", "load_mean", d.load_mean)?,
                        load_swing: raw.or("timeseries", "load_swing", d.load_swing)?,
                        load_noise: raw.or("timeseries", "load_noise", d.load_noise)?,
                        load_noise_tau_s: raw.or("timeseries", "load_noise_tau_s", d.load_noise_tau_s)?,
                        cloud_reversion: raw.or("timeseries", "cloud_reversion", d.cloud_reversion)?,
                        cloud_volatility: raw.or("timeseries", "cloud_volatility", d.cloud_volatility)?,
                        pv_peak_fraction: raw.or("timeseries", "pv_peak_fraction", d.pv_peak_fraction)?,
                    },
                }
            }
        };

        let ds = SensorConfig::default();
        let voltage_nodes = match raw.take("sensors", "voltage_nodes") {
            None => ds.voltage_nodes.clone(),
            Some((v, line)) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| config_err(line, format!("bad sensor node '{s}'"))))
                .collect::<Result<_, _>>()?,
        };
        let sensors = SensorConfig {
            voltage_nodes,
            sigma_v: raw.or("sensors", "sigma_v", ds.sigma_v)?,
            sigma_p: raw.or("sensors", "sigma_p", ds.sigma_p)?,
            sigma_q: raw.or("sensors", "sigma_q", ds.sigma_q)?,
            seed: raw.or("sensors", "seed", ds.seed)?,
        };
        let weight_nominal = match raw.take("sensors", "weight_nominal") {
            None => WeightNominal::Estimate,
            Some((v, line)) => match v.as_str() {
                "estimate" => WeightNominal::Estimate,
                "measurement" => WeightNominal::Measurement,
                _ => return Err(config_err(line, format!("weight_nominal must be estimate|measurement, got '{v}'"))),
            },
        };

        let (mode_s, mode_line) = raw.required("controller", "mode")?;
        let mode = match mode_s.as_str() {
            "uncontrolled" => ControllerMode::Uncontrolled,
            "measured-baseline" => ControllerMode::MeasuredBaseline,
            "deterministic-joint" => ControllerMode::DeterministicJoint,
            "stochastic-joint" => ControllerMode::StochasticJoint,
            other => return Err(config_err(mode_line, format!("unknown controller mode '{other}'"))),
        };
        let dstep = StepSizes::default();
        let steps = StepSizes {
            eps_u: raw.or("controller", "eps_u", dstep.eps_u)?,
            eps_z: raw.or("controller", "eps_z", dstep.eps_z)?,
            eps_tau: raw.or("controller", "eps_tau", dstep.eps_tau)?,
            eps_dual: raw.or("controller", "eps_dual", dstep.eps_dual)?,
            phi: raw.or("controller", "phi", dstep.phi)?,
            nu: raw.or("controller", "nu", dstep.nu)?,
        };
        for (name, v) in [("eps_u", steps.eps_u), ("eps_z", steps.eps_z), ("eps_tau", steps.eps_tau), ("eps_dual", steps.eps_dual)] {
            if !(v > 0.0) {
                return Err(config_err(0, format!("controller.{name} must be positive")));
            }
        }
        if !(steps.phi >= 0.0 && steps.nu >= 0.0) {
            return Err(config_err(0, "controller.phi and controller.nu must be nonnegative"));
        }
        let inner_iters = raw.or("controller", "inner_iters", 1usize)?.max(1);
        let w_p = raw.or("controller", "w_p", 1.0)?;
        let w_q = raw.or("controller", "w_q", 3.0)?;
        let init_u = match raw.take("controller", "init_u") {
            None => InitialSetpoint::Zero,
            Some((v, line)) => match v.as_str() {
                "zero" => InitialSetpoint::Zero,
                "available" => InitialSetpoint::Available,
                _ => return Err(config_err(line, format!("init_u must be zero|available, got '{v}'"))),
            },
        };

        let v_min = raw.or("limits", "v_min", 0.95)?;
        let v_max = raw.or("limits", "v_max", 1.045)?;
        if !(v_min < v_max) {
            return Err(config_err(0, "limits.v_min must be below limits.v_max"));
        }
        let beta = raw.or("stochastic", "beta", 0.05)?;
        if !(beta > 0.0 && beta < 1.0) {
            return Err(config_err(0, format!("stochastic.beta must lie in (0, 1), got {beta}")));
        }
        let n_samples = raw.or("stochastic", "n_samples", 100usize)?;
        let sigma_xi = raw.or("stochastic", "sigma_xi", 0.01)?;
        let xi_seed = raw.or("stochastic", "seed", 3u64)?;
        let out_dir = raw.take("output", "dir").map(|(v, _)| resolve(base_dir, &v));

        let da = AnalysisConfig::default();
        let analysis = AnalysisConfig {
            time_index: raw.or("analysis", "time_index", da.time_index)?,
            n_pairs: raw.or("analysis", "n_pairs", da.n_pairs)?,
            seed: raw.or("analysis", "seed", da.seed)?,
            eps: raw.take_parsed("analysis", "eps")?,
            tol: raw.or("analysis", "tol", da.tol)?,
            max_iters: raw.or("analysis", "max_iters", da.max_iters)?,
            phi: raw.or("analysis", "phi", da.phi)?,
            nu: raw.or("analysis", "nu", da.nu)?,
            gap_samples: raw.or("analysis", "gap_samples", da.gap_samples)?,
            gap_phi: raw.or("analysis", "gap_phi", da.gap_phi)?,
            gap_nu: raw.or("analysis", "gap_nu", da.gap_nu)?,
            ramp_steps: raw.or("analysis", "ramp_steps", da.ramp_steps)?,
            ramp_depth: raw.or("analysis", "ramp_depth", da.ramp_depth)?,
            w_v: raw.take_parsed("analysis", "w_v")?,
            w_p: raw.take_parsed("analysis", "w_p")?,
            w_q: raw.take_parsed("analysis", "w_q")?,
        };
        raw.finish()?;
        Ok(Self {
            feeder,
            fleet,
            series,
            sensors,
            weight_nominal,
            mode,
            steps,
            inner_iters,
            w_p,
            w_q,
            init_u,
            v_min,
            v_max,
            beta,
            n_samples,
            sigma_xi,
            xi_seed,
            out_dir,
            analysis,
        })
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, RunnerError> {
        Self::from_raw(RawConfig::parse(text)?, base_dir)
    }

    /// Load a config file, applying `section.key=value` overrides.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self, RunnerError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| RunnerError::Io { path: path.display().to_string(), source })?;
        let mut raw = RawConfig::parse(&text)?;
        for o in overrides {
            raw.set(o)?;
        }
        Self::from_raw(raw, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Everything loaded from disk for one configuration.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub feeder: FeederModel,
    pub model: LinearVoltageModel,
    pub fleet: Vec<DerUnit>,
    pub series: TimeSeries,
}

pub fn load_inputs(cfg: &SimulationConfig) -> Result<Inputs, RunnerError> {
    let feeder = load_feeder(&cfg.feeder)?;
    let n = feeder.n();
    let fleet = load_fleet(&cfg.fleet)?;
    for u in &fleet {
        if u.node == 0 || u.node > n {
            return Err(DeviceError::NodeOutOfRange { node: u.node, n }.into());
        }
    }
    let nodes: Vec<usize> = fleet.iter().map(|u| u.node).collect();
    let series = match &cfg.series {
        SeriesSource::File(p) => load_timeseries(p, n, &nodes)?,
        SeriesSource::Synth { base_loads, duration_s, seed, params } => {
            synth_profiles(&load_base_loads(base_loads, n)?, &fleet, *duration_s, *seed, params)
        }
        SeriesSource::InMemory(ts) => ts.clone(),
    };
    series.check_against(n, &nodes)?;
    cfg.sensors.validate(n)?;
    let model = build_linear_model(&feeder);
    Ok(Inputs { feeder, model, fleet, series })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub v_true: DVector<f64>,
    pub v_est: DVector<f64>,
    pub u: DVector<f64>,
    pub dual: DVector<f64>,
    pub tau: DVector<f64>,
    /// Constraint values seen by the dual update (`r` or the CVaR `g`).
    pub constraint: DVector<f64>,
    pub violations: Vec<bool>,
    pub obj: f64,
    pub curtailment: f64,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub records: Vec<TrajectoryRecord>,
    pub summary: BTreeMap<String, String>,
    pub stats: Option<ViolationStats>,
    pub final_state: AlgorithmState,
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Per-second closed loop: plant solve, sensing, estimator/dual/primal passes.
pub fn run_simulation(cfg: &SimulationConfig) -> Result<SimulationOutput, RunnerError> {
    let inputs = load_inputs(cfg)?;
    simulate(cfg, &inputs)
}

pub fn simulate(cfg: &SimulationConfig, inputs: &Inputs) -> Result<SimulationOutput, RunnerError> {
    let n = inputs.feeder.n();
    let ts = &inputs.series;
    let mut prob = ControlProblem {
        model: inputs.model.clone(),
        fleet: inputs.fleet.iter().map(|u| u.at(0.0)).collect(),
        cost: OpfCost::uniform(DVector::zeros(n), cfg.w_p, cfg.w_q)?,
        limits: VoltageLimits::uniform(n, cfg.v_min, cfg.v_max)?,
    };
    let mut meas_rng = rng_from_seed(cfg.sensors.seed);
    let mut xi_rng = rng_from_seed(cfg.xi_seed);
    let mut state = AlgorithmState::zeros(n);
    let mut z_ready = false;
    let mut records = Vec::with_capacity(ts.len());
    let mut last: Option<(MeasurementSnapshot, DVector<f64>, Option<ScenarioSet>)> = None;

    for k in 0..ts.len() {
        let loads = ts.loads_at(k);
        let p_av = ts.p_av_at(k);
        prob.set_availability(&p_av);
        if k == 0 && cfg.init_u == InitialSetpoint::Available || cfg.mode == ControllerMode::Uncontrolled {
            state.u = DVector::zeros(2 * n);
            for (cap, &p) in prob.fleet.iter().zip(&p_av) {
                state.u[cap.node - 1] = p;
            }
        }
        state.u = prob.project(&state.u)?;

        let inj = InjectionVector::from_stacked(&state.u).add(&loads);
        let pf = solve_distflow(&inputs.feeder, &inj).map_err(|e| RunnerError::Plant { step: k, msg: e.to_string() })?;
        if !pf.converged {
            return Err(RunnerError::Plant { step: k, msg: format!("no convergence in {} sweeps", pf.iterations) });
        }
        let v_true = pf.v;

        let nominal = match (cfg.weight_nominal, z_ready) {
            (WeightNominal::Estimate, true) => Some(InjectionVector::from_stacked(&state.z)),
            _ => None,
        };
        let meas = sample_measurements_with_nominal(&v_true, &inj, &cfg.sensors, nominal.as_ref(), &mut meas_rng)?;
        if !z_ready {
            state.z = InjectionVector { p: meas.p_hat.clone(), q: meas.q_hat.clone() }.stacked();
            z_ready = true;
        }
        let scen = match cfg.mode {
            ControllerMode::StochasticJoint => {
                Some(draw_error_samples(cfg.sigma_xi, cfg.n_samples, n, cfg.beta, &mut xi_rng)?)
            }
            _ => None,
        };

        let constraint = match &scen {
            Some(s) => cvar_constraint(&prob.model.predict_stacked(&state.z), &state.tau, s, &prob.limits)?,
            None => voltage_constraint(&prob.model.predict_stacked(&state.z), &prob.limits),
        };
        let u_applied = state.u.clone();
        for _ in 0..cfg.inner_iters {
            state = controller_step(cfg, &state, &meas, &v_true, scen.as_ref(), &prob)?;
        }

        let violations: Vec<bool> = (0..n).map(|i| v_true[i] > cfg.v_max || v_true[i] < cfg.v_min).collect();
        let curtailment: f64 = prob.fleet.iter().map(|c| c.p_av - u_applied[c.node - 1]).sum();
        records.push(TrajectoryRecord {
            t: ts.t[k],
            v_est: prob.model.predict_stacked(&state.z),
            v_true: v_true.clone(),
            obj: prob.cost.value(&u_applied),
            u: u_applied,
            dual: state.dual.clone(),
            tau: state.tau.clone(),
            constraint,
            violations,
            curtailment,
        });
        last = Some((meas, v_true, scen));
    }

    let mut summary = BTreeMap::new();
    summary.insert("mode".to_string(), cfg.mode.name().to_string());
    summary.insert("steps".to_string(), records.len().to_string());
    let stats = if records.is_empty() {
        summary.insert("max_v".into(), fmt(f64::NAN));
        summary.insert("min_v".into(), fmt(f64::NAN));
        summary.insert("violation_fraction".into(), fmt(0.0));
        summary.insert("mean_curtailment".into(), fmt(0.0));
        None
    } else {
        let hist: Vec<DVector<f64>> = records.iter().map(|r| r.v_true.clone()).collect();
        let lim = VoltageLimits::uniform(n, cfg.v_min, cfg.v_max)?;
        let stats = violation_stats(&hist, &lim)?;
        let t = records.len() as f64;
        let max_v = hist.iter().map(|v| v.max()).fold(f64::NEG_INFINITY, f64::max);
        let min_v = hist.iter().map(|v| v.min()).fold(f64::INFINITY, f64::min);
        let est_err = records.iter().map(|r| (&r.v_est - &r.v_true).amax()).sum::<f64>() / t;
        summary.insert("max_v".into(), fmt(max_v));
        summary.insert("min_v".into(), fmt(min_v));
        summary.insert("violation_fraction".into(), fmt(stats.aggregate_fraction));
        summary.insert("max_node_violation_fraction".into(), fmt(stats.max_node_fraction));
        summary.insert("max_violation_depth".into(), fmt(stats.max_depth));
        summary.insert("violation_depth_p99".into(), fmt(stats.depth_quantiles[2]));
        summary.insert("mean_curtailment".into(), fmt(records.iter().map(|r| r.curtailment).sum::<f64>() / t));
        summary.insert("mean_obj".into(), fmt(records.iter().map(|r| r.obj).sum::<f64>() / t));
        summary.insert("mean_estimation_error".into(), fmt(est_err));
        for (i, f) in stats.node_fraction.iter().enumerate() {
            summary.insert(format!("node_violation_fraction_{}", i + 1), fmt(*f));
        }
        Some(stats)
    };
    if let (Some((meas, v_true, scen)), true) = (&last, cfg.mode != ControllerMode::Uncontrolled) {
        let next = controller_step(cfg, &state, meas, v_true, scen.as_ref(), &prob)?;
        summary.insert("kkt_residual_final".into(), fmt(next.distance_inf(&state)));
    }
    Ok(SimulationOutput { records, summary, stats, final_state: state })
}

fn controller_step(
    cfg: &SimulationConfig,
    s: &AlgorithmState,
    meas: &MeasurementSnapshot,
    v_true: &DVector<f64>,
    scen: Option<&ScenarioSet>,
    prob: &ControlProblem,
) -> Result<AlgorithmState, RunnerError> {
    Ok(match (cfg.mode, scen) {
        (ControllerMode::Uncontrolled, _) => {
            // Only the estimator runs.
            let z = &s.z - cfg.steps.eps_z * crate::estimation::se_gradient(&s.z, meas, &prob.model).map_err(ControlError::from)?;
            AlgorithmState { z, ..s.clone() }
        }
        (ControllerMode::MeasuredBaseline, _) => joint_step_measured(s, v_true, meas, prob, &cfg.steps)?,
        (ControllerMode::DeterministicJoint, _) => joint_step_deterministic(s, meas, prob, &cfg.steps)?,
        (ControllerMode::StochasticJoint, Some(sc)) => joint_step_stochastic(s, meas, sc, prob, &cfg.steps)?,
        (ControllerMode::StochasticJoint, None) => unreachable!("scenario drawn for stochastic mode"),
    })
}

pub fn trajectory_header(n: usize) -> String {
    let mut h = vec!["t_s".to_string()];
    for prefix in ["v_true", "v_est", "p", "q"] {
        h.extend((1..=n).map(|i| format!("{prefix}_{i}")));
    }
    for prefix in ["lambda", "tau"] {
        h.extend((1..=2 * n).map(|i| format!("{prefix}_{i}")));
    }
    h.push("viol_count".into());
    h.push("obj".into());
    h.join(",")
}

pub fn write_trajectory(path: impl AsRef<Path>, records: &[TrajectoryRecord], n: usize) -> Result<(), RunnerError> {
    let path = path.as_ref();
    let io = |source| RunnerError::Output { path: path.display().to_string(), source };
    let mut w = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    writeln!(w, "{}", trajectory_header(n)).map_err(io)?;
    let mut line = String::new();
    for r in records {
        line.clear();
        write!(line, "{}", r.t).unwrap();
        for v in r.v_true.iter().chain(r.v_est.iter()).chain(r.u.iter()).chain(r.dual.iter()).chain(r.tau.iter()) {
            write!(line, ",{v}").unwrap();
        }
        write!(line, ",{},{}", r.violations.iter().filter(|&&b| b).count(), r.obj).unwrap();
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_summary(path: impl AsRef<Path>, summary: &BTreeMap<String, String>) -> Result<(), RunnerError> {
    let path = path.as_ref();
    let text: String = summary.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    fs::write(path, text).map_err(|source| RunnerError::Output { path: path.display().to_string(), source })
}

/// Write `trajectory.csv` and `summary.txt` into `dir`.
pub fn write_outputs(dir: impl AsRef<Path>, out: &SimulationOutput, n: usize) -> Result<(), RunnerError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| RunnerError::Output { path: dir.display().to_string(), source })?;
    write_trajectory(dir.join("trajectory.csv"), &out.records, n)?;
    write_summary(dir.join("summary.txt"), &out.summary)
}

/// Frozen instance at `time_index`: the control problem, the loads and a
/// noise-free measurement template built from the uncontrolled operating point.
pub fn frozen_instance(
    cfg: &SimulationConfig,
    inputs: &Inputs,
) -> Result<(ControlProblem, InjectionVector, MeasurementSnapshot), RunnerError> {
    let n = inputs.feeder.n();
    let k = cfg.analysis.time_index;
    if k >= inputs.series.len() {
        return Err(config_err(0, format!("analysis.time_index {k} beyond series length {}", inputs.series.len())));
    }
    let mut prob = ControlProblem {
        model: inputs.model.clone(),
        fleet: inputs.fleet.iter().map(|u| u.at(0.0)).collect(),
        cost: OpfCost::uniform(DVector::zeros(n), cfg.w_p, cfg.w_q)?,
        limits: VoltageLimits::uniform(n, cfg.v_min, cfg.v_max)?,
    };
    let p_av = inputs.series.p_av_at(k);
    prob.set_availability(&p_av);
    let loads = inputs.series.loads_at(k);
    let mut u = DVector::zeros(2 * n);
    for (cap, &p) in prob.fleet.iter().zip(&p_av) {
        u[cap.node - 1] = p;
    }
    let inj = InjectionVector::from_stacked(&u).add(&loads);
    let v = prob.model.predict_stacked(&inj.stacked());
    let exact = SensorConfig { sigma_v: 0.0, sigma_p: 0.0, sigma_q: 0.0, ..cfg.sensors.clone() };
    let mut meas = sample_measurements_with_nominal(&v, &inj, &exact, None, &mut rng_from_seed(0))?;
    let a = &cfg.analysis;
    let w = |sigma: f64, x: f64| weight(sigma, x.abs().max(INJECTION_NOMINAL_FLOOR));
    meas.w_v = vec![a.w_v.unwrap_or_else(|| w(cfg.sensors.sigma_v, 1.0)); meas.v_nodes.len()];
    meas.w_p = inj.p.map(|x| a.w_p.unwrap_or_else(|| w(cfg.sensors.sigma_p, x)));
    meas.w_q = inj.q.map(|x| a.w_q.unwrap_or_else(|| w(cfg.sensors.sigma_q, x)));
    Ok((prob, loads, meas))
}

/// Theory certification on the frozen instance; returns `key=value` lines.
pub fn analyze(cfg: &SimulationConfig) -> Result<Vec<String>, RunnerError> {
    let inputs = load_inputs(cfg)?;
    let a = &cfg.analysis;
    let n = inputs.feeder.n();
    let (prob, loads, meas) = frozen_instance(cfg, &inputs)?;
    let mut rng = rng_from_seed(a.seed);
    let mut out = Vec::new();

    let det = TheoryProblem {
        control: prob.clone(),
        meas: meas.clone(),
        loads: loads.clone(),
        mode: Mode::Deterministic,
        phi: a.phi,
        nu: a.nu,
    };
    let consts = det.constants(a.n_pairs, &mut rng)?;
    let bound = max_step_size(&consts);
    let (m_exact, l_exact) = consts.best();
    out.push(format!("constants.m_hat={:.12e}", consts.m_hat));
    out.push(format!("constants.l_hat={:.12e}", consts.l_hat));
    out.push(format!("constants.m_exact={m_exact:.12e}"));
    out.push(format!("constants.l_exact={l_exact:.12e}"));
    out.push(format!("constants.monotone={}", consts.m_hat >= 0.0));
    out.push(format!("step_bound={bound:.12e}"));
    for (name, eps) in [
        ("eps_u", cfg.steps.eps_u),
        ("eps_z", cfg.steps.eps_z),
        ("eps_tau", cfg.steps.eps_tau),
        ("eps_dual", cfg.steps.eps_dual),
    ] {
        out.push(format!("step_bound.{name}_below={}", eps < bound));
    }
    let eps = a.eps.unwrap_or(0.9 * bound);
    out.push(format!("analysis_eps={eps:.12e}"));

    // Frozen-input fixed point with noise-free linear measurements, from two starts.
    let sp = StaticProblem {
        control: prob.clone(),
        source: MeasurementSource::LinearPlant { loads: loads.clone(), template: meas.clone() },
        mode: Mode::Deterministic,
    };
    let steps = StepSizes { phi: a.phi, nu: a.nu, ..cfg.steps };
    let sol = solve_static(&sp, &steps, &AlgorithmState::zeros(n), a.tol, a.max_iters)?;
    let mut other = AlgorithmState::zeros(n);
    other.dual.fill(1.0);
    other.z = DVector::from_fn(2 * n, |i, _| if i % 2 == 0 { 0.1 } else { -0.1 });
    for c in &prob.fleet {
        other.u[c.node - 1] = c.p_av;
    }
    let sol2 = solve_static(&sp, &steps, &other, a.tol, a.max_iters)?;
    let v_u = prob.model.predict_stacked(&InjectionVector::from_stacked(&sol.state.u).add(&loads).stacked());
    let v_z = prob.model.predict_stacked(&sol.state.z);
    out.push(format!("kkt.converged={}", sol.converged && sol2.converged));
    out.push(format!("kkt.iterations={}", sol.iterations));
    let residual = kkt_residual(&sol.state, &sp, &steps)?;
    let agreement = (v_u - v_z).amax();
    let uniqueness = (sol.state.stacked() - sol2.state.stacked()).norm();
    out.extend(analysis::BoundReport::new(residual, 1e-6, &[]).key_values("kkt.residual"));
    out.extend(analysis::BoundReport::new(agreement, 1e-6, &[]).key_values("kkt.voltage_agreement"));
    out.extend(analysis::BoundReport::new(uniqueness, 1e-8, &[]).key_values("kkt.two_start"));

    // Regularization gap on the CVaR problem.
    let scen = draw_error_samples(cfg.sigma_xi, cfg.n_samples, n, cfg.beta, &mut rng_from_seed(cfg.xi_seed))?;
    let sto = TheoryProblem { mode: Mode::Stochastic(scen), phi: a.gap_phi, nu: a.gap_nu, ..det.clone() };
    let gap = regularization_gap(&sto, a.gap_phi, a.gap_nu, a.gap_samples, &mut rng)?;
    out.extend(gap.reg.key_values("regularization.gap"));
    out.extend(gap.total.key_values("regularization.total"));

    // Tracking along an availability ramp.
    let (traj, refs) = ramp_tracking(&det, a, eps)?;
    let rep = tracking_report(&traj, &refs, &consts, eps, 0.5)?;
    out.extend(rep.geometric.key_values("tracking.geometric"));
    out.extend(rep.over_alpha.key_values("tracking.over_alpha"));
    Ok(out)
}

/// Packed iterates and the matching reference fixed points.
pub type Trajectories = (Vec<DVector<f64>>, Vec<DVector<f64>>);

/// One online step per ramp sample against per-step reference fixed points.
pub fn ramp_tracking(base: &TheoryProblem, a: &AnalysisConfig, eps: f64) -> Result<Trajectories, RunnerError> {
    let p_av: Vec<f64> = base.control.fleet.iter().map(|c| c.p_av).collect();
    let steps = a.ramp_steps.max(2);
    let mut problem = base.clone();
    let mut traj = Vec::with_capacity(steps);
    let mut refs = Vec::with_capacity(steps);
    let mut reference = AlgorithmState::zeros(base.n());
    let mut online = base.project(AlgorithmState::zeros(base.n()))?;
    for t in 0..steps {
        let scale = 1.0 - a.ramp_depth * (1.0 - t as f64 / (steps - 1) as f64);
        let scaled: Vec<f64> = p_av.iter().map(|p| p * scale).collect();
        problem.control.set_availability(&scaled);
        let (r, _) = problem.solve(eps, &reference, a.tol, a.max_iters)?;
        reference = r;
        if t == 0 {
            online = reference.clone();
        }
        traj.push(problem.pack(&online));
        refs.push(problem.pack(&reference));
        online = problem.step(&online, eps)?;
    }
    Ok((traj, refs))
}
