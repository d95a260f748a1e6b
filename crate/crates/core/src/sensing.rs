//! Measurement layer: voltage sensors, injection pseudo-measurements and
//! the error samples used by the CVaR constraints.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::network::InjectionVector;

/// Portable seeded generator used everywhere randomness is needed.
pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Weight given to a channel whose sigma is zero.
pub const EXACT_WEIGHT: f64 = 1e8;
/// Floor on the injection magnitude used to normalise pseudo-measurement weights.
pub const INJECTION_NOMINAL_FLOOR: f64 = 0.01;

#[derive(Debug, Error)]
pub enum SensingError {
    #[error("empty residual history")]
    EmptyHistory,
    #[error("sensor node {node} is outside 1..={n}")]
    BadNode { node: usize, n: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("negative noise level {0}")]
    NegativeSigma(f64),
    #[error("risk level must lie in (0, 1), got {0}")]
    BadBeta(f64),
    #[error("at least one sample is required")]
    NoSamples,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorConfig {
    /// Node ids (1-based) carrying a voltage sensor.
    pub voltage_nodes: Vec<usize>,
    pub sigma_v: f64,
    pub sigma_p: f64,
    pub sigma_q: f64,
    pub seed: u64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self { voltage_nodes: vec![6, 7, 23], sigma_v: 0.01, sigma_p: 0.5, sigma_q: 0.5, seed: 1 }
    }
}

impl SensorConfig {
    pub fn validate(&self, n: usize) -> Result<(), SensingError> {
        for &node in &self.voltage_nodes {
            if node == 0 || node > n {
                return Err(SensingError::BadNode { node, n });
            }
        }
        for s in [self.sigma_v, self.sigma_p, self.sigma_q] {
            if !(s >= 0.0) {
                return Err(SensingError::NegativeSigma(s));
            }
        }
        Ok(())
    }
}

/// One time step of measurements with the diagonal of the WLS weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSnapshot {
    pub v_nodes: Vec<usize>,
    pub v_hat: Vec<f64>,
    pub p_hat: DVector<f64>,
    pub q_hat: DVector<f64>,
    pub w_v: Vec<f64>,
    pub w_p: DVector<f64>,
    pub w_q: DVector<f64>,
}

impl MeasurementSnapshot {
    pub fn n(&self) -> usize {
        self.p_hat.len()
    }
}

/// Inverse variance of a reading with relative accuracy `sigma` around `nominal`.
pub fn weight(sigma: f64, nominal: f64) -> f64 {
    if sigma == 0.0 {
        EXACT_WEIGHT
    } else {
        1.0 / (sigma * nominal).powi(2)
    }
}

fn noisy(value: f64, sigma: f64, rng: &mut SimRng) -> f64 {
    if sigma == 0.0 {
        value
    } else {
        let g: f64 = rng.sample(StandardNormal);
        value * (1.0 + sigma * g)
    }
}

/// Sample a snapshot; injection weights are normalised by the pseudo-measured
/// magnitudes themselves.
pub fn sample_measurements(
    true_v: &DVector<f64>,
    true_inj: &InjectionVector,
    cfg: &SensorConfig,
    rng: &mut SimRng,
) -> Result<MeasurementSnapshot, SensingError> {
    sample_measurements_with_nominal(true_v, true_inj, cfg, None, rng)
}

/// As [`sample_measurements`], but injection weights use `nominal` (for
/// example the operator's previous estimate) instead of the current draw.
pub fn sample_measurements_with_nominal(
    true_v: &DVector<f64>,
    true_inj: &InjectionVector,
    cfg: &SensorConfig,
    nominal: Option<&InjectionVector>,
    rng: &mut SimRng,
) -> Result<MeasurementSnapshot, SensingError> {
    let n = true_inj.len();
    if true_v.len() != n {
        return Err(SensingError::Dimension { expected: n, got: true_v.len() });
    }
    if let Some(nom) = nominal {
        if nom.len() != n {
            return Err(SensingError::Dimension { expected: n, got: nom.len() });
        }
    }
    cfg.validate(n)?;
    let v_hat: Vec<f64> = cfg.voltage_nodes.iter().map(|&k| noisy(true_v[k - 1], cfg.sigma_v, rng)).collect();
    let p_hat = DVector::from_fn(n, |i, _| noisy(true_inj.p[i], cfg.sigma_p, rng));
    let q_hat = DVector::from_fn(n, |i, _| noisy(true_inj.q[i], cfg.sigma_q, rng));
    let (np, nq) = match nominal {
        Some(nom) => (&nom.p, &nom.q),
        None => (&p_hat, &q_hat),
    };
    let w_p = DVector::from_fn(n, |i, _| weight(cfg.sigma_p, np[i].abs().max(INJECTION_NOMINAL_FLOOR)));
    let w_q = DVector::from_fn(n, |i, _| weight(cfg.sigma_q, nq[i].abs().max(INJECTION_NOMINAL_FLOOR)));
    Ok(MeasurementSnapshot {
        v_nodes: cfg.voltage_nodes.clone(),
        w_v: vec![weight(cfg.sigma_v, 1.0); v_hat.len()],
        v_hat,
        p_hat,
        q_hat,
        w_p,
        w_q,
    })
}

/// Voltage error samples `xi^s`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub samples: Vec<DVector<f64>>,
    pub beta: f64,
}

impl ScenarioSet {
    pub fn new(samples: Vec<DVector<f64>>, beta: f64) -> Result<Self, SensingError> {
        if samples.is_empty() {
            return Err(SensingError::NoSamples);
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(SensingError::BadBeta(beta));
        }
        let n = samples[0].len();
        if let Some(bad) = samples.iter().find(|s| s.len() != n) {
            return Err(SensingError::Dimension { expected: n, got: bad.len() });
        }
        Ok(Self { samples, beta })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n(&self) -> usize {
        self.samples[0].len()
    }
}

pub fn draw_error_samples(
    sigma_xi: f64,
    n_samples: usize,
    n_nodes: usize,
    beta: f64,
    rng: &mut SimRng,
) -> Result<ScenarioSet, SensingError> {
    if n_samples == 0 {
        return Err(SensingError::NoSamples);
    }
    if !(sigma_xi >= 0.0) {
        return Err(SensingError::NegativeSigma(sigma_xi));
    }
    let samples = (0..n_samples)
        .map(|_| {
            DVector::from_fn(n_nodes, |_, _| {
                let g: f64 = rng.sample(StandardNormal);
                sigma_xi * g
            })
        })
        .collect();
    ScenarioSet::new(samples, beta)
}

/// Residuals `measured - estimated` used directly as error samples.
pub fn residual_error_samples(
    history: &[(DVector<f64>, DVector<f64>)],
    beta: f64,
) -> Result<ScenarioSet, SensingError> {
    if history.is_empty() {
        return Err(SensingError::EmptyHistory);
    }
    let mut samples = Vec::with_capacity(history.len());
    for (meas, est) in history {
        if meas.len() != est.len() {
            return Err(SensingError::Dimension { expected: meas.len(), got: est.len() });
        }
        samples.push(meas - est);
    }
    ScenarioSet::new(samples, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(n: usize) -> (DVector<f64>, InjectionVector) {
        let v = DVector::from_fn(n, |i, _| 1.0 + 0.001 * i as f64);
        let inj = InjectionVector::new(
            DVector::from_fn(n, |i, _| 0.05 - 0.01 * i as f64),
            DVector::from_fn(n, |i, _| -0.02 + 0.003 * i as f64),
        )
        .unwrap();
        (v, inj)
    }

    #[test]
    fn zero_noise_is_exact() {
        let (v, inj) = truth(8);
        let cfg = SensorConfig { voltage_nodes: vec![2, 5], sigma_v: 0.0, sigma_p: 0.0, sigma_q: 0.0, seed: 3 };
        let m = sample_measurements(&v, &inj, &cfg, &mut rng_from_seed(3)).unwrap();
        assert_eq!(m.v_hat, vec![v[1], v[4]]);
        assert_eq!(m.p_hat, inj.p);
        assert_eq!(m.q_hat, inj.q);
        assert!(m.w_v.iter().chain(m.w_p.iter()).all(|&w| w == EXACT_WEIGHT));
    }

    #[test]
    fn same_seed_same_snapshot() {
        let (v, inj) = truth(8);
        let cfg = SensorConfig { voltage_nodes: vec![6, 7], ..SensorConfig::default() };
        let a = sample_measurements(&v, &inj, &cfg, &mut rng_from_seed(9)).unwrap();
        let b = sample_measurements(&v, &inj, &cfg, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn voltage_noise_level() {
        let v = DVector::from_element(1, 1.0);
        let inj = InjectionVector::zeros(1);
        let cfg = SensorConfig { voltage_nodes: vec![1], sigma_v: 0.01, sigma_p: 0.0, sigma_q: 0.0, seed: 0 };
        let mut rng = rng_from_seed(11);
        let draws: Vec<f64> =
            (0..100_000).map(|_| sample_measurements(&v, &inj, &cfg, &mut rng).unwrap().v_hat[0]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let std = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64).sqrt();
        assert!((0.0097..=0.0103).contains(&std), "{std}");
    }

    #[test]
    fn weights_times_variance_is_one() {
        let (v, inj) = truth(8);
        let cfg = SensorConfig { voltage_nodes: vec![1, 8], ..SensorConfig::default() };
        let m = sample_measurements(&v, &inj, &cfg, &mut rng_from_seed(5)).unwrap();
        for w in &m.w_v {
            assert!((w * cfg.sigma_v.powi(2) - 1.0).abs() < 1e-12);
        }
        for i in 0..8 {
            let nom = m.p_hat[i].abs().max(INJECTION_NOMINAL_FLOOR);
            assert!((m.w_p[i] * (cfg.sigma_p * nom).powi(2) - 1.0).abs() < 1e-12);
        }
        let nominal = InjectionVector::new(DVector::from_element(8, 0.2), DVector::from_element(8, 0.001)).unwrap();
        let m = sample_measurements_with_nominal(&v, &inj, &cfg, Some(&nominal), &mut rng_from_seed(5)).unwrap();
        assert!((m.w_p[0] - 1.0 / (0.5f64 * 0.2).powi(2)).abs() < 1e-9);
        assert!((m.w_q[0] - 1.0 / (0.5f64 * 0.01).powi(2)).abs() < 1e-6);
    }

    #[test]
    fn error_samples() {
        let zero = draw_error_samples(0.0, 5, 3, 0.1, &mut rng_from_seed(1)).unwrap();
        assert!(zero.samples.iter().all(|s| s.iter().all(|&x| x == 0.0)));
        let s = draw_error_samples(0.01, 10_000, 4, 0.1, &mut rng_from_seed(2)).unwrap();
        assert_eq!(s.len(), 10_000);
        for i in 0..4 {
            let mean = s.samples.iter().map(|x| x[i]).sum::<f64>() / 1e4;
            assert!(mean.abs() < 3.0 * 0.01 / 100.0, "{mean}");
        }
        assert!(draw_error_samples(0.01, 0, 4, 0.1, &mut rng_from_seed(2)).is_err());
    }

    #[test]
    fn residual_samples() {
        let a = DVector::from_vec(vec![1.0, 1.01]);
        let same = residual_error_samples(&[(a.clone(), a.clone())], 0.05).unwrap();
        assert!(same.samples[0].iter().all(|&x| x == 0.0));
        let b = DVector::from_vec(vec![0.99, 1.0]);
        let two = residual_error_samples(&[(a.clone(), b.clone()), (b, a)], 0.05).unwrap();
        assert_eq!(two.len(), 2);
        assert!(residual_error_samples(&[], 0.05).is_err());
    }
}
