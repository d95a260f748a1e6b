//! Exogenous inputs: load and PV-availability time series, from CSV or synthesized.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::devices::DerUnit;
use crate::network::InjectionVector;
use crate::sensing::rng_from_seed;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot access time series: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("{what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("row {row}: timestamps are not uniformly spaced")]
    NonUniform { row: usize },
    #[error("row {row}: negative PV availability in '{column}'")]
    NegativeAvailability { row: usize, column: String },
}

/// Per-second exogenous inputs. Loads are injections (consumption negative).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub t: Vec<f64>,
    pub p_load: DMatrix<f64>,
    pub q_load: DMatrix<f64>,
    /// One column per DER, in `der_nodes` order.
    pub p_av: DMatrix<f64>,
    pub der_nodes: Vec<usize>,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn n(&self) -> usize {
        self.p_load.ncols()
    }

    pub fn loads_at(&self, k: usize) -> InjectionVector {
        InjectionVector {
            p: self.p_load.row(k).transpose(),
            q: self.q_load.row(k).transpose(),
        }
    }

    pub fn p_av_at(&self, k: usize) -> Vec<f64> {
        self.p_av.row(k).iter().copied().collect()
    }

    /// Check dimensions against a feeder with `n` nodes and the given DER nodes.
    pub fn check_against(&self, n: usize, der_nodes: &[usize]) -> Result<(), ScenarioError> {
        if self.n() != n {
            return Err(ScenarioError::Dimension { what: "load columns", expected: n, got: self.n() });
        }
        if self.der_nodes != der_nodes {
            return Err(ScenarioError::Dimension {
                what: "availability columns",
                expected: der_nodes.len(),
                got: self.der_nodes.len(),
            });
        }
        Ok(())
    }
}

fn header_names(n: usize, der_nodes: &[usize]) -> Vec<String> {
    let mut h = vec!["t_s".to_string()];
    h.extend((1..=n).map(|i| format!("p_load_{i}")));
    h.extend((1..=n).map(|i| format!("q_load_{i}")));
    h.extend(der_nodes.iter().map(|i| format!("p_av_{i}")));
    h
}

/// Parse a time series for a feeder with `n` nodes and DERs at `der_nodes`.
/// Extra columns are ignored.
pub fn parse_timeseries(text: &str, n: usize, der_nodes: &[usize]) -> Result<TimeSeries, ScenarioError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| ScenarioError::Parse { row: 0, msg: e.to_string() })?.clone();
    let position: HashMap<&str, usize> = headers.iter().enumerate().map(|(k, h)| (h, k)).collect();
    let wanted = header_names(n, der_nodes);
    let cols = wanted
        .iter()
        .map(|name| position.get(name.as_str()).copied().ok_or_else(|| ScenarioError::MissingColumn(name.clone())))
        .collect::<Result<Vec<_>, _>>()?;

    let mut t = Vec::new();
    let mut pl = Vec::new();
    let mut ql = Vec::new();
    let mut pav = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| ScenarioError::Parse { row, msg: e.to_string() })?;
        let val = |c: usize| -> Result<f64, ScenarioError> {
            let raw = rec.get(cols[c]).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ScenarioError::Parse { row, msg: format!("bad value '{raw}' in '{}'", wanted[c]) })
        };
        t.push(val(0)?);
        for i in 0..n {
            pl.push(val(1 + i)?);
            ql.push(val(1 + n + i)?);
        }
        for d in 0..der_nodes.len() {
            let v = val(1 + 2 * n + d)?;
            if v < 0.0 {
                return Err(ScenarioError::NegativeAvailability { row, column: wanted[1 + 2 * n + d].clone() });
            }
            pav.push(v);
        }
    }
    if t.len() > 2 {
        let dt = t[1] - t[0];
        for k in 1..t.len() {
            let step = t[k] - t[k - 1];
            if !(step > 0.0) || (step - dt).abs() > 1e-9 * dt.abs().max(1.0) {
                return Err(ScenarioError::NonUniform { row: k + 1 });
            }
        }
    } else if t.len() == 2 && !(t[1] > t[0]) {
        return Err(ScenarioError::NonUniform { row: 2 });
    }
    let rows = t.len();
    Ok(TimeSeries {
        t,
        p_load: DMatrix::from_row_slice(rows, n, &pl),
        q_load: DMatrix::from_row_slice(rows, n, &ql),
        p_av: DMatrix::from_row_slice(rows, der_nodes.len(), &pav),
        der_nodes: der_nodes.to_vec(),
    })
}

pub fn load_timeseries(path: impl AsRef<Path>, n: usize, der_nodes: &[usize]) -> Result<TimeSeries, ScenarioError> {
    parse_timeseries(&fs::read_to_string(path)?, n, der_nodes)
}

pub fn write_timeseries(path: impl AsRef<Path>, ts: &TimeSeries) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(header_names(ts.n(), &ts.der_nodes)).map_err(csv_io)?;
    for k in 0..ts.len() {
        let mut rec = vec![ts.t[k].to_string()];
        rec.extend(ts.p_load.row(k).iter().map(f64::to_string));
        rec.extend(ts.q_load.row(k).iter().map(f64::to_string));
        rec.extend(ts.p_av.row(k).iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> ScenarioError {
    ScenarioError::Io(std::io::Error::other(e))
}

/// Nominal consumption per node from `node,...,p_pu,q_pu` rows (consumption positive).
pub fn parse_base_loads(text: &str, n: usize) -> Result<InjectionVector, ScenarioError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| ScenarioError::Parse { row: 0, msg: e.to_string() })?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| ScenarioError::MissingColumn(name.to_string()))
    };
    let (cn, cp, cq) = (col("node")?, col("p_pu")?, col("q_pu")?);
    let mut out = InjectionVector::zeros(n);
    let mut seen = vec![false; n];
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| ScenarioError::Parse { row, msg: e.to_string() })?;
        let bad = |what: &str| ScenarioError::Parse { row, msg: format!("bad {what}") };
        let node: usize = rec.get(cn).and_then(|s| s.parse().ok()).ok_or_else(|| bad("node"))?;
        if node == 0 || node > n || seen[node - 1] {
            return Err(bad("node (out of range or repeated)"));
        }
        seen[node - 1] = true;
        out.p[node - 1] = rec.get(cp).and_then(|s| s.parse().ok()).ok_or_else(|| bad("p_pu"))?;
        out.q[node - 1] = rec.get(cq).and_then(|s| s.parse().ok()).ok_or_else(|| bad("q_pu"))?;
    }
    Ok(out)
}

pub fn load_base_loads(path: impl AsRef<Path>, n: usize) -> Result<InjectionVector, ScenarioError> {
    parse_base_loads(&fs::read_to_string(path)?, n)
}

/// Shape of the synthetic day.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    /// Clock time of the first sample, hours.
    pub start_hour: f64,
    pub sunrise_hour: f64,
    pub sunset_hour: f64,
    /// Load multiplier `mean + swing cos(pi (h - 12) / 12)`.
    pub load_mean: f64,
    pub load_swing: f64,
    /// Stationary std of the relative AR(1) load noise and its time constant.
    pub load_noise: f64,
    pub load_noise_tau_s: f64,
    /// Cloud multiplier `x += k (1 - x) + s g`, clipped to [0, 1].
    pub cloud_reversion: f64,
    pub cloud_volatility: f64,
    /// Clear-sky peak as a fraction of the inverter rating.
    pub pv_peak_fraction: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            start_hour: 10.0,
            sunrise_hour: 6.0,
            sunset_hour: 18.0,
            load_mean: 0.45,
            load_swing: 0.1,
            load_noise: 0.02,
            load_noise_tau_s: 300.0,
            cloud_reversion: 0.002,
            cloud_volatility: 0.01,
            pv_peak_fraction: 0.98,
        }
    }
}

/// Half-sine clear-sky shape, zero outside daylight.
pub fn clear_sky(hour: f64, params: &SynthParams) -> f64 {
    let h = hour.rem_euclid(24.0);
    if h <= params.sunrise_hour || h >= params.sunset_hour {
        return 0.0;
    }
    (std::f64::consts::PI * (h - params.sunrise_hour) / (params.sunset_hour - params.sunrise_hour)).sin()
}

/// Deterministic synthetic day. Per step the draws are: one cloud shock, then
/// one load shock per node.
pub fn synth_profiles(
    base: &InjectionVector,
    fleet: &[DerUnit],
    duration_s: usize,
    seed: u64,
    params: &SynthParams,
) -> TimeSeries {
    let n = base.len();
    let mut rng = rng_from_seed(seed);
    let a = if params.load_noise_tau_s > 0.0 { (-1.0 / params.load_noise_tau_s).exp() } else { 0.0 };
    let kick = params.load_noise * (1.0 - a * a).sqrt();
    let mut cloud: f64 = 1.0;
    let mut noise = DVector::<f64>::zeros(n);
    let mut t = Vec::with_capacity(duration_s);
    let mut pl = DMatrix::zeros(duration_s, n);
    let mut ql = DMatrix::zeros(duration_s, n);
    let mut pav = DMatrix::zeros(duration_s, fleet.len());
    for k in 0..duration_s {
        let hour = params.start_hour + k as f64 / 3600.0;
        let g: f64 = rng.sample(StandardNormal);
        cloud = (cloud + params.cloud_reversion * (1.0 - cloud) + params.cloud_volatility * g).clamp(0.0, 1.0);
        for e in noise.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *e = a * *e + kick * g;
        }
        let level = params.load_mean + params.load_swing * (std::f64::consts::PI * (hour - 12.0) / 12.0).cos();
        for i in 0..n {
            let f = level * (1.0 + noise[i].clamp(-0.9, 0.9));
            pl[(k, i)] = -base.p[i] * f;
            ql[(k, i)] = -base.q[i] * f;
        }
        let sun = clear_sky(hour, params) * cloud;
        for (d, unit) in fleet.iter().enumerate() {
            pav[(k, d)] = sun * params.pv_peak_fraction * unit.s_rating;
        }
        t.push(k as f64);
    }
    TimeSeries { t, p_load: pl, q_load: ql, p_av: pav, der_nodes: fleet.iter().map(|u| u.node).collect() }
}
