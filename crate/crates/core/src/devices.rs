//! Inverter capability regions and their Euclidean projection.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::network::InjectionVector;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("cannot read fleet file: {0}")]
    Io(#[from] std::io::Error),
    #[error("fleet line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("DER node {node} is outside 1..={n}")]
    NodeOutOfRange { node: usize, n: usize },
    #[error("DER node {0} listed twice")]
    Duplicate(usize),
    #[error("setpoint vector has {got} nodes, feeder has {expected}")]
    Dimension { expected: usize, got: usize },
}

/// Capability region `{p_min <= p <= p_av, p^2 + q^2 <= s_rating^2}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerCapability {
    pub node: usize,
    pub p_av: f64,
    pub s_rating: f64,
    pub p_min: f64,
}

impl DerCapability {
    pub fn new(node: usize, p_av: f64, s_rating: f64) -> Self {
        Self { node, p_av, s_rating, p_min: 0.0 }
    }

    fn p_bounds(&self) -> (f64, f64) {
        let lo = self.p_min.max(-self.s_rating);
        let hi = self.p_av.min(self.s_rating).max(lo);
        (lo, hi)
    }

    pub fn contains(&self, p: f64, q: f64, tol: f64) -> bool {
        let (lo, hi) = self.p_bounds();
        p >= lo - tol && p <= hi + tol && p.hypot(q) <= self.s_rating + tol
    }
}

/// Closest point of the capability region to `(p, q)`.
pub fn project_feasible(p: f64, q: f64, cap: &DerCapability) -> (f64, f64) {
    let (lo, hi) = cap.p_bounds();
    let s = cap.s_rating;
    let norm = p.hypot(q);
    if p >= lo && p <= hi && norm <= s {
        return (p, q);
    }
    let (dp, dq) = if norm > s { (p * s / norm, q * s / norm) } else { (p, q) };
    if dp >= lo && dp <= hi {
        return (dp, dq);
    }
    let pc = if dp < lo { lo } else { hi };
    let qmax = (s * s - pc * pc).max(0.0).sqrt();
    (pc, q.signum() * q.abs().min(qmax))
}

/// Project every DER independently and zero all non-DER nodes.
pub fn fleet_project(u: &InjectionVector, fleet: &[DerCapability]) -> Result<InjectionVector, DeviceError> {
    let n = u.len();
    let mut out = InjectionVector::zeros(n);
    let mut seen = HashSet::new();
    for cap in fleet {
        if cap.node == 0 || cap.node > n {
            return Err(DeviceError::NodeOutOfRange { node: cap.node, n });
        }
        if !seen.insert(cap.node) {
            return Err(DeviceError::Duplicate(cap.node));
        }
        let i = cap.node - 1;
        let (p, q) = project_feasible(u.p[i], u.q[i], cap);
        out.p[i] = p;
        out.q[i] = q;
    }
    Ok(out)
}

/// A DER as listed in the fleet file; availability comes from the time series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerUnit {
    pub node: usize,
    pub s_rating: f64,
    pub p_min: f64,
}

impl DerUnit {
    pub fn at(&self, p_av: f64) -> DerCapability {
        DerCapability { node: self.node, p_av, s_rating: self.s_rating, p_min: self.p_min }
    }
}

/// Parse `node,s_rating_pu[,p_min_pu]` rows; a header row and `#` comments are allowed.
pub fn parse_fleet(text: &str) -> Result<Vec<DerUnit>, DeviceError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut units = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DeviceError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.get(0) == Some("node") {
            continue;
        }
        if rec.len() < 2 || rec.len() > 3 {
            return Err(DeviceError::Parse { line, msg: "expected node,s_rating_pu[,p_min_pu]".into() });
        }
        let bad = |what: &str| DeviceError::Parse { line, msg: format!("bad {what}") };
        let node: usize = rec[0].parse().map_err(|_| bad("node id"))?;
        let s_rating: f64 = rec[1].parse().map_err(|_| bad("rating"))?;
        if !(s_rating > 0.0) || !s_rating.is_finite() {
            return Err(bad("rating (must be positive)"));
        }
        let p_min = match rec.get(2) {
            Some(v) => v.parse().map_err(|_| bad("p_min"))?,
            None => 0.0,
        };
        if !seen.insert(node) {
            return Err(DeviceError::Duplicate(node));
        }
        units.push(DerUnit { node, s_rating, p_min });
    }
    Ok(units)
}

pub fn load_fleet(path: impl AsRef<Path>) -> Result<Vec<DerUnit>, DeviceError> {
    parse_fleet(&fs::read_to_string(path)?)
}
