//! Radial feeder model, the DistFlow plant solver and the LinDistFlow
//! sensitivity model.
//!
//! Node 0 is the substation. Per-node vectors have length `N` and index
//! node `i` at position `i - 1`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub const SWEEP_TOLERANCE: f64 = 1e-10;
pub const SWEEP_MAX_ITERS: usize = 200;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("cannot read feeder file: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cycle detected at node {node}")]
    Cycle { node: usize },
    #[error("node {node} is not connected to the substation")]
    Disconnected { node: usize },
    #[error("branch {from}->{to} has negative impedance")]
    NegativeImpedance { from: usize, to: usize },
    #[error("substation voltage must be positive, got {0}")]
    BadSubstationVoltage(f64),
    #[error("feeder has no branches")]
    Empty,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("voltage collapse at node {node} (iteration {iteration})")]
    VoltageCollapse { node: usize, iteration: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

/// Validated radial feeder. Lines are stored in file order; `line_into[j]`
/// gives the index of the unique line feeding node `j`.
#[derive(Debug, Clone)]
pub struct FeederModel {
    lines: Vec<Line>,
    v_sub: f64,
    parent: Vec<usize>,
    line_into: Vec<usize>,
    /// Non-root nodes ordered so that every parent precedes its children.
    order: Vec<usize>,
    children: Vec<Vec<usize>>,
    pub base_mva: Option<f64>,
    pub base_kv: Option<f64>,
    /// File id of each internal node; index 0 is the substation.
    pub bus_ids: Vec<u64>,
}

impl FeederModel {
    /// Build from lines whose node ids are already dense `0..=N`.
    pub fn new(lines: Vec<Line>, v_sub: f64) -> Result<Self, NetworkError> {
        if !(v_sub > 0.0) || !v_sub.is_finite() {
            return Err(NetworkError::BadSubstationVoltage(v_sub));
        }
        if lines.is_empty() {
            return Err(NetworkError::Empty);
        }
        let n = lines.len();
        let mut parent = vec![usize::MAX; n + 1];
        let mut line_into = vec![usize::MAX; n + 1];
        for (k, l) in lines.iter().enumerate() {
            if !(l.r >= 0.0 && l.x >= 0.0) {
                return Err(NetworkError::NegativeImpedance { from: l.from, to: l.to });
            }
            for node in [l.from, l.to] {
                if node > n {
                    // More distinct nodes than lines + 1 means some node has no feeding line.
                    return Err(NetworkError::Disconnected { node });
                }
            }
            if l.to == 0 || l.from == l.to || parent[l.to] != usize::MAX {
                return Err(NetworkError::Cycle { node: l.to });
            }
            parent[l.to] = l.from;
            line_into[l.to] = k;
        }
        if let Some(j) = (1..=n).find(|&j| parent[j] == usize::MAX) {
            return Err(NetworkError::Disconnected { node: j });
        }
        // Walk each node up to the root; revisiting a node means a cycle.
        let mut depth = vec![usize::MAX; n + 1];
        depth[0] = 0;
        for j in 1..=n {
            let mut chain = Vec::new();
            let mut cur = j;
            while depth[cur] == usize::MAX {
                if chain.contains(&cur) {
                    return Err(NetworkError::Cycle { node: cur });
                }
                chain.push(cur);
                cur = parent[cur];
            }
            let mut d = depth[cur];
            for &c in chain.iter().rev() {
                d += 1;
                depth[c] = d;
            }
        }
        let mut order: Vec<usize> = (1..=n).collect();
        order.sort_by_key(|&j| (depth[j], j));
        let mut children = vec![Vec::new(); n + 1];
        for &j in &order {
            children[parent[j]].push(j);
        }
        Ok(Self {
            lines,
            v_sub,
            parent,
            line_into,
            order,
            children,
            base_mva: None,
            base_kv: None,
            bus_ids: (0..=n as u64).collect(),
        })
    }

    /// Number of non-substation nodes.
    pub fn n(&self) -> usize {
        self.lines.len()
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn v_sub(&self) -> f64 {
        self.v_sub
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        if node == 0 {
            None
        } else {
            Some(self.parent[node])
        }
    }

    pub fn line_into(&self, node: usize) -> &Line {
        &self.lines[self.line_into[node]]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    /// Nodes on the path from the substation to `node`, excluding node 0.
    pub fn path(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = node;
        while cur != 0 {
            out.push(cur);
            cur = self.parent[cur];
        }
        out.reverse();
        out
    }

    pub fn with_v_sub(&self, v_sub: f64) -> Result<Self, NetworkError> {
        let mut f = Self::new(self.lines.clone(), v_sub)?;
        f.base_mva = self.base_mva;
        f.base_kv = self.base_kv;
        Ok(f)
    }
}

/// Parse feeder text. Node ids may be arbitrary non-negative integers; 0 is
/// the substation and the rest are renumbered by order of first appearance.
pub fn parse_feeder(text: &str) -> Result<FeederModel, NetworkError> {
    let mut header: Option<(Option<f64>, Option<f64>, f64)> = None;
    let mut raw: Vec<(usize, u64, u64, f64, f64)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(rest) = t.strip_prefix('#') {
            if header.is_none() && rest.contains("v_sub") {
                header = Some(parse_header(rest, lineno)?);
            }
            continue;
        }
        let body = t.split('#').next().unwrap_or("");
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(body.as_bytes());
        let rec = match rdr.records().next() {
            Some(Ok(r)) => r,
            Some(Err(e)) => return Err(NetworkError::Parse { line: lineno, msg: e.to_string() }),
            None => continue,
        };
        if rec.get(0) == Some("from") {
            continue;
        }
        if rec.len() != 4 {
            return Err(NetworkError::Parse {
                line: lineno,
                msg: format!("expected 4 fields from,to,r_pu,x_pu, found {}", rec.len()),
            });
        }
        let id = |s: &str| {
            s.parse::<u64>().map_err(|_| NetworkError::Parse {
                line: lineno,
                msg: format!("bad node id '{s}'"),
            })
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| NetworkError::Parse {
                    line: lineno,
                    msg: format!("bad number '{s}'"),
                })
        };
        raw.push((lineno, id(&rec[0])?, id(&rec[1])?, num(&rec[2])?, num(&rec[3])?));
    }
    let (base_mva, base_kv, v_sub) = header.ok_or(NetworkError::Parse {
        line: 1,
        msg: "missing header '# base_mva=<f>, base_kv=<f>, v_sub=<f>'".into(),
    })?;
    let mut ids: HashMap<u64, usize> = HashMap::new();
    ids.insert(0, 0);
    let mut lines = Vec::with_capacity(raw.len());
    for &(_, a, b, r, x) in &raw {
        let next = ids.len();
        let from = *ids.entry(a).or_insert(next);
        let next = ids.len();
        let to = *ids.entry(b).or_insert(next);
        lines.push(Line { from, to, r, x });
    }
    let mut f = FeederModel::new(lines, v_sub)?;
    let mut bus_ids = vec![0; ids.len()];
    for (&bus, &k) in &ids {
        bus_ids[k] = bus;
    }
    f.bus_ids = bus_ids;
    f.base_mva = base_mva;
    f.base_kv = base_kv;
    Ok(f)
}

fn parse_header(rest: &str, line: usize) -> Result<(Option<f64>, Option<f64>, f64), NetworkError> {
    let mut mva = None;
    let mut kv = None;
    let mut vs = None;
    for part in rest.split(',') {
        let Some((k, v)) = part.split_once('=') else { continue };
        let v: f64 = v.trim().parse().map_err(|_| NetworkError::Parse {
            line,
            msg: format!("bad header value '{}'", v.trim()),
        })?;
        match k.trim() {
            "base_mva" => mva = Some(v),
            "base_kv" => kv = Some(v),
            "v_sub" => vs = Some(v),
            other => {
                return Err(NetworkError::Parse { line, msg: format!("unknown header key '{other}'") })
            }
        }
    }
    let vs = vs.ok_or(NetworkError::Parse { line, msg: "header lacks v_sub".into() })?;
    Ok((mva, kv, vs))
}

pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederModel, NetworkError> {
    parse_feeder(&fs::read_to_string(path)?)
}

/// Nodal injections, generation positive.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionVector {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

impl InjectionVector {
    pub fn new(p: DVector<f64>, q: DVector<f64>) -> Result<Self, NetworkError> {
        if p.len() != q.len() {
            return Err(NetworkError::Dimension { expected: p.len(), got: q.len() });
        }
        Ok(Self { p, q })
    }

    pub fn zeros(n: usize) -> Self {
        Self { p: DVector::zeros(n), q: DVector::zeros(n) }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// `[p; q]`
    pub fn stacked(&self) -> DVector<f64> {
        let n = self.len();
        DVector::from_fn(2 * n, |i, _| if i < n { self.p[i] } else { self.q[i - n] })
    }

    pub fn from_stacked(z: &DVector<f64>) -> Self {
        let n = z.len() / 2;
        Self { p: z.rows(0, n).into_owned(), q: z.rows(n, n).into_owned() }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { p: &self.p * s, q: &self.q * s }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self { p: &self.p + &other.p, q: &self.q + &other.q }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchFlow {
    pub p: f64,
    pub q: f64,
    pub l_sq: f64,
}

#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    pub v: DVector<f64>,
    /// Indexed like the feeder's lines.
    pub flows: Vec<BranchFlow>,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
}

/// Backward-forward sweep on the DistFlow equations.
pub fn solve_distflow(feeder: &FeederModel, inj: &InjectionVector) -> Result<PowerFlowSolution, NetworkError> {
    solve_distflow_with(feeder, inj, SWEEP_TOLERANCE, SWEEP_MAX_ITERS)
}

pub fn solve_distflow_with(
    feeder: &FeederModel,
    inj: &InjectionVector,
    tol: f64,
    max_iters: usize,
) -> Result<PowerFlowSolution, NetworkError> {
    let n = feeder.n();
    if inj.len() != n {
        return Err(NetworkError::Dimension { expected: n, got: inj.len() });
    }
    let v0sq = feeder.v_sub * feeder.v_sub;
    let mut vsq = vec![v0sq; n + 1];
    let mut lsq = vec![0.0; n + 1];
    let mut pf = vec![0.0; n + 1];
    let mut qf = vec![0.0; n + 1];
    let mut converged = false;
    let mut iterations = 0;
    let mut change = f64::INFINITY;
    while iterations < max_iters {
        iterations += 1;
        backward(feeder, inj, &lsq, &mut pf, &mut qf);
        change = 0.0;
        for &j in &feeder.order {
            let i = feeder.parent[j];
            let l = feeder.line_into(j);
            let new = vsq[i] - 2.0 * (l.r * pf[j] + l.x * qf[j]) + (l.r * l.r + l.x * l.x) * lsq[j];
            if !(new > 0.0) {
                return Err(NetworkError::VoltageCollapse { node: j, iteration: iterations });
            }
            change = f64::max(change, (new - vsq[j]).abs());
            vsq[j] = new;
        }
        for &j in &feeder.order {
            lsq[j] = (pf[j] * pf[j] + qf[j] * qf[j]) / vsq[feeder.parent[j]];
        }
        if change < tol {
            converged = true;
            break;
        }
    }
    backward(feeder, inj, &lsq, &mut pf, &mut qf);
    let mut flows = vec![BranchFlow { p: 0.0, q: 0.0, l_sq: 0.0 }; n];
    for j in 1..=n {
        flows[feeder.line_into[j]] = BranchFlow { p: pf[j], q: qf[j], l_sq: lsq[j] };
    }
    let v = DVector::from_fn(n, |i, _| vsq[i + 1].sqrt());
    let residual = if converged {
        equation_residual(feeder, inj, &v, &flows)
    } else {
        change
    };
    Ok(PowerFlowSolution { v, flows, converged, iterations, residual })
}

fn backward(feeder: &FeederModel, inj: &InjectionVector, lsq: &[f64], pf: &mut [f64], qf: &mut [f64]) {
    for &j in feeder.order.iter().rev() {
        let l = feeder.line_into(j);
        let mut p = -inj.p[j - 1] + l.r * lsq[j];
        let mut q = -inj.q[j - 1] + l.x * lsq[j];
        for &k in &feeder.children[j] {
            p += pf[k];
            q += qf[k];
        }
        pf[j] = p;
        qf[j] = q;
    }
}

/// Largest absolute violation of the four DistFlow equation families at a
/// candidate solution.
pub fn equation_residual(feeder: &FeederModel, inj: &InjectionVector, v: &DVector<f64>, flows: &[BranchFlow]) -> f64 {
    let vsq = |node: usize| if node == 0 { feeder.v_sub * feeder.v_sub } else { v[node - 1] * v[node - 1] };
    let mut worst: f64 = 0.0;
    for (k, l) in feeder.lines.iter().enumerate() {
        let j = l.to;
        let f = flows[k];
        let (mut sp, mut sq) = (0.0, 0.0);
        for &c in &feeder.children[j] {
            let fc = flows[feeder.line_into[c]];
            sp += fc.p;
            sq += fc.q;
        }
        worst = worst.max((f.p - (-inj.p[j - 1] + sp + l.r * f.l_sq)).abs());
        worst = worst.max((f.q - (-inj.q[j - 1] + sq + l.x * f.l_sq)).abs());
        let vj = vsq(l.from) - 2.0 * (l.r * f.p + l.x * f.q) + (l.r * l.r + l.x * l.x) * f.l_sq;
        worst = worst.max((vsq(j) - vj).abs());
        worst = worst.max((f.l_sq - (f.p * f.p + f.q * f.q) / vsq(l.from)).abs());
    }
    worst
}

/// `v = R p + X q + v0`
#[derive(Debug, Clone, PartialEq)]
pub struct LinearVoltageModel {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub v0: DVector<f64>,
}

impl LinearVoltageModel {
    pub fn n(&self) -> usize {
        self.v0.len()
    }

    /// Row `i` of `[R X]`.
    pub fn sensitivity_row(&self, i: usize) -> DVector<f64> {
        let n = self.n();
        DVector::from_fn(2 * n, |k, _| if k < n { self.r[(i, k)] } else { self.x[(i, k - n)] })
    }

    /// `[R X]` as an `N x 2N` matrix.
    pub fn sensitivity(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut h = DMatrix::zeros(n, 2 * n);
        h.view_mut((0, 0), (n, n)).copy_from(&self.r);
        h.view_mut((0, n), (n, n)).copy_from(&self.x);
        h
    }

    /// Predicted voltages for stacked injections `[p; q]`.
    pub fn predict_stacked(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        &self.r * z.rows(0, n) + &self.x * z.rows(n, n) + &self.v0
    }

    /// `[R X]^T w`, the pullback of a per-node weight vector.
    pub fn pullback(&self, w: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let a = self.r.tr_mul(w);
        let b = self.x.tr_mul(w);
        DVector::from_fn(2 * n, |k, _| if k < n { a[k] } else { b[k - n] })
    }
}

pub fn build_linear_model(feeder: &FeederModel) -> LinearVoltageModel {
    let n = feeder.n();
    // Cumulative path impedance from the substation to each node.
    let mut cr = vec![0.0; n + 1];
    let mut cx = vec![0.0; n + 1];
    for &j in &feeder.order {
        let l = feeder.line_into(j);
        cr[j] = cr[feeder.parent[j]] + l.r;
        cx[j] = cx[feeder.parent[j]] + l.x;
    }
    let paths: Vec<Vec<usize>> = (1..=n).map(|j| feeder.path(j)).collect();
    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            // Deepest common ancestor on both paths.
            let common = paths[i].iter().zip(&paths[j]).take_while(|(a, b)| a == b).last().map(|(a, _)| *a);
            let (sr, sx) = common.map_or((0.0, 0.0), |c| (cr[c], cx[c]));
            r[(i, j)] = sr / feeder.v_sub;
            r[(j, i)] = sr / feeder.v_sub;
            x[(i, j)] = sx / feeder.v_sub;
            x[(j, i)] = sx / feeder.v_sub;
        }
    }
    LinearVoltageModel { r, x, v0: DVector::from_element(n, feeder.v_sub) }
}

pub fn predict_voltage(model: &LinearVoltageModel, inj: &InjectionVector) -> Result<DVector<f64>, NetworkError> {
    if inj.len() != model.n() {
        return Err(NetworkError::Dimension { expected: model.n(), got: inj.len() });
    }
    Ok(&model.r * &inj.p + &model.x * &inj.q + &model.v0)
}
