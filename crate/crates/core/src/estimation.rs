//! Weighted least-squares state estimation on the linear voltage model.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::network::LinearVoltageModel;
use crate::sensing::MeasurementSnapshot;

/// Estimated injections `[p; q]`.
pub type EstimateState = DVector<f64>;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("measurement matrix is rank deficient: rank {rank} < {dim}")]
    RankDeficient { rank: usize, dim: usize },
}

fn check(z: &DVector<f64>, m: &MeasurementSnapshot, model: &LinearVoltageModel) -> Result<(), EstimationError> {
    let n = model.n();
    if m.n() != n {
        return Err(EstimationError::Dimension { expected: n, got: m.n() });
    }
    if z.len() != 2 * n {
        return Err(EstimationError::Dimension { expected: 2 * n, got: z.len() });
    }
    Ok(())
}

fn predicted_at(model: &LinearVoltageModel, z: &DVector<f64>, node: usize) -> f64 {
    let n = model.n();
    let i = node - 1;
    model.v0[i] + model.r.row(i).dot(&z.rows(0, n).transpose()) + model.x.row(i).dot(&z.rows(n, n).transpose())
}

pub fn se_objective(z: &DVector<f64>, m: &MeasurementSnapshot, model: &LinearVoltageModel) -> Result<f64, EstimationError> {
    check(z, m, model)?;
    let n = model.n();
    let mut c = 0.0;
    for i in 0..n {
        c += 0.5 * m.w_p[i] * (m.p_hat[i] - z[i]).powi(2);
        c += 0.5 * m.w_q[i] * (m.q_hat[i] - z[n + i]).powi(2);
    }
    for (k, &node) in m.v_nodes.iter().enumerate() {
        c += 0.5 * m.w_v[k] * (m.v_hat[k] - predicted_at(model, z, node)).powi(2);
    }
    Ok(c)
}

pub fn se_gradient(
    z: &DVector<f64>,
    m: &MeasurementSnapshot,
    model: &LinearVoltageModel,
) -> Result<DVector<f64>, EstimationError> {
    check(z, m, model)?;
    let n = model.n();
    let mut g = DVector::from_fn(2 * n, |k, _| {
        if k < n {
            m.w_p[k] * (z[k] - m.p_hat[k])
        } else {
            m.w_q[k - n] * (z[k] - m.q_hat[k - n])
        }
    });
    for (k, &node) in m.v_nodes.iter().enumerate() {
        let coef = m.w_v[k] * (predicted_at(model, z, node) - m.v_hat[k]);
        let i = node - 1;
        for j in 0..n {
            g[j] += coef * model.r[(i, j)];
            g[n + j] += coef * model.x[(i, j)];
        }
    }
    Ok(g)
}

/// Hessian `H^T W H` of the estimation objective.
pub fn se_hessian(m: &MeasurementSnapshot, model: &LinearVoltageModel) -> DMatrix<f64> {
    let n = model.n();
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        a[(i, i)] = m.w_p[i];
        a[(n + i, n + i)] = m.w_q[i];
    }
    for (k, &node) in m.v_nodes.iter().enumerate() {
        let row = model.sensitivity_row(node - 1);
        a.ger(m.w_v[k], &row, &row, 1.0);
    }
    a
}

/// Normal-equations solution `(H^T W H)^{-1} H^T W (y - offset)`.
pub fn wls_closed_form(m: &MeasurementSnapshot, model: &LinearVoltageModel) -> Result<EstimateState, EstimationError> {
    let n = model.n();
    check(&DVector::zeros(2 * n), m, model)?;
    let a = se_hessian(m, model);
    let mut b = DVector::from_fn(2 * n, |k, _| if k < n { m.w_p[k] * m.p_hat[k] } else { m.w_q[k - n] * m.q_hat[k - n] });
    for (k, &node) in m.v_nodes.iter().enumerate() {
        let row = model.sensitivity_row(node - 1);
        b.axpy(m.w_v[k] * (m.v_hat[k] - model.v0[node - 1]), &row, 1.0);
    }
    let dim = 2 * n;
    match a.clone().cholesky() {
        Some(ch) => Ok(ch.solve(&b)),
        None => {
            let eig = a.symmetric_eigenvalues();
            let scale = eig.amax().max(1.0);
            let rank = eig.iter().filter(|&&e| e > 1e-12 * scale).count();
            Err(EstimationError::RankDeficient { rank, dim })
        }
    }
}
