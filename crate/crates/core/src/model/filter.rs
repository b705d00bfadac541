use nalgebra::{DMatrix, DVector};

use super::{DataSet, LpvSsModel, NoiseModel};
use crate::error::{Error, Result};
use crate::linalg::symmetrize;

/// Output of the scheduling-dependent Kalman recursion in innovation form.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// `K_t`, one `nx × ny` gain per sample.
    pub gains: Vec<DMatrix<f64>>,
    /// `Ξ_t`, innovation covariance per sample.
    pub innovation_cov: Vec<DMatrix<f64>>,
    /// `P_{t|t-1}` per sample.
    pub state_cov: Vec<DMatrix<f64>>,
    /// One-step-ahead predictions `ŷ_{t|t-1}` (`ny × N`).
    pub y_pred: DMatrix<f64>,
}

/// Runs the Riccati recursion of the innovation form of a general-noise model:
///
/// ```text
/// Ξ_t     = C P C' + H R H'
/// K_t     = (A P C' + G S H') Ξ_t⁻¹
/// P_{t+1} = A P A' − K_t Ξ_t K_t' + G Q G'
/// ```
///
/// with all matrices evaluated at `p_t`. The initial state is zero-mean with covariance `p0`.
pub fn innovation_filter(model: &LpvSsModel, data: &DataSet, p0: &DMatrix<f64>) -> Result<FilterOutput> {
    let NoiseModel::General(noise) = &model.noise else {
        return Err(Error::InvalidArgument("innovation_filter needs a general noise block".into()));
    };
    let nx = model.nx();
    if p0.shape() != (nx, nx) {
        return Err(Error::Dimension(format!("P0 is {:?}, expected ({nx}, {nx})", p0.shape())));
    }
    check_data(model, data)?;
    let n = data.len();
    let psi = model.basis.eval_trajectory(&data.p)?;

    let mut gains = Vec::with_capacity(n);
    let mut innovation_cov = Vec::with_capacity(n);
    let mut state_cov = Vec::with_capacity(n);
    let mut y_pred = DMatrix::zeros(model.ny(), n);
    let mut x = DVector::zeros(nx);
    let mut p = p0.clone();
    symmetrize(&mut p);

    for t in 0..n {
        let psi_t = psi.column(t);
        let psi_t = psi_t.as_slice();
        let sm = model.step_matrices(psi_t);
        let g = noise.g.eval_psi(psi_t);
        let h = noise.h.eval_psi(psi_t);

        let mut xi = &sm.c * &p * sm.c.transpose() + &h * &noise.r * h.transpose();
        symmetrize(&mut xi);
        let chol = xi.clone().cholesky().ok_or(Error::SingularInnovation { time: t })?;
        let cross = &sm.a * &p * sm.c.transpose() + &g * &noise.s * h.transpose();
        // K = cross Ξ⁻¹  ⇔  Ξ Kᵀ = crossᵀ
        let k = chol.solve(&cross.transpose()).transpose();

        let ut = data.u.column(t);
        let yhat = &sm.c * &x + &sm.d * ut;
        let e = data.y.column(t) - &yhat;
        y_pred.set_column(t, &yhat);
        x = &sm.a * &x + &sm.b * ut + &k * e;

        state_cov.push(p.clone());
        let mut p_next = &sm.a * &p * sm.a.transpose() - &k * &xi * k.transpose() + &g * &noise.q * g.transpose();
        symmetrize(&mut p_next);
        p = p_next;

        gains.push(k);
        innovation_cov.push(xi);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                time: t + 1,
                detail: "filter state is not finite".into(),
            });
        }
    }
    Ok(FilterOutput {
        gains,
        innovation_cov,
        state_cov,
        y_pred,
    })
}

fn check_data(model: &LpvSsModel, data: &DataSet) -> Result<()> {
    if data.nu() != model.nu() || data.ny() != model.ny() || data.np() != model.basis.np {
        return Err(Error::Dimension(format!(
            "data has (nu, np, ny) = ({}, {}, {}), model expects ({}, {}, {})",
            data.nu(),
            data.np(),
            data.ny(),
            model.nu(),
            model.basis.np,
            model.ny()
        )));
    }
    Ok(())
}

/// One-step-ahead output prediction with zero initial state.
///
/// Noise-free models predict by simulation, innovation-form models run the
/// fixed-gain predictor, and general-noise models run [`innovation_filter`].
pub fn one_step_predict(model: &LpvSsModel, data: &DataSet) -> Result<DMatrix<f64>> {
    check_data(model, data)?;
    match &model.noise {
        NoiseModel::NoiseFree => {
            let sim = super::simulate(model, &data.u, &data.p, &DVector::zeros(model.nx()), 0)?;
            Ok(sim.y)
        }
        NoiseModel::General(_) => {
            Ok(innovation_filter(model, data, &DMatrix::zeros(model.nx(), model.nx()))?.y_pred)
        }
        NoiseModel::Innovation(inn) => {
            let psi = model.basis.eval_trajectory(&data.p)?;
            let n = data.len();
            let mut x = DVector::zeros(model.nx());
            let mut y_pred = DMatrix::zeros(model.ny(), n);
            for t in 0..n {
                let psi_t = psi.column(t);
                let sm = model.step_matrices(psi_t.as_slice());
                let k = inn.k.eval_psi(psi_t.as_slice());
                let ut = data.u.column(t);
                let yhat = &sm.c * &x + &sm.d * ut;
                let e = data.y.column(t) - &yhat;
                y_pred.set_column(t, &yhat);
                x = &sm.a * &x + &sm.b * ut + k * e;
                if x.iter().any(|v| !v.is_finite() || v.abs() > 1e100) {
                    return Err(Error::Diverged {
                        time: t + 1,
                        detail: "one-step predictor is unstable".into(),
                    });
                }
            }
            Ok(y_pred)
        }
    }
}
