use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataSet, LpvSsModel, NoiseModel};
use crate::error::{Error, Result};
use crate::linalg;

/// States larger than this are reported as divergence.
const DIVERGENCE_BOUND: f64 = 1e100;

fn check_inputs(model: &LpvSsModel, u: &DMatrix<f64>, p: &DMatrix<f64>, x0: &DVector<f64>) -> Result<()> {
    if u.nrows() != model.nu() {
        return Err(Error::Dimension(format!("u has {} channels, model expects {}", u.nrows(), model.nu())));
    }
    if p.ncols() != u.ncols() {
        return Err(Error::Dimension(format!("u has {} samples, p has {}", u.ncols(), p.ncols())));
    }
    if x0.len() != model.nx() {
        return Err(Error::Dimension(format!("x0 has {} entries, model has nx = {}", x0.len(), model.nx())));
    }
    Ok(())
}

fn check_state(x: &DVector<f64>, t: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
        return Err(Error::Diverged {
            time: t,
            detail: format!(
                "state norm {:.3e}; the model is not stable along this scheduling trajectory",
                x.norm()
            ),
        });
    }
    Ok(())
}

/// Runs the state recursion with additive noise terms supplied per step by `noise(t, psi)`,
/// which returns the state and output disturbances. Also runs the noise-free recursion
/// from the same `x0`.
fn run(
    model: &LpvSsModel,
    u: &DMatrix<f64>,
    p: &DMatrix<f64>,
    x0: &DVector<f64>,
    mut noise: impl FnMut(usize, &[f64]) -> Option<(DVector<f64>, DVector<f64>)>,
) -> Result<DataSet> {
    check_inputs(model, u, p, x0)?;
    let n = u.ncols();
    let psi = model.basis.eval_trajectory(p)?;
    let mut y = DMatrix::zeros(model.ny(), n);
    let mut yd = DMatrix::zeros(model.ny(), n);
    let mut x = x0.clone();
    let mut xd = x0.clone();
    let mut any_noise = false;
    for t in 0..n {
        let psi_t = psi.column(t);
        let sm = model.step_matrices(psi_t.as_slice());
        let ut = u.column(t);
        let yd_t = &sm.c * &xd + &sm.d * ut;
        yd.set_column(t, &yd_t);
        let xd_next = &sm.a * &xd + &sm.b * ut;
        match noise(t, psi_t.as_slice()) {
            Some((wx, vy)) => {
                any_noise = true;
                let y_t = &sm.c * &x + &sm.d * ut + vy;
                y.set_column(t, &y_t);
                x = &sm.a * &x + &sm.b * ut + wx;
            }
            None => {
                y.set_column(t, &yd_t);
                x = xd_next.clone();
            }
        }
        xd = xd_next;
        check_state(&x, t + 1)?;
        check_state(&xd, t + 1)?;
    }
    if !any_noise {
        y.copy_from(&yd);
    }
    DataSet::new(u.clone(), p.clone(), y, Some(yd))
}

/// Simulates the data-generating system. Noise is drawn according to the model's noise
/// block (jointly Gaussian `[w; v] ~ N(0, Σ)`, or innovations `ξ ~ N(0, Ξ)`), seeded for
/// reproducibility. The returned data set carries the noise-free output in `yd`.
pub fn simulate(
    model: &LpvSsModel,
    u: &DMatrix<f64>,
    p: &DMatrix<f64>,
    x0: &DVector<f64>,
    seed: u64,
) -> Result<DataSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nx = model.nx();
    let ny = model.ny();
    match &model.noise {
        NoiseModel::NoiseFree => run(model, u, p, x0, |_, _| None),
        NoiseModel::General(g) => {
            let l = linalg::cholesky(&g.sigma(), "noise covariance Σ")?.unpack();
            run(model, u, p, x0, |_, psi| {
                let z = DVector::from_fn(nx + ny, |_, _| StandardNormal.sample(&mut rng));
                let wv = &l * z;
                let w = wv.rows(0, nx).into_owned();
                let v = wv.rows(nx, ny).into_owned();
                Some((g.g.eval_psi(psi) * w, g.h.eval_psi(psi) * v))
            })
        }
        NoiseModel::Innovation(inn) => {
            let l = linalg::cholesky(&inn.xi, "innovation covariance Ξ")?.unpack();
            run(model, u, p, x0, |_, psi| {
                let z = DVector::from_fn(ny, |_, _| StandardNormal.sample(&mut rng));
                let xi = &l * z;
                Some((inn.k.eval_psi(psi) * &xi, xi))
            })
        }
    }
}

/// Simulates an innovation-form model with an explicit innovation sequence `xi` (`ny × N`).
/// The model's `Ξ` is ignored.
pub fn simulate_with_innovations(
    model: &LpvSsModel,
    u: &DMatrix<f64>,
    p: &DMatrix<f64>,
    x0: &DVector<f64>,
    xi: &DMatrix<f64>,
) -> Result<DataSet> {
    let NoiseModel::Innovation(inn) = &model.noise else {
        return Err(Error::InvalidArgument("model has no innovation noise block".into()));
    };
    if xi.shape() != (model.ny(), u.ncols()) {
        return Err(Error::Dimension(format!(
            "innovation sequence is {:?}, expected {:?}",
            xi.shape(),
            (model.ny(), u.ncols())
        )));
    }
    run(model, u, p, x0, |t, psi| {
        let e = xi.column(t).into_owned();
        Some((inn.k.eval_psi(psi) * &e, e))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AffineMatrixFunction, BasisFunctionSet, GeneralNoise, InnovationNoise};

    fn scalar(a: f64, b: f64, c: f64, d: f64) -> LpvSsModel {
        let s = |v: f64| AffineMatrixFunction::constant(DMatrix::from_element(1, 1, v), 1);
        LpvSsModel::new(s(a), s(b), s(c), s(d), NoiseModel::NoiseFree, BasisFunctionSet::poly_linear(1)).unwrap()
    }

    #[test]
    fn zero_input_zero_state_gives_zero_output() {
        let m = scalar(0.9, 1.0, 1.0, 0.3);
        let d = simulate(&m, &DMatrix::zeros(1, 20), &DMatrix::zeros(1, 20), &DVector::zeros(1), 1).unwrap();
        assert!(d.y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_response_is_geometric() {
        let m = scalar(0.5, 1.0, 1.0, 0.0);
        let mut u = DMatrix::zeros(1, 8);
        u[(0, 0)] = 1.0;
        let d = simulate(&m, &u, &DMatrix::zeros(1, 8), &DVector::zeros(1), 0).unwrap();
        let expected = [0.0, 1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625];
        for (t, e) in expected.iter().enumerate() {
            assert_eq!(d.y[(0, t)], *e);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let m = scalar(0.5, 1.0, 1.0, 0.0);
        let m = m
            .with_noise(NoiseModel::General(GeneralNoise::identity_inputs(
                DMatrix::from_element(1, 1, 0.1),
                DMatrix::from_element(1, 1, 0.2),
                1,
            )))
            .unwrap();
        let u = DMatrix::from_fn(1, 50, |_, t| (t as f64 * 0.3).sin());
        let p = DMatrix::from_fn(1, 50, |_, t| (t as f64 * 0.1).cos() * 0.5);
        let a = simulate(&m, &u, &p, &DVector::zeros(1), 42).unwrap();
        let b = simulate(&m, &u, &p, &DVector::zeros(1), 42).unwrap();
        let c = simulate(&m, &u, &p, &DVector::zeros(1), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.y, c.y);
        assert_eq!(a.yd, c.yd);
    }

    #[test]
    fn divergence_is_reported() {
        let m = scalar(3.0, 1.0, 1.0, 0.0);
        let u = DMatrix::from_element(1, 400, 1.0);
        let r = simulate(&m, &u, &DMatrix::zeros(1, 400), &DVector::zeros(1), 0);
        assert!(matches!(r, Err(Error::Diverged { .. })));
    }

    #[test]
    fn explicit_innovations_match_seeded_draws_when_equal() {
        let m = scalar(0.5, 1.0, 1.0, 0.0)
            .with_noise(NoiseModel::Innovation(InnovationNoise {
                k: AffineMatrixFunction::constant(DMatrix::from_element(1, 1, 0.3), 1),
                xi: DMatrix::identity(1, 1),
            }))
            .unwrap();
        let u = DMatrix::from_element(1, 10, 0.5);
        let p = DMatrix::zeros(1, 10);
        let xi = DMatrix::from_fn(1, 10, |_, t| if t == 3 { 1.0 } else { 0.0 });
        let d = simulate_with_innovations(&m, &u, &p, &DVector::zeros(1), &xi).unwrap();
        let ys = &d.y - d.yd.as_ref().unwrap();
        assert_eq!(ys[(0, 3)], 1.0);
        assert!((ys[(0, 4)] - 0.3).abs() < 1e-15);
        assert!((ys[(0, 5)] - 0.15).abs() < 1e-15);
    }
}
