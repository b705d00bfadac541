use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{AffineMatrixFunction, BasisFunctionSet, InnovationNoise, LpvSsModel, ModelDims, NoiseModel};
use crate::error::{Error, Result};
use crate::linalg::norm2;

/// Draws a random model with Gaussian coefficients and an affine basis `ψ⁽ⁱ⁾ = pᵢ` on `[-1, 1]^nψ`.
///
/// The `A` blocks are rescaled so that `‖A₀‖₂ + Σᵢ ‖Aᵢ‖₂ · max_P |ψ⁽ⁱ⁾| ≤ ρ`, which makes
/// `x ↦ A(p)x` a contraction for every scheduling value (Lyapunov matrix `I`). The model
/// carries a constant innovation gain `K`, scaled so that the one-step predictor matrix
/// `A(p) − K C(p)` satisfies the same bound with margin `(1 + ρ) / 2`, and `Ξ = I`.
pub fn random_stable_model(dims: ModelDims, rho: f64, seed: u64) -> Result<LpvSsModel> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!("stability margin must lie in (0, 1), got {rho}")));
    }
    let ModelDims { nx, nu, ny, npsi } = dims;
    if nx == 0 {
        return Err(Error::InvalidArgument("nx must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
    let basis = BasisFunctionSet::poly_linear(npsi);

    let a_raw: Vec<DMatrix<f64>> = (0..=npsi).map(|_| gauss(nx, nx)).collect();
    let b = (0..=npsi).map(|_| gauss(nx, nu)).collect();
    let c: Vec<DMatrix<f64>> = (0..=npsi).map(|_| gauss(ny, nx)).collect();
    let d = (0..=npsi).map(|_| gauss(ny, nu)).collect();
    let k = gauss(nx, ny);

    let bound: f64 = a_raw.iter().enumerate().map(|(i, a)| norm2(a) * basis.sup_abs(i)).sum();
    let scale = if bound > 0.0 { rho / bound } else { 1.0 };
    let a: Vec<DMatrix<f64>> = a_raw.into_iter().map(|m| m * scale).collect();

    let c_bound: f64 = c.iter().enumerate().map(|(i, m)| norm2(m) * basis.sup_abs(i)).sum();
    let k_norm = norm2(&k);
    let slack = 0.5 * (1.0 - rho);
    let k_scale = if k_norm * c_bound > 0.0 {
        (slack / (k_norm * c_bound)).min(1.0)
    } else {
        1.0
    };

    LpvSsModel::new(
        AffineMatrixFunction::from_coeffs(a)?,
        AffineMatrixFunction::from_coeffs(b)?,
        AffineMatrixFunction::from_coeffs(c)?,
        AffineMatrixFunction::from_coeffs(d)?,
        NoiseModel::Innovation(InnovationNoise {
            k: AffineMatrixFunction::constant(k * k_scale, npsi),
            xi: DMatrix::identity(ny, ny),
        }),
        basis,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::simulate;
    use nalgebra::DVector;
    use rand::Rng;

    const DIMS: ModelDims = ModelDims {
        nx: 4,
        nu: 2,
        ny: 2,
        npsi: 5,
    };

    #[test]
    fn rejects_margin_outside_open_interval() {
        for rho in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
            assert!(matches!(random_stable_model(DIMS, rho, 1), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn same_seed_same_model() {
        assert_eq!(random_stable_model(DIMS, 0.9, 7).unwrap(), random_stable_model(DIMS, 0.9, 7).unwrap());
        assert_ne!(random_stable_model(DIMS, 0.9, 7).unwrap(), random_stable_model(DIMS, 0.9, 8).unwrap());
    }

    #[test]
    fn free_response_decays_for_random_scheduling() {
        let model = random_stable_model(DIMS, 0.95, 3).unwrap().noise_free();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 501;
        let p = DMatrix::from_fn(DIMS.npsi, n, |_, _| rng.gen_range(-1.0..=1.0));
        let x0 = DVector::from_element(DIMS.nx, 1.0);
        // Output decay bounds state decay only through C; check the state directly.
        let mut x = x0.clone();
        let psi = model.basis.eval_trajectory(&p).unwrap();
        for t in 0..500 {
            x = model.a.eval_psi(psi.column(t).as_slice()) * x;
        }
        assert!(x.norm() < 1e-6 * x0.norm());
        let data = simulate(&model, &DMatrix::zeros(DIMS.nu, n), &p, &x0, 0).unwrap();
        assert!(data.y.column(n - 1).norm() < 1e-6);
    }

    #[test]
    fn predictor_contraction_bound_holds() {
        let model = random_stable_model(DIMS, 0.9, 11).unwrap();
        let NoiseModel::Innovation(inn) = &model.noise else { panic!() };
        let k = inn.k.coeff(0);
        let bound: f64 = (0..=DIMS.npsi)
            .map(|i| norm2(&(model.a.coeff(i) - k * model.c.coeff(i))) * model.basis.sup_abs(i))
            .sum();
        assert!(bound <= 0.95 + 1e-12, "bound {bound}");
    }
}
