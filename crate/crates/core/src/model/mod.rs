//! LPV state-space model representations.
//!
//! A model is the tuple of affine matrix functions
//!
//! ```text
//! x[t+1] = A(p_t) x[t] + B(p_t) u[t] + G(p_t) w[t]
//! y[t]   = C(p_t) x[t] + D(p_t) u[t] + H(p_t) v[t]
//! ```
//!
//! with `M(p) = M₀ + Σᵢ Mᵢ ψ⁽ⁱ⁾(p)` for every matrix function. The noise block is
//! either the general form above, the innovation form with gain `K(p)` and
//! innovation covariance `Ξ`, or absent.

mod basis;
mod data;
mod filter;
mod io;
mod random;
mod simulate;

pub use basis::{BasisFunctionSet, BasisKind};
pub use data::DataSet;
pub use filter::{innovation_filter, one_step_predict, FilterOutput};
pub use io::ModelDocument;
pub(crate) use io::{from_rows, to_rows};
pub use random::random_stable_model;
pub use simulate::{simulate, simulate_with_innovations};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

/// `M(p) = M₀ + Σ_{i=1}^{nψ} Mᵢ ψ⁽ⁱ⁾(p)`, stored as the coefficient list `[M₀, M₁, …, M_nψ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMatrixFunction {
    coeffs: Vec<DMatrix<f64>>,
}

impl AffineMatrixFunction {
    pub fn new(m0: DMatrix<f64>, mi: Vec<DMatrix<f64>>) -> Result<Self> {
        let mut coeffs = Vec::with_capacity(mi.len() + 1);
        coeffs.push(m0);
        coeffs.extend(mi);
        Self::from_coeffs(coeffs)
    }

    pub fn from_coeffs(coeffs: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = coeffs.first() else {
            return Err(Error::Dimension("affine matrix function needs at least M0".into()));
        };
        let shape = first.shape();
        if let Some((i, m)) = coeffs.iter().enumerate().find(|(_, m)| m.shape() != shape) {
            return Err(Error::Dimension(format!(
                "coefficient {i} is {:?}, expected {:?}",
                m.shape(),
                shape
            )));
        }
        Ok(Self { coeffs })
    }

    /// Scheduling-independent function: `M(p) = m0`.
    pub fn constant(m0: DMatrix<f64>, npsi: usize) -> Self {
        let (r, c) = m0.shape();
        let mut coeffs = vec![DMatrix::zeros(r, c); npsi + 1];
        coeffs[0] = m0;
        Self { coeffs }
    }

    pub fn zeros(rows: usize, cols: usize, npsi: usize) -> Self {
        Self {
            coeffs: vec![DMatrix::zeros(rows, cols); npsi + 1],
        }
    }

    pub fn rows(&self) -> usize {
        self.coeffs[0].nrows()
    }

    pub fn cols(&self) -> usize {
        self.coeffs[0].ncols()
    }

    pub fn npsi(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeff(&self, i: usize) -> &DMatrix<f64> {
        &self.coeffs[i]
    }

    pub fn coeffs(&self) -> &[DMatrix<f64>] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.coeffs
    }

    /// Evaluates with a precomputed basis vector `psi = [1, ψ⁽¹⁾, …]`.
    pub fn eval_psi(&self, psi: &[f64]) -> DMatrix<f64> {
        debug_assert_eq!(psi.len(), self.coeffs.len());
        let mut out = self.coeffs[0].clone();
        for (m, &w) in self.coeffs.iter().zip(psi).skip(1) {
            if w != 0.0 {
                out.zip_apply(m, |o, v| *o += w * v);
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Result<Self> {
        Self::from_coeffs(self.coeffs.iter().map(f).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Evaluates `f` at scheduling point `p`. Points outside the basis domain are
/// extrapolated with a warning.
pub fn eval_matrix(f: &AffineMatrixFunction, basis: &BasisFunctionSet, p: &[f64]) -> Result<DMatrix<f64>> {
    if f.npsi() != basis.npsi() {
        return Err(Error::Dimension(format!(
            "matrix function has {} basis coefficients, basis has {}",
            f.npsi(),
            basis.npsi()
        )));
    }
    if !basis.contains(p) && p.len() == basis.np {
        log::warn!("scheduling point {p:?} outside the basis domain; extrapolating");
    }
    let psi = basis.eval(p)?;
    Ok(f.eval_psi(psi.as_slice()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub nx: usize,
    pub nu: usize,
    pub ny: usize,
    pub npsi: usize,
}

/// General noise: `[w; v] ~ N(0, Σ)`, `Σ = [Q S; Sᵀ R]`, entering through `G(p)` and `H(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralNoise {
    pub g: AffineMatrixFunction,
    pub h: AffineMatrixFunction,
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl GeneralNoise {
    /// `G = I`, `H = I`, `S = 0`.
    pub fn identity_inputs(q: DMatrix<f64>, r: DMatrix<f64>, npsi: usize) -> Self {
        let nx = q.nrows();
        let ny = r.nrows();
        Self {
            g: AffineMatrixFunction::constant(DMatrix::identity(nx, nx), npsi),
            h: AffineMatrixFunction::constant(DMatrix::identity(ny, ny), npsi),
            q,
            s: DMatrix::zeros(nx, ny),
            r,
        }
    }

    pub fn sigma(&self) -> DMatrix<f64> {
        let nx = self.q.nrows();
        let ny = self.r.nrows();
        let mut sigma = DMatrix::zeros(nx + ny, nx + ny);
        sigma.view_mut((0, 0), (nx, nx)).copy_from(&self.q);
        sigma.view_mut((0, nx), (nx, ny)).copy_from(&self.s);
        sigma.view_mut((nx, 0), (ny, nx)).copy_from(&self.s.transpose());
        sigma.view_mut((nx, nx), (ny, ny)).copy_from(&self.r);
        sigma
    }
}

/// Innovation noise: `x⁺ = … + K(p) ξ`, `y = … + ξ`, `ξ ~ N(0, Ξ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationNoise {
    pub k: AffineMatrixFunction,
    pub xi: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum NoiseModel {
    #[default]
    NoiseFree,
    General(GeneralNoise),
    Innovation(InnovationNoise),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpvSsModel {
    pub a: AffineMatrixFunction,
    pub b: AffineMatrixFunction,
    pub c: AffineMatrixFunction,
    pub d: AffineMatrixFunction,
    pub noise: NoiseModel,
    pub basis: BasisFunctionSet,
}

/// Matrices of a model evaluated at one time step.
#[derive(Debug, Clone)]
pub struct StepMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl LpvSsModel {
    pub fn new(
        a: AffineMatrixFunction,
        b: AffineMatrixFunction,
        c: AffineMatrixFunction,
        d: AffineMatrixFunction,
        noise: NoiseModel,
        basis: BasisFunctionSet,
    ) -> Result<Self> {
        let model = Self { a, b, c, d, noise, basis };
        model.validate()?;
        Ok(model)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            nx: self.a.rows(),
            nu: self.b.cols(),
            ny: self.c.rows(),
            npsi: self.a.npsi(),
        }
    }

    pub fn nx(&self) -> usize {
        self.a.rows()
    }

    pub fn nu(&self) -> usize {
        self.b.cols()
    }

    pub fn ny(&self) -> usize {
        self.c.rows()
    }

    pub fn npsi(&self) -> usize {
        self.a.npsi()
    }

    /// Checks block dimensions, basis size and noise covariance definiteness.
    pub fn validate(&self) -> Result<()> {
        let ModelDims { nx, nu, ny, npsi } = self.dims();
        let check = |name: &str, f: &AffineMatrixFunction, r: usize, c: usize| -> Result<()> {
            if f.rows() != r || f.cols() != c || f.npsi() != npsi {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{} with {} basis terms, expected {r}x{c} with {npsi}",
                    f.rows(),
                    f.cols(),
                    f.npsi()
                )));
            }
            Ok(())
        };
        check("A", &self.a, nx, nx)?;
        check("B", &self.b, nx, nu)?;
        check("C", &self.c, ny, nx)?;
        check("D", &self.d, ny, nu)?;
        if self.basis.npsi() != npsi {
            return Err(Error::Dimension(format!(
                "basis provides {} functions, model has {npsi}",
                self.basis.npsi()
            )));
        }
        match &self.noise {
            NoiseModel::NoiseFree => {}
            NoiseModel::General(g) => {
                check("G", &g.g, nx, nx)?;
                check("H", &g.h, ny, ny)?;
                if g.q.shape() != (nx, nx) || g.s.shape() != (nx, ny) || g.r.shape() != (ny, ny) {
                    return Err(Error::Dimension("noise covariance blocks have wrong shape".into()));
                }
                let sigma = g.sigma();
                if (&sigma - sigma.transpose()).amax() > 1e-9 * sigma.amax().max(1.0) {
                    return Err(Error::NotPositiveDefinite("noise covariance is not symmetric".into()));
                }
                linalg::cholesky(&sigma, "noise covariance Σ")?;
            }
            NoiseModel::Innovation(inn) => {
                check("K", &inn.k, nx, ny)?;
                if inn.xi.shape() != (ny, ny) {
                    return Err(Error::Dimension("innovation covariance has wrong shape".into()));
                }
                linalg::cholesky(&inn.xi, "innovation covariance Ξ")?;
            }
        }
        Ok(())
    }

    /// Deterministic part only.
    pub fn noise_free(&self) -> Self {
        Self {
            noise: NoiseModel::NoiseFree,
            ..self.clone()
        }
    }

    pub fn with_noise(&self, noise: NoiseModel) -> Result<Self> {
        let m = Self {
            noise,
            ..self.clone()
        };
        m.validate()?;
        Ok(m)
    }

    pub fn step_matrices(&self, psi: &[f64]) -> StepMatrices {
        StepMatrices {
            a: self.a.eval_psi(psi),
            b: self.b.eval_psi(psi),
            c: self.c.eval_psi(psi),
            d: self.d.eval_psi(psi),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.c.is_finite() && self.d.is_finite()
    }
}

/// A nonsingular state-coordinate change `x' = T x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    t: DMatrix<f64>,
    t_inv: DMatrix<f64>,
}

impl SimilarityTransform {
    /// Condition numbers above this are treated as singular.
    pub const MAX_CONDITION: f64 = 1e12;

    pub fn new(t: DMatrix<f64>) -> Result<Self> {
        if !t.is_square() || t.nrows() == 0 {
            return Err(Error::Dimension(format!("transform must be square, got {:?}", t.shape())));
        }
        let condition = linalg::condition_number(&t);
        if !condition.is_finite() || condition > Self::MAX_CONDITION {
            return Err(Error::SingularTransform { condition });
        }
        let t_inv = t
            .clone()
            .try_inverse()
            .ok_or(Error::SingularTransform { condition })?;
        Ok(Self { t, t_inv })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.t_inv
    }
}

/// `A'ᵢ = T Aᵢ T⁻¹`, `B'ᵢ = T Bᵢ`, `C'ᵢ = Cᵢ T⁻¹`, `D'ᵢ = Dᵢ`; noise inputs `G` and `K` transform like `B`.
pub fn apply_transform(model: &LpvSsModel, transform: &SimilarityTransform) -> Result<LpvSsModel> {
    let t = transform.matrix();
    let ti = transform.inverse();
    if t.nrows() != model.nx() {
        return Err(Error::Dimension(format!(
            "transform is {}x{}, model has nx = {}",
            t.nrows(),
            t.ncols(),
            model.nx()
        )));
    }
    let noise = match &model.noise {
        NoiseModel::NoiseFree => NoiseModel::NoiseFree,
        NoiseModel::General(g) => NoiseModel::General(GeneralNoise {
            g: g.g.map(|m| t * m)?,
            ..g.clone()
        }),
        NoiseModel::Innovation(inn) => NoiseModel::Innovation(InnovationNoise {
            k: inn.k.map(|m| t * m)?,
            xi: inn.xi.clone(),
        }),
    };
    Ok(LpvSsModel {
        a: model.a.map(|m| t * m * ti)?,
        b: model.b.map(|m| t * m)?,
        c: model.c.map(|m| m * ti)?,
        d: model.d.clone(),
        noise,
        basis: model.basis.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn scalar_model(a: f64, b: f64, c: f64, d: f64) -> LpvSsModel {
        let s = |v: f64| AffineMatrixFunction::constant(DMatrix::from_element(1, 1, v), 1);
        LpvSsModel::new(s(a), s(b), s(c), s(d), NoiseModel::NoiseFree, BasisFunctionSet::poly_linear(1)).unwrap()
    }

    #[test]
    fn eval_with_no_basis_terms_returns_m0() {
        let m0 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let f = AffineMatrixFunction::new(m0.clone(), vec![]).unwrap();
        let basis = BasisFunctionSet::poly_linear(0);
        assert_eq!(eval_matrix(&f, &basis, &[]).unwrap(), m0);
    }

    #[test]
    fn eval_with_zero_basis_returns_m0() {
        let m0 = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let f = AffineMatrixFunction::new(m0.clone(), vec![DMatrix::from_element(1, 2, 7.0); 2]).unwrap();
        let basis = BasisFunctionSet::poly_linear(2);
        assert_eq!(eval_matrix(&f, &basis, &[0.0, 0.0]).unwrap(), m0);
    }

    #[test]
    fn eval_affine_sum_by_hand() {
        let f = AffineMatrixFunction::new(
            DMatrix::identity(2, 2),
            vec![DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]))],
        )
        .unwrap();
        let basis = BasisFunctionSet::poly_linear(1);
        let m = eval_matrix(&f, &basis, &[0.5]).unwrap();
        assert_eq!(m, DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 2.0])));
    }

    #[test]
    fn eval_rejects_mismatched_basis() {
        let f = AffineMatrixFunction::zeros(1, 1, 2);
        assert!(matches!(
            eval_matrix(&f, &BasisFunctionSet::poly_linear(1), &[0.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn affine_rejects_ragged_coefficients() {
        let err = AffineMatrixFunction::new(DMatrix::zeros(2, 2), vec![DMatrix::zeros(2, 3)]);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn identity_transform_is_noop() {
        let m = scalar_model(0.5, 1.0, 2.0, 0.1);
        let t = SimilarityTransform::new(DMatrix::identity(1, 1)).unwrap();
        assert_eq!(apply_transform(&m, &t).unwrap(), m);
    }

    #[test]
    fn scalar_scaling_transform() {
        let m = scalar_model(0.5, 1.0, 2.0, 0.1);
        let t = SimilarityTransform::new(DMatrix::from_element(1, 1, 2.0)).unwrap();
        let m2 = apply_transform(&m, &t).unwrap();
        assert_eq!(m2.a.coeff(0)[(0, 0)], 0.5);
        assert_eq!(m2.b.coeff(0)[(0, 0)], 2.0);
        assert_eq!(m2.c.coeff(0)[(0, 0)], 1.0);
        assert_eq!(m2.d.coeff(0)[(0, 0)], 0.1);
    }

    #[test]
    fn singular_transform_rejected() {
        let t = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(SimilarityTransform::new(t), Err(Error::SingularTransform { .. })));
    }

    #[test]
    fn validate_rejects_indefinite_sigma() {
        let m = scalar_model(0.5, 1.0, 1.0, 0.0);
        let noise = NoiseModel::General(GeneralNoise::identity_inputs(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            1,
        ));
        assert!(matches!(m.with_noise(noise), Err(Error::NotPositiveDefinite(_))));
    }
}
