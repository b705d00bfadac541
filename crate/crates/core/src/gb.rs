//! Prediction-error refinement by an enhanced Gauss-Newton method.
//!
//! The one-step predictor `x̂⁺ = A x̂ + B u + K e`, `e = y − C x̂ − D u` is differentiated by a
//! forward sensitivity recursion. Steps are taken in data-driven local coordinates (the
//! ortho-complement of the similarity-orbit tangent), with a truncated and regularized
//! Gauss-Newton direction and Armijo backtracking.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{floor_spectrum, symmetrized};
use crate::model::{AffineMatrixFunction, DataSet, InnovationNoise, LpvSsModel, NoiseModel};

/// Predictor states beyond this magnitude count as divergence.
const STATE_LIMIT: f64 = 1e100;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GbConfig {
    /// Armijo sufficient-decrease constant.
    pub beta: f64,
    /// Backtracking contraction.
    pub gamma: f64,
    /// Levenberg term relative to `σ₁²`.
    pub eta_min: f64,
    /// Smallest step length tried.
    pub alpha_min: f64,
    /// Singular values below `ν σ₁` are truncated.
    pub nu: f64,
    /// Relative cost decrease below which the iteration stops.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Scheduling-dependent `K(p)` instead of a constant gain.
    pub affine_k: bool,
    /// Leading samples excluded from the cost.
    pub transient_skip: usize,
}

impl Default for GbConfig {
    fn default() -> Self {
        Self {
            beta: 1e-4,
            gamma: 0.75,
            eta_min: 1e-5,
            alpha_min: 0.001,
            nu: 0.01,
            epsilon: 1e-6,
            max_iter: 20,
            affine_k: false,
            transient_skip: 0,
        }
    }
}

impl GbConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.beta, self.gamma, self.eta_min, self.alpha_min, self.nu, self.epsilon];
        if positive.iter().any(|&v| !(v > 0.0)) || self.gamma >= 1.0 {
            return Err(Error::InvalidArgument(
                "GB constants must be positive and gamma must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Layout of the flattened parameter vector: `A_0 … A_nψ, B_…, C_…, D_…, K_…`, each block
/// column-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PemParameterization {
    pub nx: usize,
    pub nu: usize,
    pub ny: usize,
    pub npsi: usize,
    pub affine_k: bool,
}

impl PemParameterization {
    pub fn for_model(model: &LpvSsModel, affine_k: bool) -> Self {
        Self {
            nx: model.nx(),
            nu: model.nu(),
            ny: model.ny(),
            npsi: model.npsi(),
            affine_k,
        }
    }

    fn k(&self) -> usize {
        self.npsi + 1
    }

    pub fn n_k_terms(&self) -> usize {
        if self.affine_k {
            self.k()
        } else {
            1
        }
    }

    pub fn off_b(&self) -> usize {
        self.k() * self.nx * self.nx
    }

    pub fn off_c(&self) -> usize {
        self.off_b() + self.k() * self.nx * self.nu
    }

    pub fn off_d(&self) -> usize {
        self.off_c() + self.k() * self.ny * self.nx
    }

    pub fn off_k(&self) -> usize {
        self.off_d() + self.k() * self.ny * self.nu
    }

    /// `nΛ`.
    pub fn n_lambda(&self) -> usize {
        self.off_k()
    }

    pub fn n_params(&self) -> usize {
        self.off_k() + self.n_k_terms() * self.nx * self.ny
    }

    /// Gain of `model`, zero for models without an innovation block.
    pub fn gain(&self, model: &LpvSsModel) -> AffineMatrixFunction {
        match &model.noise {
            NoiseModel::Innovation(inn) => inn.k.clone(),
            _ => AffineMatrixFunction::zeros(self.nx, self.ny, self.npsi),
        }
    }

    pub fn flatten(&self, model: &LpvSsModel, k: &AffineMatrixFunction) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for f in [&model.a, &model.b, &model.c, &model.d] {
            for m in f.coeffs() {
                out.extend_from_slice(m.as_slice());
            }
        }
        for m in &k.coeffs()[..self.n_k_terms()] {
            out.extend_from_slice(m.as_slice());
        }
        DVector::from_vec(out)
    }

    /// Inverse of [`flatten`](Self::flatten): `(A, B, C, D, K)`.
    pub fn unflatten(&self, theta: &DVector<f64>) -> Result<[AffineMatrixFunction; 5]> {
        if theta.len() != self.n_params() {
            return Err(Error::Dimension(format!(
                "parameter vector has {} entries, expected {}",
                theta.len(),
                self.n_params()
            )));
        }
        let mut pos = 0;
        let mut take = |r: usize, c: usize, count: usize| {
            let mats: Vec<DMatrix<f64>> = (0..count)
                .map(|_| {
                    let m = DMatrix::from_column_slice(r, c, &theta.as_slice()[pos..pos + r * c]);
                    pos += r * c;
                    m
                })
                .collect();
            mats
        };
        let k = self.k();
        let a = take(self.nx, self.nx, k);
        let b = take(self.nx, self.nu, k);
        let c = take(self.ny, self.nx, k);
        let d = take(self.ny, self.nu, k);
        let mut kk = take(self.nx, self.ny, self.n_k_terms());
        while kk.len() < k {
            kk.push(DMatrix::zeros(self.nx, self.ny));
        }
        Ok([
            AffineMatrixFunction::from_coeffs(a)?,
            AffineMatrixFunction::from_coeffs(b)?,
            AffineMatrixFunction::from_coeffs(c)?,
            AffineMatrixFunction::from_coeffs(d)?,
            AffineMatrixFunction::from_coeffs(kk)?,
        ])
    }

    /// Innovation-form model from a parameter vector; `Ξ` is carried over.
    pub fn to_model(&self, theta: &DVector<f64>, template: &LpvSsModel, xi: DMatrix<f64>) -> Result<LpvSsModel> {
        let [a, b, c, d, k] = self.unflatten(theta)?;
        LpvSsModel::new(a, b, c, d, NoiseModel::Innovation(InnovationNoise { k, xi }), template.basis.clone())
    }
}

/// Residuals `e` (rows `t·ny + i`) and, on request, `J = ∂e/∂θ`.
pub struct Prediction {
    pub e: DVector<f64>,
    pub jacobian: Option<DMatrix<f64>>,
}

impl Prediction {
    /// `V = ½ eᵀe`.
    pub fn cost(&self) -> f64 {
        0.5 * self.e.norm_squared()
    }
}

/// Runs the predictor, and the sensitivity recursion when `with_jacobian` is set.
pub fn predict_and_jacobian(
    par: &PemParameterization,
    theta: &DVector<f64>,
    data: &DataSet,
    psi: &DMatrix<f64>,
    with_jacobian: bool,
    skip: usize,
) -> Result<Prediction> {
    let [a, b, c, d, kf] = par.unflatten(theta)?;
    let (nx, nu, ny) = (par.nx, par.nu, par.ny);
    let n = data.len();
    let np = par.n_params();
    let k = par.k();
    let nk = par.n_k_terms();
    let mut e_all = DVector::zeros(n * ny);
    let mut jac = if with_jacobian { Some(DMatrix::zeros(n * ny, np)) } else { None };
    let mut x = DVector::zeros(nx);
    let mut dx = DMatrix::zeros(nx, if with_jacobian { np } else { 0 });
    for t in 0..n {
        let ps = psi.column(t);
        let ps = ps.as_slice();
        let at = a.eval_psi(ps);
        let bt = b.eval_psi(ps);
        let ct = c.eval_psi(ps);
        let dt = d.eval_psi(ps);
        let kt = kf.eval_psi(ps);
        let ut = data.u.column(t);
        let e = data.y.column(t) - &ct * &x - &dt * ut;
        let keep = t >= skip;
        if keep {
            e_all.rows_mut(t * ny, ny).copy_from(&e);
        }
        if let Some(jac) = jac.as_mut() {
            let mut de = -(&ct * &dx);
            for (i, &w) in ps.iter().enumerate().take(k) {
                let off = par.off_c() + i * ny * nx;
                for col in 0..nx {
                    for row in 0..ny {
                        de[(row, off + col * ny + row)] -= w * x[col];
                    }
                }
                let off = par.off_d() + i * ny * nu;
                for col in 0..nu {
                    for row in 0..ny {
                        de[(row, off + col * ny + row)] -= w * ut[col];
                    }
                }
            }
            if keep {
                jac.rows_mut(t * ny, ny).copy_from(&de);
            }
            let mut next = &at * &dx + &kt * &de;
            for (i, &w) in ps.iter().enumerate().take(k) {
                let off = i * nx * nx;
                for col in 0..nx {
                    for row in 0..nx {
                        next[(row, off + col * nx + row)] += w * x[col];
                    }
                }
                let off = par.off_b() + i * nx * nu;
                for col in 0..nu {
                    for row in 0..nx {
                        next[(row, off + col * nx + row)] += w * ut[col];
                    }
                }
            }
            for i in 0..nk {
                let w = if par.affine_k { ps[i] } else { 1.0 };
                let off = par.off_k() + i * nx * ny;
                for col in 0..ny {
                    for row in 0..nx {
                        next[(row, off + col * nx + row)] += w * e[col];
                    }
                }
            }
            dx = next;
        }
        x = &at * &x + &bt * ut + &kt * &e;
        if x.iter().any(|v| !v.is_finite() || v.abs() > STATE_LIMIT) {
            return Err(Error::Diverged {
                time: t + 1,
                detail: "one-step predictor is unstable".into(),
            });
        }
    }
    Ok(Prediction { e: e_all, jacobian: jac })
}

/// Columns of `Γ`: the parameter change caused by `T = I + δ E_ab`, one per `(a, b)`.
pub fn orbit_tangent(par: &PemParameterization, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let [a, b, c, _, k] = par.unflatten(theta)?;
    let nx = par.nx;
    let mut gamma = DMatrix::zeros(par.n_params(), nx * nx);
    let vecm = |m: &DMatrix<f64>| m.as_slice().to_vec();
    for bb in 0..nx {
        for aa in 0..nx {
            let mut e_ab = DMatrix::zeros(nx, nx);
            e_ab[(aa, bb)] = 1.0;
            let mut col = Vec::with_capacity(par.n_params());
            for ai in a.coeffs() {
                col.extend(vecm(&(&e_ab * ai - ai * &e_ab)));
            }
            for bi in b.coeffs() {
                col.extend(vecm(&(&e_ab * bi)));
            }
            for ci in c.coeffs() {
                col.extend(vecm(&(-(ci * &e_ab))));
            }
            col.extend(std::iter::repeat(0.0).take(par.k() * par.ny * par.nu));
            for ki in &k.coeffs()[..par.n_k_terms()] {
                col.extend(vecm(&(&e_ab * ki)));
            }
            gamma.set_column(bb * nx + aa, &DVector::from_vec(col));
        }
    }
    Ok(gamma)
}

/// Orthonormal basis of the ortho-complement of the orbit tangent at `theta`.
pub fn ddlc_basis(par: &PemParameterization, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let gamma = orbit_tangent(par, theta)?;
    let np = par.n_params();
    let svd = gamma.svd(true, false);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let u = svd.u.expect("requested U");
    let range: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 1e-10 * smax && smax > 0.0)
        .collect();
    let ur = u.select_columns(&range);
    let proj = symmetrized(DMatrix::identity(np, np) - &ur * ur.transpose());
    let eig = SymmetricEigen::new(proj);
    let keep: Vec<usize> = (0..np).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    Ok(eig.eigenvectors.select_columns(&keep))
}

/// One accepted step of the line search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbStep {
    pub alpha: f64,
    pub cost_before: f64,
    pub cost_after: f64,
    /// `∇Vᵀ δ` along the full step.
    pub directional_derivative: f64,
}

#[derive(Debug, Clone)]
pub struct GbResult {
    pub model: LpvSsModel,
    /// Cost of every accepted iterate, starting with the initial model.
    pub cost_trace: Vec<f64>,
    pub steps: Vec<GbStep>,
    pub iterations: usize,
    pub converged: bool,
    /// No step passed the line search.
    pub stalled: bool,
    /// `‖Q_cᵀ Jᵀ e‖` at the returned model.
    pub projected_gradient: f64,
    /// `‖e‖` at the returned model.
    pub residual_norm: f64,
}

fn innovation_cov(e: &DVector<f64>, ny: usize, count: usize) -> DMatrix<f64> {
    let m = DMatrix::from_column_slice(ny, e.len() / ny, e.as_slice());
    floor_spectrum(&symmetrized(&m * m.transpose() / count.max(1) as f64), 1e-12)
}

/// Enhanced Gauss-Newton minimization of `½ Σ ‖e_t‖²` from `model0`; models without an
/// innovation block start from `K = 0`.
pub fn gb_refine(model0: &LpvSsModel, data: &DataSet, config: &GbConfig) -> Result<GbResult> {
    config.validate()?;
    if data.nu() != model0.nu() || data.ny() != model0.ny() || data.np() != model0.basis.np {
        return Err(Error::Dimension("data and model dimensions differ".into()));
    }
    let par = PemParameterization::for_model(model0, config.affine_k);
    let psi = model0.basis.eval_trajectory(&data.p)?;
    let mut theta = par.flatten(model0, &par.gain(model0));
    let skip = config.transient_skip.min(data.len());
    let count = data.len() - skip;

    let mut pred = predict_and_jacobian(&par, &theta, data, &psi, true, skip)?;
    let mut cost = pred.cost();
    let mut cost_trace = vec![cost];
    let mut steps = Vec::new();
    let mut converged = false;
    let mut stalled = false;
    let mut iterations = 0;
    let mut projected_gradient;
    loop {
        let j = pred.jacobian.as_ref().expect("jacobian requested");
        let qc = ddlc_basis(&par, &theta)?;
        let jtj = j.tr_mul(j);
        let gram = symmetrized(qc.tr_mul(&jtj) * &qc);
        let g = qc.tr_mul(&j.tr_mul(&pred.e));
        projected_gradient = g.norm();
        if iterations == config.max_iter || converged {
            break;
        }
        iterations += 1;
        let eig = SymmetricEigen::new(gram);
        let s1sq = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        if !(s1sq > 0.0) {
            stalled = true;
            break;
        }
        let s1 = s1sq.sqrt();
        let eta = config.eta_min * s1sq;
        let mut delta = DVector::zeros(qc.ncols());
        for (i, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam.max(0.0).sqrt() < config.nu * s1 {
                continue;
            }
            let v = eig.eigenvectors.column(i);
            delta -= v * (v.dot(&g) / (lam + eta));
        }
        let direction = &qc * &delta;
        let slope = g.dot(&delta);
        if !(slope < 0.0) {
            stalled = true;
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= config.alpha_min {
            let trial = &theta + &direction * alpha;
            let trial_cost = predict_and_jacobian(&par, &trial, data, &psi, false, skip)
                .map(|p| p.cost())
                .unwrap_or(f64::INFINITY);
            if trial_cost <= cost + config.beta * alpha * slope {
                accepted = Some((trial, trial_cost));
                break;
            }
            alpha *= config.gamma;
        }
        let Some((trial, trial_cost)) = accepted else {
            stalled = true;
            break;
        };
        steps.push(GbStep {
            alpha,
            cost_before: cost,
            cost_after: trial_cost,
            directional_derivative: slope,
        });
        let rel = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
        theta = trial;
        cost = trial_cost;
        cost_trace.push(cost);
        pred = predict_and_jacobian(&par, &theta, data, &psi, true, skip)?;
        if rel < config.epsilon {
            converged = true;
        }
    }
    let xi = innovation_cov(&pred.e, par.ny, count);
    Ok(GbResult {
        model: par.to_model(&theta, model0, xi)?,
        cost_trace,
        steps,
        iterations,
        converged,
        stalled,
        projected_gradient,
        residual_norm: pred.e.norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cra::tests::white_excitation;
    use crate::markov::true_table;
    use crate::model::{apply_transform, random_stable_model, simulate, ModelDims, SimilarityTransform};

    fn setup(nx: usize, npsi: usize, n: usize, seed: u64, noisy: bool) -> (LpvSsModel, DataSet) {
        let mut m = random_stable_model(ModelDims { nx, nu: 2, ny: 2, npsi }, 0.7, seed).unwrap();
        if let NoiseModel::Innovation(inn) = &mut m.noise {
            inn.xi = DMatrix::identity(2, 2) * 0.01;
        }
        let gen = if noisy { m.clone() } else { m.noise_free() };
        let (u, p) = white_excitation(2, npsi, n, seed);
        let d = simulate(&gen, &u, &p, &DVector::zeros(nx), seed + 7).unwrap();
        (m, d)
    }

    fn fd_check(affine_k: bool) {
        let (m, d) = setup(2, 1, 40, 1, true);
        let par = PemParameterization::for_model(&m, affine_k);
        let mut theta = par.flatten(&m, &par.gain(&m));
        if affine_k {
            // Give the K_1 block nonzero values.
            let off = par.off_k() + par.nx * par.ny;
            for i in 0..par.nx * par.ny {
                theta[off + i] = 0.05 * (i as f64 - 1.5);
            }
        }
        let psi = m.basis.eval_trajectory(&d.p).unwrap();
        let j = predict_and_jacobian(&par, &theta, &d, &psi, true, 0).unwrap().jacobian.unwrap();
        let h = 1e-6;
        for col in 0..par.n_params() {
            let mut tp = theta.clone();
            tp[col] += h;
            let mut tm = theta.clone();
            tm[col] -= h;
            let ep = predict_and_jacobian(&par, &tp, &d, &psi, false, 0).unwrap().e;
            let em = predict_and_jacobian(&par, &tm, &d, &psi, false, 0).unwrap().e;
            let fd = (ep - em) / (2.0 * h);
            let an = j.column(col);
            let scale = an.amax().max(fd.amax()).max(1e-8);
            assert!((an - &fd).amax() / scale < 1e-4, "column {col}");
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        fd_check(false);
    }

    #[test]
    fn jacobian_matches_central_differences_with_affine_gain() {
        fd_check(true);
    }

    #[test]
    fn flatten_round_trip() {
        let (m, _) = setup(3, 2, 10, 2, false);
        for affine in [false, true] {
            let par = PemParameterization::for_model(&m, affine);
            let k = par.gain(&m);
            let theta = par.flatten(&m, &k);
            assert_eq!(theta.len(), par.n_params());
            let [a, b, c, d, kk] = par.unflatten(&theta).unwrap();
            assert_eq!((a, b, c, d), (m.a.clone(), m.b.clone(), m.c.clone(), m.d.clone()));
            assert_eq!(kk.coeff(0), k.coeff(0));
            assert_eq!(par.flatten(&m, &kk), theta);
        }
    }

    #[test]
    fn paper_parameter_count() {
        let m = random_stable_model(ModelDims { nx: 4, nu: 2, ny: 2, npsi: 5 }, 0.5, 0).unwrap();
        let par = PemParameterization::for_model(&m, false);
        assert_eq!(par.n_lambda(), 6 * (4 + 2) * (4 + 2));
        assert_eq!(par.n_params(), 216 + 8);
    }

    #[test]
    fn residuals_vanish_at_the_truth() {
        let (m, d) = setup(3, 2, 200, 3, false);
        let par = PemParameterization::for_model(&m, false);
        let psi = m.basis.eval_trajectory(&d.p).unwrap();
        let e = predict_and_jacobian(&par, &par.flatten(&m, &par.gain(&m)), &d, &psi, false, 0).unwrap().e;
        assert!(e.amax() < 1e-9);
    }

    #[test]
    fn transformed_parameters_give_identical_residuals() {
        let (m, d) = setup(2, 1, 100, 4, true);
        let t = DMatrix::from_row_slice(2, 2, &[1.5, -0.3, 0.2, 0.8]);
        let mt = apply_transform(&m, &SimilarityTransform::new(t).unwrap()).unwrap();
        let par = PemParameterization::for_model(&m, false);
        let psi = m.basis.eval_trajectory(&d.p).unwrap();
        let c1 = predict_and_jacobian(&par, &par.flatten(&m, &par.gain(&m)), &d, &psi, false, 0).unwrap().cost();
        let c2 = predict_and_jacobian(&par, &par.flatten(&mt, &par.gain(&mt)), &d, &psi, false, 0).unwrap().cost();
        assert!((c1 - c2).abs() < 1e-10 * c1);
    }

    #[test]
    fn unstable_predictor_is_reported() {
        let (mut m, d) = setup(2, 1, 100, 5, true);
        for a in m.a.coeffs_mut() {
            *a *= 40.0;
        }
        let par = PemParameterization::for_model(&m, false);
        let psi = m.basis.eval_trajectory(&d.p).unwrap();
        assert!(matches!(
            predict_and_jacobian(&par, &par.flatten(&m, &par.gain(&m)), &d, &psi, false, 0),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn scalar_complement_is_orthogonal_to_scaling() {
        let (m, _) = setup(1, 1, 10, 6, true);
        let par = PemParameterization::for_model(&m, false);
        let theta = par.flatten(&m, &par.gain(&m));
        let gamma = orbit_tangent(&par, &theta).unwrap();
        let qc = ddlc_basis(&par, &theta).unwrap();
        assert_eq!(qc.ncols(), par.n_params() - 1);
        assert!((gamma.tr_mul(&qc)).amax() < 1e-12 * gamma.norm());
    }

    #[test]
    fn complement_dimension_and_orthogonality() {
        for seed in 0..5 {
            let (m, _) = setup(3, 2, 10, 10 + seed, true);
            let par = PemParameterization::for_model(&m, false);
            let theta = par.flatten(&m, &par.gain(&m));
            let gamma = orbit_tangent(&par, &theta).unwrap();
            let qc = ddlc_basis(&par, &theta).unwrap();
            assert_eq!(qc.ncols(), par.n_params() - 9);
            assert!((gamma.tr_mul(&qc)).amax() < 1e-12 * gamma.norm());
            assert!((qc.tr_mul(&qc) - DMatrix::identity(qc.ncols(), qc.ncols())).amax() < 1e-12);
        }
    }

    #[test]
    fn cost_is_flat_along_the_orbit() {
        let (m, d) = setup(2, 1, 200, 7, true);
        let par = PemParameterization::for_model(&m, false);
        let theta = par.flatten(&m, &par.gain(&m));
        let psi = m.basis.eval_trajectory(&d.p).unwrap();
        let cost = |t: &DVector<f64>| predict_and_jacobian(&par, t, &d, &psi, false, 0).unwrap().e.norm_squared();
        let base = cost(&theta);
        let gamma = orbit_tangent(&par, &theta).unwrap();
        let h = 1e-5;
        for col in gamma.column_iter() {
            let dir = col.normalize();
            let fd = (cost(&(&theta + &dir * h)) - cost(&(&theta - &dir * h))) / (2.0 * h);
            assert!(fd.abs() * h < 1e-6 * base, "{fd}");
            assert!(fd.abs() < 1e-6 * base / 1e-3);
        }
    }

    #[test]
    fn start_at_truth_terminates_quickly() {
        let (m, d) = setup(2, 1, 300, 8, false);
        let r = gb_refine(&m, &d, &GbConfig::default()).unwrap();
        assert!(r.iterations <= 2);
        assert!(*r.cost_trace.last().unwrap() < 1e-16);
    }

    #[test]
    fn armijo_contract_and_monotone_cost() {
        let cfg = GbConfig::default();
        for seed in 0..20 {
            let (m, d) = setup(2, 1, 300, 100 + seed, true);
            let mut start = m.noise_free();
            for b in start.b.coeffs_mut() {
                *b *= 0.8;
            }
            let r = gb_refine(&start, &d, &cfg).unwrap();
            for w in r.cost_trace.windows(2) {
                assert!(w[1] <= w[0]);
            }
            for s in &r.steps {
                assert!(s.cost_after <= s.cost_before + cfg.beta * s.alpha * s.directional_derivative);
                assert!(s.directional_derivative < 0.0);
            }
            assert!(r.cost_trace.last().unwrap() < r.cost_trace.first().unwrap());
        }
    }

    #[test]
    fn converged_runs_have_small_projected_gradient() {
        let (m, d) = setup(2, 1, 500, 9, true);
        let mut start = m.noise_free();
        for c in start.c.coeffs_mut() {
            *c *= 0.9;
        }
        let cfg = GbConfig {
            max_iter: 50,
            epsilon: 1e-10,
            ..Default::default()
        };
        let r = gb_refine(&start, &d, &cfg).unwrap();
        assert!(r.converged && !r.stalled, "{r:?}");
        assert!(r.projected_gradient < 1e-4 * r.residual_norm, "{} vs {}", r.projected_gradient, r.residual_norm);
    }

    #[test]
    fn refinement_is_invariant_to_the_starting_coordinates() {
        let (m, d) = setup(2, 1, 800, 11, true);
        let mut start = m.noise_free();
        for a in start.a.coeffs_mut() {
            *a *= 0.9;
        }
        let t = DMatrix::from_row_slice(2, 2, &[1.2, 0.4, -0.1, 0.9]);
        let start_t = apply_transform(&start, &SimilarityTransform::new(t).unwrap()).unwrap();
        let cfg = GbConfig {
            max_iter: 60,
            epsilon: 1e-12,
            ..Default::default()
        };
        let r1 = gb_refine(&start, &d, &cfg).unwrap();
        let r2 = gb_refine(&start_t, &d, &cfg).unwrap();
        let t1 = true_table(&r1.model, 5);
        let t2 = true_table(&r2.model, 5);
        assert!(t1.max_rel_error(&t2) < 1e-4, "{}", t1.max_rel_error(&t2));
    }

    #[test]
    fn bad_config_rejected() {
        let (m, d) = setup(1, 0, 20, 12, false);
        let cfg = GbConfig {
            gamma: 1.5,
            ..Default::default()
        };
        assert!(gb_refine(&m, &d, &cfg).is_err());
    }
}
