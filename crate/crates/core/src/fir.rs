//! Regularized FIR estimation of the sub-Markov parameters.
//!
//! The truncated impulse response of depth `nh` is the linear regression `Ȳ = θ̄ Φ̄ + W̄`, with one
//! regressor column per sample `t = nh … N−1` (so `M = N − nh`) and rows in canonical key order.
//! With a Gaussian prior `θ ~ N(0, α I)` and noise `R = σ² I` the posterior mean is a ridge
//! estimate, and `(α, σ²)` are tuned by maximizing the marginal likelihood of the outputs.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, kron, log_det_chol, symmetrized, vec};
use crate::markov::{enumerate_keys, theta_to_table, KronRegressor, SubMarkovKey, SubMarkovTable, DEFAULT_KEY_CAP};
use crate::model::{BasisFunctionSet, DataSet};

#[derive(Debug, Clone)]
pub struct FirRegression {
    /// `Φ̄`, `nf × M`.
    pub phi: DMatrix<f64>,
    /// `Ȳ`, `ny × M`.
    pub y: DMatrix<f64>,
    pub nh: usize,
    pub npsi: usize,
    pub nu: usize,
    /// Row blocks of `Φ̄`, `nu` rows per key.
    pub keys: Vec<SubMarkovKey>,
}

impl FirRegression {
    pub fn nf(&self) -> usize {
        self.phi.nrows()
    }

    pub fn m(&self) -> usize {
        self.phi.ncols()
    }

    pub fn ny(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_theta(&self) -> usize {
        self.ny() * self.nf()
    }

    /// `Φ_N = Φ̄ ⊗ I_ny`, so that `vec(Ŷ) = Φ_Nᵀ θ` with `θ = vec(θ̄)`.
    pub fn phi_n(&self) -> DMatrix<f64> {
        kron(&self.phi, &DMatrix::identity(self.ny(), self.ny()))
    }

    pub fn y_vec(&self) -> DVector<f64> {
        vec(&self.y)
    }
}

/// Prior scale `α` (`P_α = α I`) and noise scale `σ²` (`R = σ² I`).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BayesHyper {
    pub alpha: f64,
    pub sigma2: f64,
}

impl BayesHyper {
    pub fn new(alpha: f64, sigma2: f64) -> Result<Self> {
        if !(alpha > 0.0 && sigma2 > 0.0 && alpha.is_finite() && sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "hyperparameters must be positive and finite, got α = {alpha}, σ² = {sigma2}"
            )));
        }
        Ok(Self { alpha, sigma2 })
    }

    /// `W_e = I_M ⊗ R⁻¹` block `R⁻¹` and `W_r = P_α⁻¹`.
    pub fn weights(&self, ny: usize, n_theta: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            DMatrix::identity(ny, ny) / self.sigma2,
            DMatrix::identity(n_theta, n_theta) / self.alpha,
        )
    }
}

pub fn build_regression(data: &DataSet, basis: &BasisFunctionSet, nh: usize) -> Result<FirRegression> {
    let n = data.len();
    if n < nh + 2 {
        return Err(Error::TooShort { needed: nh + 2, got: n });
    }
    if basis.np != data.np() {
        return Err(Error::Dimension(format!("basis has np = {}, data {}", basis.np, data.np())));
    }
    let npsi = basis.npsi();
    let (keys, nf) = enumerate_keys(npsi, nh, data.nu(), DEFAULT_KEY_CAP)?;
    let psi = basis.eval_trajectory(&data.p)?;
    let m = n - nh;
    let mut phi = DMatrix::zeros(nf, m);
    let mut reg = KronRegressor::new(npsi, data.nu(), nh);
    let mut col = vec![0.0; nf];
    for t in 0..n {
        reg.step(psi.column(t).as_slice(), data.u.column(t).as_slice(), &mut col);
        if t >= nh {
            phi.column_mut(t - nh).copy_from_slice(&col);
        }
    }
    Ok(FirRegression {
        phi,
        y: data.y.columns(nh, m).into_owned(),
        nh,
        npsi,
        nu: data.nu(),
        keys,
    })
}

fn solve_normal(normal: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let normal = symmetrized(normal);
    match normal.clone().cholesky() {
        Some(chol) => Ok(chol.solve(rhs)),
        None => {
            let eig = SymmetricEigen::new(normal).eigenvalues;
            let max = eig.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            let deficiency = eig.iter().filter(|&&l| l <= 1e-12 * max).count().max(1);
            Err(Error::RankDeficient { deficiency })
        }
    }
}

/// `θ̂ = (Φ_N W_e Φ_Nᵀ + W_r)⁻¹ Φ_N W_e Y_N` with a dense `W_e` (`ny·M × ny·M`).
pub fn rwls(reg: &FirRegression, we: &DMatrix<f64>, wr: &DMatrix<f64>) -> Result<DVector<f64>> {
    let nym = reg.ny() * reg.m();
    let nt = reg.n_theta();
    if we.shape() != (nym, nym) || wr.shape() != (nt, nt) {
        return Err(Error::Dimension(format!(
            "W_e is {:?} (expected {nym}²), W_r is {:?} (expected {nt}²)",
            we.shape(),
            wr.shape()
        )));
    }
    let phi = reg.phi_n();
    let phi_we = &phi * we;
    solve_normal(&phi_we * phi.transpose() + wr, &(phi_we * reg.y_vec()))
}

/// [`rwls`] with `W_e = I_M ⊗ W_b`: the normal matrix is `Φ̄Φ̄ᵀ ⊗ W_b + W_r` and the right-hand side
/// `vec(W_b Ȳ Φ̄ᵀ)`.
pub fn rwls_structured(reg: &FirRegression, wb: &DMatrix<f64>, wr: &DMatrix<f64>) -> Result<DVector<f64>> {
    let ny = reg.ny();
    let nt = reg.n_theta();
    if wb.shape() != (ny, ny) || wr.shape() != (nt, nt) {
        return Err(Error::Dimension(format!(
            "W_b is {:?} (expected {ny}²), W_r is {:?} (expected {nt}²)",
            wb.shape(),
            wr.shape()
        )));
    }
    let gram = &reg.phi * reg.phi.transpose();
    let rhs = vec(&(wb * &reg.y * reg.phi.transpose()));
    solve_normal(kron(&gram, wb) + wr, &rhs)
}

/// The two terms of `−2 log f(Y | α, σ²)` without constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalTerms {
    pub log_det: f64,
    pub quad: f64,
}

impl MarginalTerms {
    pub fn value(&self) -> f64 {
        self.log_det + self.quad
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginalPath {
    /// Determinant lemma and Woodbury identity over the `nθ × nθ` inner matrix.
    Inner,
    /// Cholesky of the `ny·M × ny·M` output covariance.
    Direct,
}

/// `log det(S) + Y_Nᵀ S⁻¹ Y_N` with `S = Φ_Nᵀ P_α Φ_N + I_M ⊗ R`, through the cheaper path.
pub fn neg_log_marginal(reg: &FirRegression, hyper: BayesHyper) -> Result<f64> {
    let path = if reg.n_theta() < reg.ny() * reg.m() {
        MarginalPath::Inner
    } else {
        MarginalPath::Direct
    };
    Ok(neg_log_marginal_terms(reg, hyper, path)?.value())
}

pub fn neg_log_marginal_terms(reg: &FirRegression, hyper: BayesHyper, path: MarginalPath) -> Result<MarginalTerms> {
    let BayesHyper { alpha, sigma2 } = hyper;
    let ny = reg.ny();
    let nym = (ny * reg.m()) as f64;
    let ill = |_| Error::IllConditioned(format!("marginal likelihood at α = {alpha:.3e}, σ² = {sigma2:.3e}"));
    let y = reg.y_vec();
    match path {
        MarginalPath::Direct => {
            let ptp = reg.phi.transpose() * &reg.phi;
            let s = kron(&ptp, &DMatrix::identity(ny, ny)) * alpha
                + DMatrix::identity(y.len(), y.len()) * sigma2;
            let chol = cholesky(&symmetrized(s), "output covariance").map_err(ill)?;
            Ok(MarginalTerms {
                log_det: log_det_chol(&chol),
                quad: y.dot(&chol.solve(&y)),
            })
        }
        MarginalPath::Inner => {
            let nt = reg.n_theta();
            let gram = &reg.phi * reg.phi.transpose();
            let k = kron(&gram, &DMatrix::identity(ny, ny)) / sigma2 + DMatrix::identity(nt, nt) / alpha;
            let chol = cholesky(&symmetrized(k), "inner matrix").map_err(ill)?;
            let b = vec(&(&reg.y * reg.phi.transpose()));
            Ok(MarginalTerms {
                log_det: nym * sigma2.ln() + nt as f64 * alpha.ln() + log_det_chol(&chol),
                quad: y.norm_squared() / sigma2 - b.dot(&chol.solve(&b)) / (sigma2 * sigma2),
            })
        }
    }
}

/// Eigendecomposition of `Φ̄Φ̄ᵀ = V Λ Vᵀ`, after which the marginal likelihood and the posterior
/// mean cost `O(ny·nf)` per hyperparameter pair.
pub struct SpectralMarginal {
    lambda: DVector<f64>,
    v: DMatrix<f64>,
    /// `Z = Ȳ Φ̄ᵀ V`.
    z: DMatrix<f64>,
    /// Least-squares residual energy per output over the well-determined directions.
    resid: f64,
    kept: Vec<bool>,
    m: usize,
    ny: usize,
}

impl SpectralMarginal {
    pub fn new(reg: &FirRegression) -> Self {
        let gram = symmetrized(&reg.phi * reg.phi.transpose());
        let eig = SymmetricEigen::new(gram);
        let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
        let kept: Vec<bool> = eig.eigenvalues.iter().map(|&l| l > 1e-12 * lmax && l > 0.0).collect();
        let z = &reg.y * reg.phi.transpose() * &eig.eigenvectors;
        let mut theta_ls = z.clone();
        for (k, col) in theta_ls.column_iter_mut().enumerate() {
            let s = if kept[k] { 1.0 / eig.eigenvalues[k] } else { 0.0 };
            let mut col = col;
            col *= s;
        }
        let theta_ls = theta_ls * eig.eigenvectors.transpose();
        let resid = (&reg.y - theta_ls * &reg.phi).norm_squared();
        Self {
            lambda: eig.eigenvalues,
            v: eig.eigenvectors,
            z,
            resid,
            kept,
            m: reg.m(),
            ny: reg.ny(),
        }
    }

    pub fn terms(&self, hyper: BayesHyper) -> MarginalTerms {
        let BayesHyper { alpha, sigma2 } = hyper;
        let ny = self.ny as f64;
        let nf = self.lambda.len() as f64;
        let log_det = ny * ((self.m as f64 - nf) * sigma2.ln() + self.lambda.iter().map(|&l| (sigma2 + alpha * l.max(0.0)).ln()).sum::<f64>());
        let mut inner = self.resid;
        for (k, &l) in self.lambda.iter().enumerate() {
            let l = l.max(0.0);
            let zz = self.z.column(k).norm_squared();
            if self.kept[k] {
                inner += zz * sigma2 / (l * (sigma2 + alpha * l));
            } else {
                inner -= alpha * zz / (sigma2 + alpha * l);
            }
        }
        MarginalTerms {
            log_det,
            quad: inner / sigma2,
        }
    }

    /// Posterior mean `θ̄ = Ȳ Φ̄ᵀ (Φ̄Φ̄ᵀ + σ²/α I)⁻¹`.
    pub fn posterior_mean(&self, hyper: BayesHyper) -> DMatrix<f64> {
        let ratio = hyper.sigma2 / hyper.alpha;
        let mut scaled = self.z.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col /= self.lambda[k].max(0.0) + ratio;
        }
        scaled * self.v.transpose()
    }
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub hyper: BayesHyper,
    pub value: f64,
    /// The optimum sits on the edge of the search box.
    pub boundary: bool,
    /// Every evaluated grid point.
    pub grid: Vec<(BayesHyper, f64)>,
}

pub const GRID_LOG10_MIN: f64 = -6.0;
pub const GRID_LOG10_MAX: f64 = 6.0;
pub const GRID_POINTS: usize = 13;

fn golden_section(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

fn tune_spectral(spec: &SpectralMarginal) -> TuneResult {
    let step = (GRID_LOG10_MAX - GRID_LOG10_MIN) / (GRID_POINTS - 1) as f64;
    let level = |i: usize| GRID_LOG10_MIN + step * i as f64;
    let eval = |la: f64, ls: f64| {
        let h = BayesHyper {
            alpha: 10f64.powf(la),
            sigma2: 10f64.powf(ls),
        };
        let v = spec.terms(h).value();
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut grid = Vec::with_capacity(GRID_POINTS * GRID_POINTS);
    let mut best = (0, 0, f64::INFINITY);
    for i in 0..GRID_POINTS {
        for j in 0..GRID_POINTS {
            let v = eval(level(i), level(j));
            grid.push((
                BayesHyper {
                    alpha: 10f64.powf(level(i)),
                    sigma2: 10f64.powf(level(j)),
                },
                v,
            ));
            if v < best.2 {
                best = (i, j, v);
            }
        }
    }
    let edge = |i: usize| i == 0 || i == GRID_POINTS - 1;
    let mut boundary = edge(best.0) || edge(best.1);
    let (mut la, mut ls, mut value) = (level(best.0), level(best.1), best.2);
    for _ in 0..4 {
        let before = value;
        let lo = (la - step).max(GRID_LOG10_MIN);
        let hi = (la + step).min(GRID_LOG10_MAX);
        let (x, v) = golden_section(|x| eval(x, ls), lo, hi, 1e-4);
        if v < value {
            la = x;
            value = v;
        }
        let lo = (ls - step).max(GRID_LOG10_MIN);
        let hi = (ls + step).min(GRID_LOG10_MAX);
        let (x, v) = golden_section(|x| eval(la, x), lo, hi, 1e-4);
        if v < value {
            ls = x;
            value = v;
        }
        if before - value <= 1e-10 * value.abs().max(1.0) {
            break;
        }
    }
    let near = |x: f64| x - GRID_LOG10_MIN < 1e-2 || GRID_LOG10_MAX - x < 1e-2;
    boundary |= near(la) || near(ls);
    let hyper = BayesHyper {
        alpha: 10f64.powf(la),
        sigma2: 10f64.powf(ls),
    };
    if boundary {
        log::warn!("marginal-likelihood optimum on the search boundary: α = {:.3e}, σ² = {:.3e}", hyper.alpha, hyper.sigma2);
    }
    TuneResult {
        hyper,
        value,
        boundary,
        grid,
    }
}

/// Minimizes the negative log marginal likelihood over `(log α, log σ²)`: a 13 × 13 grid over
/// `10⁻⁶ … 10⁶` followed by coordinate-wise golden-section refinement.
pub fn tune_hyper(reg: &FirRegression) -> Result<TuneResult> {
    if reg.y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("outputs must be finite".into()));
    }
    Ok(tune_spectral(&SpectralMarginal::new(reg)))
}

#[derive(Debug, Clone)]
pub struct FirEstimate {
    pub table: SubMarkovTable,
    pub hyper: BayesHyper,
    /// Set when tuning ended on the edge of the search box.
    pub boundary: bool,
}

/// Tunes `(α, σ²)` unless given, solves the weighted ridge problem with `W_e = I ⊗ R⁻¹`,
/// `W_r = P_α⁻¹`, and returns the table of all keys up to length `nh + 1`.
pub fn estimate_table_fir(
    data: &DataSet,
    basis: &BasisFunctionSet,
    nh: usize,
    hyper: Option<BayesHyper>,
) -> Result<FirEstimate> {
    let reg = build_regression(data, basis, nh)?;
    let spec = SpectralMarginal::new(&reg);
    let (hyper, boundary) = match hyper {
        Some(h) => (h, false),
        None => {
            let t = tune_spectral(&spec);
            (t.hyper, t.boundary)
        }
    };
    let theta = spec.posterior_mean(hyper);
    Ok(FirEstimate {
        table: theta_to_table(&theta, reg.npsi, reg.nu, nh)?,
        hyper,
        boundary,
    })
}
