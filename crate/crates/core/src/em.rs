//! Expectation-maximization refinement with the state sequence as missing data.
//!
//! The noise model is `x⁺ = A(p)x + B(p)u + w`, `y = C(p)x + D(p)u + v` with `w ~ N(0, Q)`,
//! `v ~ N(0, R)` independent. The E-step is a scheduling-dependent Kalman filter followed by a
//! Rauch-Tung-Striebel smoother, the M-step a linear least-squares problem in the stacked
//! regressor `ψ(p_t) ⊗ [x_t; u_t]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{floor_spectrum, log_det_chol, symmetrize, symmetrized};
use crate::model::{
    simulate, AffineMatrixFunction, DataSet, GeneralNoise, LpvSsModel, NoiseModel,
};

/// Eigenvalue floor applied to re-estimated covariances.
pub const COV_FLOOR: f64 = 1e-12;
/// Relative slack tolerated in the ascent check.
pub const ASCENT_SLACK: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct EmConfig {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Initial state mean, zero when absent.
    pub x0_mean: Option<DVector<f64>>,
    /// Initial state covariance, identity when absent.
    pub p0: Option<DMatrix<f64>>,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 20,
            rel_tol: 2e-3,
            abs_tol: 1e4,
            x0_mean: None,
            p0: None,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(Error::InvalidArgument("EM tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// `Q`, `R` and the initial-state prior of the EM noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct EmNoise {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct SmoothedMoments {
    /// `x̂_{t|N}`, `nx × N`.
    pub x: DMatrix<f64>,
    /// `P_{t|N}`.
    pub p: Vec<DMatrix<f64>>,
    /// `P_{t+1,t|N}` for `t = 0 … N−2`.
    pub p_lag: Vec<DMatrix<f64>>,
    /// Filtered covariances `P_{t|t}`.
    pub p_filt: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

/// Reads `Q`, `R` from a general-noise model with `G = H = I`.
pub fn noise_of(model: &LpvSsModel, config: &EmConfig) -> Result<EmNoise> {
    let NoiseModel::General(g) = &model.noise else {
        return Err(Error::InvalidArgument("EM needs a model with a general noise block".into()));
    };
    let is_identity = |f: &AffineMatrixFunction| {
        let n = f.rows();
        f.coeffs().iter().enumerate().all(|(i, m)| {
            let target = if i == 0 { DMatrix::identity(n, n) } else { DMatrix::zeros(n, n) };
            (m - target).amax() == 0.0
        })
    };
    if !is_identity(&g.g) || !is_identity(&g.h) {
        return Err(Error::InvalidArgument("EM assumes G(p) = I and H(p) = I".into()));
    }
    if g.s.amax() != 0.0 {
        log::warn!("EM ignores the process/measurement noise cross-covariance S");
    }
    let nx = model.nx();
    Ok(EmNoise {
        q: g.q.clone(),
        r: g.r.clone(),
        x0: config.x0_mean.clone().unwrap_or_else(|| DVector::zeros(nx)),
        p0: config.p0.clone().unwrap_or_else(|| DMatrix::identity(nx, nx)),
    })
}

/// Turns any model into an EM starting point.
///
/// Noise-free models get `R` from the simulation residual covariance and `Q = 10⁻² I`;
/// innovation models get `Q = K₀ Ξ K₀ᵀ + 10⁻⁶ I`, `R = Ξ` (the cross term is dropped).
pub fn em_initial_model(model: &LpvSsModel, data: &DataSet) -> Result<LpvSsModel> {
    let nx = model.nx();
    let ny = model.ny();
    let npsi = model.npsi();
    let noise = match &model.noise {
        NoiseModel::General(_) => return Ok(model.clone()),
        NoiseModel::Innovation(inn) => {
            let k = inn.k.coeff(0);
            GeneralNoise::identity_inputs(
                symmetrized(k * &inn.xi * k.transpose()) + DMatrix::identity(nx, nx) * 1e-6,
                inn.xi.clone(),
                npsi,
            )
        }
        NoiseModel::NoiseFree => {
            let sim = simulate(model, &data.u, &data.p, &DVector::zeros(nx), 0)?;
            let res = &data.y - &sim.y;
            let mean = res.column_mean();
            let centered = DMatrix::from_fn(ny, res.ncols(), |i, t| res[(i, t)] - mean[i]);
            let n = res.ncols().max(2) as f64;
            let r = floor_spectrum(&symmetrized(&centered * centered.transpose() / (n - 1.0)), 1e-6);
            GeneralNoise::identity_inputs(DMatrix::identity(nx, nx) * 1e-2, r, npsi)
        }
    };
    model.with_noise(NoiseModel::General(noise))
}

fn check(model: &LpvSsModel, data: &DataSet) -> Result<()> {
    if data.nu() != model.nu() || data.ny() != model.ny() || data.np() != model.basis.np {
        return Err(Error::Dimension("data and model dimensions differ".into()));
    }
    if data.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: data.len() });
    }
    Ok(())
}

/// Kalman filter, RTS smoother and lag-one covariances, plus the exact Gaussian log-likelihood
/// `−½ Σ (ny log 2π + log det S_t + e_tᵀ S_t⁻¹ e_t)`.
pub fn e_step(model: &LpvSsModel, noise: &EmNoise, data: &DataSet) -> Result<SmoothedMoments> {
    check(model, data)?;
    let n = data.len();
    let nx = model.nx();
    let ny = model.ny();
    let psi = model.basis.eval_trajectory(&data.p)?;
    let steps: Vec<_> = (0..n).map(|t| model.step_matrices(psi.column(t).as_slice())).collect();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();

    let mut x_pred = Vec::with_capacity(n);
    let mut p_pred = Vec::with_capacity(n);
    let mut x_filt: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut p_filt: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    let mut x = noise.x0.clone();
    let mut p = symmetrized(noise.p0.clone());
    let mut ll = 0.0;
    let eye = DMatrix::<f64>::identity(nx, nx);
    for t in 0..n {
        let sm = &steps[t];
        let ut = data.u.column(t);
        x_pred.push(x.clone());
        p_pred.push(p.clone());
        let e = data.y.column(t) - &sm.c * &x - &sm.d * ut;
        let s = symmetrized(&sm.c * &p * sm.c.transpose() + &noise.r);
        let chol = s.cholesky().ok_or(Error::SingularInnovation { time: t })?;
        ll -= 0.5 * (ny as f64 * ln2pi + log_det_chol(&chol) + e.dot(&chol.solve(&e)));
        let k = chol.solve(&(&sm.c * &p)).transpose();
        let xf = &x + &k * &e;
        let ikc = &eye - &k * &sm.c;
        let pf = symmetrized(&ikc * &p * ikc.transpose() + &k * &noise.r * k.transpose());
        x = &sm.a * &xf + &sm.b * ut;
        p = symmetrized(&sm.a * &pf * sm.a.transpose() + &noise.q);
        if xf.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                time: t,
                detail: "Kalman filter state is not finite".into(),
            });
        }
        x_filt.push(xf);
        p_filt.push(pf);
    }

    let mut xs = DMatrix::zeros(nx, n);
    let mut ps = vec![DMatrix::zeros(nx, nx); n];
    let mut p_lag = vec![DMatrix::zeros(nx, nx); n - 1];
    xs.set_column(n - 1, &x_filt[n - 1]);
    ps[n - 1] = p_filt[n - 1].clone();
    for t in (0..n - 1).rev() {
        let a = &steps[t].a;
        let chol = p_pred[t + 1]
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite(format!("predicted covariance at t = {}", t + 1)))?;
        // J = P_{t|t} Aᵀ P_{t+1|t}⁻¹
        let j = chol.solve(&(a * &p_filt[t])).transpose();
        let dx = xs.column(t + 1) - &x_pred[t + 1];
        let xt = &x_filt[t] + &j * dx;
        xs.set_column(t, &xt);
        let mut pt = &p_filt[t] + &j * (&ps[t + 1] - &p_pred[t + 1]) * j.transpose();
        symmetrize(&mut pt);
        p_lag[t] = &ps[t + 1] * j.transpose();
        ps[t] = pt;
    }
    Ok(SmoothedMoments {
        x: xs,
        p: ps,
        p_lag,
        p_filt,
        log_likelihood: ll,
    })
}

/// Sufficient statistics of the complete-data likelihood under the smoothed distribution.
#[derive(Debug, Clone)]
pub struct EmStatistics {
    /// `Σ_{t<N−1} E[z_t z_tᵀ]`.
    pub szz_x: DMatrix<f64>,
    /// `Σ_{t<N−1} E[x_{t+1} z_tᵀ]`.
    pub sxz: DMatrix<f64>,
    /// `Σ_{t<N−1} E[x_{t+1} x_{t+1}ᵀ]`.
    pub sxx: DMatrix<f64>,
    /// `Σ_t E[z_t z_tᵀ]`.
    pub szz_y: DMatrix<f64>,
    /// `Σ_t y_t E[z_t]ᵀ`.
    pub syz: DMatrix<f64>,
    /// `Σ_t y_t y_tᵀ`.
    pub syy: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub p0: DMatrix<f64>,
    pub n: usize,
}

/// `z_t = [ψ_t ⊗ x_t; ψ_t ⊗ u_t]`.
pub fn statistics(moments: &SmoothedMoments, data: &DataSet, model: &LpvSsModel) -> Result<EmStatistics> {
    let n = data.len();
    let nx = moments.x.nrows();
    let nu = data.nu();
    let ny = data.ny();
    let psi = model.basis.eval_trajectory(&data.p)?;
    let k = psi.nrows();
    let nz = k * (nx + nu);
    let mut st = EmStatistics {
        szz_x: DMatrix::zeros(nz, nz),
        sxz: DMatrix::zeros(nx, nz),
        sxx: DMatrix::zeros(nx, nx),
        szz_y: DMatrix::zeros(nz, nz),
        syz: DMatrix::zeros(ny, nz),
        syy: DMatrix::zeros(ny, ny),
        x0: moments.x.column(0).into_owned(),
        p0: moments.p[0].clone(),
        n,
    };
    for t in 0..n {
        let ps = psi.column(t).into_owned();
        let xt = moments.x.column(t).into_owned();
        let ut = data.u.column(t).into_owned();
        let mut z = DVector::zeros(nz);
        for i in 0..k {
            z.rows_mut(i * nx, nx).copy_from(&(&xt * ps[i]));
            z.rows_mut(k * nx + i * nu, nu).copy_from(&(&ut * ps[i]));
        }
        // E[z zᵀ] = ẑ ẑᵀ + blockdiag(ψψᵀ ⊗ P, 0)
        let mut ezz = &z * z.transpose();
        for a in 0..k {
            for b in 0..k {
                let w = ps[a] * ps[b];
                let mut blk = ezz.view_mut((a * nx, b * nx), (nx, nx));
                blk += &moments.p[t] * w;
            }
        }
        let yt = data.y.column(t).into_owned();
        st.szz_y += &ezz;
        st.syz += &yt * z.transpose();
        st.syy += &yt * yt.transpose();
        if t + 1 < n {
            let xn = moments.x.column(t + 1).into_owned();
            st.szz_x += &ezz;
            let mut exz = &xn * z.transpose();
            for a in 0..k {
                let mut blk = exz.view_mut((0, a * nx), (nx, nx));
                blk += &moments.p_lag[t] * ps[a];
            }
            st.sxz += exz;
            st.sxx += &xn * xn.transpose() + &moments.p[t + 1];
        }
    }
    Ok(st)
}

fn theta_x(model: &LpvSsModel) -> DMatrix<f64> {
    let blocks: Vec<&DMatrix<f64>> = model.a.coeffs().iter().chain(model.b.coeffs()).collect();
    DMatrix::from_columns(
        &blocks.iter().flat_map(|m| m.column_iter().map(|c| c.into_owned())).collect::<Vec<_>>(),
    )
}

fn theta_y(model: &LpvSsModel) -> DMatrix<f64> {
    let blocks: Vec<&DMatrix<f64>> = model.c.coeffs().iter().chain(model.d.coeffs()).collect();
    DMatrix::from_columns(
        &blocks.iter().flat_map(|m| m.column_iter().map(|c| c.into_owned())).collect::<Vec<_>>(),
    )
}

/// `Σ E[(a − Θz)(a − Θz)ᵀ]` from second moments.
fn residual_moment(saa: &DMatrix<f64>, saz: &DMatrix<f64>, szz: &DMatrix<f64>, theta: &DMatrix<f64>) -> DMatrix<f64> {
    let cross = saz * theta.transpose();
    symmetrized(saa - &cross - cross.transpose() + theta * szz * theta.transpose())
}

fn split(theta: &DMatrix<f64>, rows: usize, first: usize, second: usize, k: usize) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let a = (0..k).map(|i| theta.view((0, i * first), (rows, first)).into_owned()).collect();
    let b = (0..k)
        .map(|i| theta.view((0, k * first + i * second), (rows, second)).into_owned())
        .collect();
    (a, b)
}

/// Closed-form maximizer of the expected complete-data log-likelihood.
pub fn m_step(stats: &EmStatistics, model: &LpvSsModel) -> Result<(LpvSsModel, EmNoise)> {
    let nx = model.nx();
    let nu = model.nu();
    let ny = model.ny();
    let k = model.npsi() + 1;
    let solve = |szz: &DMatrix<f64>, saz: &DMatrix<f64>, what: &str| -> Result<DMatrix<f64>> {
        let chol = symmetrized(szz.clone())
            .cholesky()
            .ok_or_else(|| Error::InsufficientExcitation(format!("{what} regressor Gram matrix is singular")))?;
        Ok(chol.solve(&saz.transpose()).transpose())
    };
    let tx = solve(&stats.szz_x, &stats.sxz, "state")?;
    let ty = solve(&stats.szz_y, &stats.syz, "output")?;
    let q = residual_moment(&stats.sxx, &stats.sxz, &stats.szz_x, &tx) / (stats.n - 1) as f64;
    let r = residual_moment(&stats.syy, &stats.syz, &stats.szz_y, &ty) / stats.n as f64;
    let (a, b) = split(&tx, nx, nx, nu, k);
    let (c, d) = split(&ty, ny, nx, nu, k);
    let q = floor_spectrum(&q, COV_FLOOR);
    let r = floor_spectrum(&r, COV_FLOOR);
    let refined = LpvSsModel::new(
        AffineMatrixFunction::from_coeffs(a)?,
        AffineMatrixFunction::from_coeffs(b)?,
        AffineMatrixFunction::from_coeffs(c)?,
        AffineMatrixFunction::from_coeffs(d)?,
        NoiseModel::General(GeneralNoise::identity_inputs(q.clone(), r.clone(), model.npsi())),
        model.basis.clone(),
    )?;
    let noise = EmNoise {
        q,
        r,
        x0: stats.x0.clone(),
        p0: floor_spectrum(&stats.p0, COV_FLOOR),
    };
    Ok((refined, noise))
}

/// Expected complete-data log-likelihood of `(model, noise)` under fixed statistics, up to
/// constants.
pub fn expected_log_likelihood(stats: &EmStatistics, model: &LpvSsModel, noise: &EmNoise) -> Result<f64> {
    let term = |cov: &DMatrix<f64>, moment: DMatrix<f64>, count: f64, what: &str| -> Result<f64> {
        let chol = symmetrized(cov.clone())
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
        Ok(-0.5 * (count * log_det_chol(&chol) + chol.solve(&moment).trace()))
    };
    let dx0 = &stats.x0 - &noise.x0;
    let init = term(&noise.p0, &stats.p0 + &dx0 * dx0.transpose(), 1.0, "P0")?;
    let trans = term(
        &noise.q,
        residual_moment(&stats.sxx, &stats.sxz, &stats.szz_x, &theta_x(model)),
        (stats.n - 1) as f64,
        "Q",
    )?;
    let out = term(
        &noise.r,
        residual_moment(&stats.syy, &stats.syz, &stats.szz_y, &theta_y(model)),
        stats.n as f64,
        "R",
    )?;
    Ok(init + trans + out)
}

#[derive(Debug, Clone)]
pub struct EmResult {
    pub model: LpvSsModel,
    /// Log-likelihood of each evaluated iterate, starting with the initial model.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// The likelihood dropped beyond the slack; the best earlier model is returned.
    pub decreased: bool,
}

/// Alternates E- and M-steps from `model0`, which must carry a `G = H = I` general noise block
/// (see [`em_initial_model`]).
pub fn em_refine(model0: &LpvSsModel, data: &DataSet, config: &EmConfig) -> Result<EmResult> {
    config.validate()?;
    let mut noise = noise_of(model0, config)?;
    let mut model = model0.clone();
    let mut trace = Vec::new();
    let mut best = model0.clone();
    if config.max_iter == 0 {
        return Ok(EmResult {
            model: best,
            trace,
            iterations: 0,
            converged: false,
            decreased: false,
        });
    }
    let mut converged = false;
    let mut decreased = false;
    let mut iterations = 0;
    loop {
        let moments = e_step(&model, &noise, data)?;
        let ll = moments.log_likelihood;
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if ll < prev - ASCENT_SLACK * prev.abs() {
                log::warn!("EM likelihood decreased from {prev} to {ll}; keeping the previous model");
                decreased = true;
                break;
            }
            let delta = (ll - prev).abs();
            trace.push(ll);
            best = model.clone();
            if delta < config.rel_tol * ll.abs() && delta < config.abs_tol {
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
            best = model.clone();
        }
        if iterations == config.max_iter {
            break;
        }
        let stats = statistics(&moments, data, &model)?;
        let (next, next_noise) = m_step(&stats, &model)?;
        model = next;
        noise = next_noise;
        iterations += 1;
    }
    Ok(EmResult {
        model: best,
        trace,
        iterations,
        converged,
        decreased,
    })
}
