//! Correlation analysis: each sub-Markov parameter is a ratio of a higher-order cross-correlation
//! and the variances of the signals involved, valid for white inputs and white, mutually
//! independent scheduling streams.
//!
//! For the key `s₁ … sₙ` the shifts are `τ_{s_k} = k − 1` and `τ_u = n − 1`:
//!
//! ```text
//! C_{s₁} A_{s₂} ⋯ B_{sₙ} = R_{yψ…u}(0, …, n−1, n−1) / (σ²_{ψ_{s₁}} ⋯ σ²_{ψ_{sₙ}}) · Σ_u⁻¹
//! ```
//!
//! with `σ²_{ψ₀} = 1`. Sample means of `y`, `u` and `ψ⁽ⁱ⁾` (`i ≥ 1`) are removed first.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::markov::{SubMarkovKey, SubMarkovTable};
use crate::model::{BasisFunctionSet, DataSet};

#[derive(Debug, Clone)]
pub struct CraConfig {
    pub keys: Vec<SubMarkovKey>,
    pub min_samples: usize,
    /// Variances below this fraction of the signal power count as degenerate.
    pub degeneracy_floor: f64,
}

impl CraConfig {
    pub fn new(keys: Vec<SubMarkovKey>) -> Self {
        Self {
            keys,
            min_samples: 10,
            degeneracy_floor: 1e-8,
        }
    }
}

/// `1/(N − τ_u + 1) Σ_{t=τ_u}^{N−1} y_t ψ⁽ⁱ⁾_{t−τᵢ} ⋯ ψ⁽ʲ⁾_{t−τⱼ} u_{t−τ_u}ᵀ` (0-based `t`).
///
/// `psi_streams` pairs each scheduling stream with its shift.
pub fn cross_correlation(
    y: &DMatrix<f64>,
    psi_streams: &[(&[f64], usize)],
    u: &DMatrix<f64>,
    tau_u: usize,
) -> Result<DMatrix<f64>> {
    let n = y.ncols();
    if u.ncols() != n || psi_streams.iter().any(|(s, _)| s.len() != n) {
        return Err(Error::Dimension("all signals must have the same length".into()));
    }
    let max_shift = psi_streams.iter().map(|&(_, s)| s).chain([tau_u]).max().unwrap_or(0);
    if max_shift >= n {
        return Err(Error::TooShort {
            needed: max_shift + 1,
            got: n,
        });
    }
    let mut acc = DMatrix::zeros(y.nrows(), u.nrows());
    for t in max_shift..n {
        let w: f64 = psi_streams.iter().map(|(s, tau)| s[t - tau]).product();
        if w == 0.0 {
            continue;
        }
        acc.ger(w, &y.column(t), &u.column(t - tau_u), 1.0);
    }
    // Terms before max_shift are outside the record; the divisor follows τ_u only.
    Ok(acc / (n - tau_u + 1) as f64)
}

/// Centered signals and variances shared by all keys of one data set.
struct Moments {
    y: DMatrix<f64>,
    u: DMatrix<f64>,
    /// `psi[0]` is the constant stream; the others are centered.
    psi: Vec<Vec<f64>>,
    psi_var: Vec<f64>,
    psi_power: Vec<f64>,
    u_cov_inv: Option<DMatrix<f64>>,
    u_detail: String,
}

fn centered(row: impl Iterator<Item = f64> + Clone, n: usize) -> (Vec<f64>, f64, f64) {
    let mean = row.clone().sum::<f64>() / n as f64;
    let power = row.clone().map(|v| v * v).sum::<f64>() / n as f64;
    let c: Vec<f64> = row.map(|v| v - mean).collect();
    let var = c.iter().map(|v| v * v).sum::<f64>() / (n as f64 - 1.0);
    (c, var, power)
}

fn center_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    out
}

impl Moments {
    fn new(data: &DataSet, basis: &BasisFunctionSet, floor: f64) -> Result<Self> {
        let n = data.len();
        if n < 2 {
            return Err(Error::TooShort { needed: 2, got: n });
        }
        let psi_traj = basis.eval_trajectory(&data.p)?;
        let npsi = basis.npsi();
        let mut psi = vec![vec![1.0; n]];
        let mut psi_var = vec![1.0];
        let mut psi_power = vec![1.0];
        for i in 1..=npsi {
            let (c, var, power) = centered(psi_traj.row(i).iter().copied(), n);
            psi.push(c);
            psi_var.push(var);
            psi_power.push(power);
        }

        let u = center_rows(&data.u);
        let y = center_rows(&data.y);
        let cov = &u * u.transpose() / (n as f64 - 1.0);
        let power = data.u.iter().map(|v| v * v).sum::<f64>() / (n * data.nu().max(1)) as f64;
        let min_eig = crate::linalg::min_eigenvalue(&cov);
        let (u_cov_inv, u_detail) = if data.nu() == 0 || !(min_eig > floor * power) {
            (None, format!("input covariance has smallest eigenvalue {min_eig:.3e} (power {power:.3e})"))
        } else {
            warn_if_correlated(&cov);
            (cov.clone().try_inverse(), String::new())
        };
        Ok(Self {
            y,
            u,
            psi,
            psi_var,
            psi_power,
            u_cov_inv,
            u_detail,
        })
    }

    fn estimate(&self, key: &SubMarkovKey, floor: f64) -> Result<DMatrix<f64>> {
        let degenerate = |detail: String| Error::DegenerateExcitation {
            key: key.to_string(),
            detail,
        };
        let Some(u_cov_inv) = &self.u_cov_inv else {
            return Err(degenerate(self.u_detail.clone()));
        };
        let chars = key.chars();
        if let Some(&bad) = chars.iter().find(|&&s| s >= self.psi.len()) {
            return Err(Error::InvalidArgument(format!("key {key} uses ψ index {bad} beyond the basis")));
        }
        let mut denom = 1.0;
        for &s in chars {
            let (var, power) = (self.psi_var[s], self.psi_power[s]);
            if !(var > floor * power) {
                return Err(degenerate(format!("ψ{s} has variance {var:.3e} (power {power:.3e})")));
            }
            denom *= var;
        }
        let streams: Vec<(&[f64], usize)> = chars
            .iter()
            .enumerate()
            .filter(|&(_, &s)| s != 0)
            .map(|(k, &s)| (self.psi[s].as_slice(), k))
            .collect();
        let tau_u = chars.len() - 1;
        let r = cross_correlation(&self.y, &streams, &self.u, tau_u)?;
        Ok(r / denom * u_cov_inv)
    }
}

fn warn_if_correlated(cov: &DMatrix<f64>) {
    let n = cov.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let rho = cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt();
            if rho.abs() > 0.1 {
                log::warn!("input channels {i} and {j} are correlated (ρ = {rho:.3}); CRA assumes white inputs");
            }
        }
    }
}

/// Estimates one sub-Markov parameter. `D_s` keys use zero shifts.
pub fn estimate_sub_markov_cra(data: &DataSet, basis: &BasisFunctionSet, key: &SubMarkovKey) -> Result<DMatrix<f64>> {
    let floor = CraConfig::new(vec![]).degeneracy_floor;
    Moments::new(data, basis, floor)?.estimate(key, floor)
}

/// Estimates every configured key independently. Duplicates are computed once, and all per-key
/// failures are reported together.
pub fn estimate_table_cra(data: &DataSet, basis: &BasisFunctionSet, config: &CraConfig) -> Result<SubMarkovTable> {
    if data.len() < config.min_samples {
        return Err(Error::TooShort {
            needed: config.min_samples,
            got: data.len(),
        });
    }
    let mut table = SubMarkovTable::new(data.ny(), data.nu(), basis.npsi());
    let keys: Vec<&SubMarkovKey> = config.keys.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if keys.is_empty() {
        return Ok(table);
    }
    let moments = Moments::new(data, basis, config.degeneracy_floor)?;
    let results: Vec<(String, Result<DMatrix<f64>>)> = keys
        .par_iter()
        .map(|k| (k.to_string(), moments.estimate(k, config.degeneracy_floor)))
        .collect();
    let mut failures = Vec::new();
    for (key, (name, res)) in keys.into_iter().zip(results) {
        match res {
            Ok(m) => table.insert(key.clone(), m)?,
            Err(e) => failures.push((name, e.to_string())),
        }
    }
    if !failures.is_empty() {
        return Err(Error::KeyFailures(failures));
    }
    Ok(table)
}

/// Lag-1 … lag-`max_lag` sample autocorrelations of every input channel and every `ψ⁽ⁱ⁾`, `i ≥ 1`.
#[derive(Debug, Clone)]
pub struct WhitenessReport {
    pub u: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
}

impl WhitenessReport {
    /// Largest absolute autocorrelation over all signals and lags.
    pub fn worst(&self) -> f64 {
        self.u.iter().chain(&self.psi).flatten().fold(0.0, |a, &b| a.max(b.abs()))
    }
}

fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let c0: f64 = c.iter().map(|v| v * v).sum();
    (1..=max_lag)
        .map(|lag| {
            if lag >= n || c0 == 0.0 {
                return 0.0;
            }
            c[lag..].iter().zip(&c[..n - lag]).map(|(a, b)| a * b).sum::<f64>() / c0
        })
        .collect()
}

pub fn whiteness_diagnostics(data: &DataSet, basis: &BasisFunctionSet, max_lag: usize) -> Result<WhitenessReport> {
    let psi = basis.eval_trajectory(&data.p)?;
    let row = |m: &DMatrix<f64>, i: usize| m.row(i).iter().copied().collect::<Vec<_>>();
    Ok(WhitenessReport {
        u: (0..data.nu()).map(|i| autocorrelation(&row(&data.u, i), max_lag)).collect(),
        psi: (1..psi.nrows()).map(|i| autocorrelation(&row(&psi, i), max_lag)).collect(),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::markov::{true_sub_markov, IndexWord};
    use crate::model::{simulate, AffineMatrixFunction, LpvSsModel, NoiseModel};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scalar system with `A₀ = 0.5, B₀ = 1, C₀ = 1, D₀ = 0.2` and one scheduling channel.
    pub(crate) fn scalar_system() -> LpvSsModel {
        let f = |a: f64, b: f64| AffineMatrixFunction::new(DMatrix::from_element(1, 1, a), vec![DMatrix::from_element(1, 1, b)]).unwrap();
        LpvSsModel::new(
            f(0.5, 0.2),
            f(1.0, 0.4),
            f(1.0, 0.3),
            f(0.2, 0.1),
            NoiseModel::NoiseFree,
            BasisFunctionSet::poly_linear(1),
        )
        .unwrap()
    }

    /// White `u ~ U(−1, 1)` and random binary `p ∈ {−0.9, 0.9}`.
    pub(crate) fn white_excitation(nu: usize, np: usize, n: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = DMatrix::from_fn(nu, n, |_, _| rng.gen_range(-1.0..1.0));
        let p = DMatrix::from_fn(np, n, |_, _| if rng.gen::<bool>() { 0.9 } else { -0.9 });
        (u, p)
    }

    fn scalar_data(n: usize, seed: u64) -> (LpvSsModel, DataSet) {
        let m = scalar_system();
        let (u, p) = white_excitation(1, 1, n, seed);
        let d = simulate(&m, &u, &p, &DVector::zeros(1), seed).unwrap();
        (m, d)
    }

    #[test]
    fn zero_output_gives_zero_correlation() {
        let y = DMatrix::zeros(2, 50);
        let u = DMatrix::from_fn(1, 50, |_, t| t as f64);
        let r = cross_correlation(&y, &[], &u, 3).unwrap();
        assert_eq!(r, DMatrix::zeros(2, 1));
    }

    #[test]
    fn white_autocorrelation_is_identity() {
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = DMatrix::from_fn(2, n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let r = cross_correlation(&u, &[], &u, 0).unwrap();
        // Entries of a unit-variance sample covariance have standard deviation ≤ √(2/N).
        let band = 3.0 * (2.0 / n as f64).sqrt();
        assert!((r - DMatrix::identity(2, 2)).amax() < band);
    }

    #[test]
    fn unit_streams_reduce_to_plain_cross_correlation() {
        let n = 300;
        let y = DMatrix::from_fn(2, n, |i, t| ((t * 3 + i) as f64).sin());
        let u = DMatrix::from_fn(2, n, |i, t| ((t * 5 + 2 * i) as f64).cos());
        let ones = vec![1.0; n];
        let r = cross_correlation(&y, &[(&ones, 0), (&ones, 1)], &u, 1).unwrap();
        let mut direct = DMatrix::zeros(2, 2);
        for t in 1..n {
            for i in 0..2 {
                for j in 0..2 {
                    direct[(i, j)] += y[(i, t)] * u[(j, t - 1)];
                }
            }
        }
        direct /= n as f64;
        assert!((r - direct).amax() < 1e-14);
    }

    #[test]
    fn shift_beyond_record_is_rejected() {
        let y = DMatrix::zeros(1, 3);
        assert!(matches!(cross_correlation(&y, &[], &y, 3), Err(Error::TooShort { .. })));
    }

    #[test]
    fn scalar_system_keys_within_bands() {
        let (m, d) = scalar_data(100_000, 3);
        let key = SubMarkovKey::cab(0, &IndexWord::empty(), 0);
        let est = estimate_sub_markov_cra(&d, &m.basis, &key).unwrap()[(0, 0)];
        assert!((est - 1.0).abs() < 0.05, "{est}");
        let key = SubMarkovKey::cab(0, &IndexWord(vec![0]), 0);
        let est = estimate_sub_markov_cra(&d, &m.basis, &key).unwrap()[(0, 0)];
        assert!((est - 0.5).abs() < 0.08, "{est}");
        let key = SubMarkovKey::cab(1, &IndexWord(vec![1]), 1);
        let truth = true_sub_markov(&m, &key).unwrap()[(0, 0)];
        let est = estimate_sub_markov_cra(&d, &m.basis, &key).unwrap()[(0, 0)];
        assert!((est - truth).abs() < 0.08, "{est} vs {truth}");
    }

    #[test]
    fn zero_output_gives_zero_table() {
        let (m, mut d) = scalar_data(500, 4);
        d.y.fill(0.0);
        let keys = crate::markov::keys_up_to(1, 3);
        let t = estimate_table_cra(&d, &m.basis, &CraConfig::new(keys.clone())).unwrap();
        assert_eq!(t.len(), keys.len());
        assert!(t.iter().all(|(_, v)| v.amax() == 0.0));
    }

    #[test]
    fn empty_and_duplicate_keys() {
        let (m, d) = scalar_data(500, 5);
        assert!(estimate_table_cra(&d, &m.basis, &CraConfig::new(vec![])).unwrap().is_empty());
        let k = SubMarkovKey::d(1);
        let t = estimate_table_cra(&d, &m.basis, &CraConfig::new(vec![k.clone(), k.clone()])).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.get(&k).unwrap(), &estimate_sub_markov_cra(&d, &m.basis, &k).unwrap());
    }

    #[test]
    fn constant_scheduling_is_degenerate() {
        let (m, mut d) = scalar_data(500, 6);
        d.p.fill(0.4);
        let keys = vec![SubMarkovKey::d(0), SubMarkovKey::d(1), SubMarkovKey::cab(1, &IndexWord::empty(), 0)];
        match estimate_table_cra(&d, &m.basis, &CraConfig::new(keys)) {
            Err(Error::KeyFailures(f)) => {
                let names: Vec<&str> = f.iter().map(|(k, _)| k.as_str()).collect();
                assert_eq!(names, ["D|1", "1||0"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_input_is_degenerate() {
        let (m, mut d) = scalar_data(200, 7);
        d.u.fill(1.0);
        let r = estimate_sub_markov_cra(&d, &m.basis, &SubMarkovKey::d(0));
        assert!(matches!(r, Err(Error::DegenerateExcitation { .. })));
    }

    /// Balanced ±1 patterns have zero sample mean and known sample variance, so the plug-in
    /// formula can be evaluated in closed form.
    #[test]
    fn exact_moments_give_exact_recovery() {
        let u_pat = [1.0, 1.0, 1.0, -1.0, 1.0, -1.0, -1.0, -1.0];
        let p_pat = [1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0];
        let reps = 64;
        let n = 8 * reps;
        let u = DMatrix::from_fn(1, n, |_, t| u_pat[t % 8]);
        let p = DMatrix::from_fn(1, n, |_, t| p_pat[t % 8]);
        let basis = BasisFunctionSet::poly_linear(1);
        let theta = 0.7;
        let y = DMatrix::from_fn(1, n, |_, t| theta * p[(0, t)] * u[(0, t)]);
        let d = DataSet::new(u.clone(), p.clone(), y, None).unwrap();
        let m = Moments::new(&d, &basis, 1e-8).unwrap();
        // Σ yψu = θN, divisor N + 1, and both variances are N/(N−1).
        let est = m.estimate(&SubMarkovKey::d(1), 1e-8).unwrap()[(0, 0)];
        let nf = n as f64;
        let expected = theta * nf / (nf + 1.0) / (nf / (nf - 1.0)).powi(2);
        assert!((est - expected).abs() < 1e-14, "{est} vs {expected}");
    }

    #[test]
    fn whiteness_of_white_signals_is_small() {
        let (u, p) = white_excitation(2, 3, 20_000, 8);
        let d = DataSet::new(u, p, DMatrix::zeros(1, 20_000), None).unwrap();
        let rep = whiteness_diagnostics(&d, &BasisFunctionSet::poly_linear(3), 5).unwrap();
        assert_eq!(rep.u.len(), 2);
        assert_eq!(rep.psi.len(), 3);
        assert!(rep.worst() < 0.03);
        let ramp = DataSet::new(
            DMatrix::from_fn(1, 100, |_, t| t as f64),
            DMatrix::zeros(0, 100),
            DMatrix::zeros(1, 100),
            None,
        )
        .unwrap();
        assert!(whiteness_diagnostics(&ramp, &BasisFunctionSet::poly_linear(0), 1).unwrap().worst() > 0.9);
    }
}
