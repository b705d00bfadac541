//! Metrics, excitation signals, the three-step pipeline and the Monte-Carlo runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cra::{estimate_table_cra, CraConfig};
use crate::em::{em_initial_model, em_refine, EmConfig};
use crate::error::{Error, Result};
use crate::fir::estimate_table_fir;
use crate::gb::{gb_refine, GbConfig};
use crate::markov::{keys_up_to, SubMarkovTable};
use crate::model::{
    one_step_predict, random_stable_model, simulate, simulate_with_innovations, BasisFunctionSet, DataSet, LpvSsModel,
    ModelDims,
};
use crate::realization::{
    greedy_selection, realize_table, required_keys, Order, SelectionBasis, NOISY_RANK_TOL,
};

/// `max{1 − Σ‖y_t − ŷ_t‖₂ / Σ‖y_t − ȳ‖₂, 0} · 100`, with `ȳ` the mean of `y_ref`.
pub fn bfr(y_ref: &DMatrix<f64>, y_hat: &DMatrix<f64>) -> Result<f64> {
    if y_ref.shape() != y_hat.shape() {
        return Err(Error::Dimension(format!(
            "reference is {:?}, estimate {:?}",
            y_ref.shape(),
            y_hat.shape()
        )));
    }
    let mean = y_ref.column_mean();
    let num: f64 = y_ref.column_iter().zip(y_hat.column_iter()).map(|(a, b)| (a - b).norm()).sum();
    let den: f64 = y_ref.column_iter().map(|a| (a - &mean).norm()).sum();
    let scale: f64 = y_ref.column_iter().map(|a| a.norm()).sum();
    if !(den > 1e-12 * scale) {
        return Err(Error::DegenerateSignal("BFR reference signal is constant".into()));
    }
    if !num.is_finite() {
        return Err(Error::Diverged {
            time: 0,
            detail: "estimated output is not finite".into(),
        });
    }
    Ok((1.0 - num / den).max(0.0) * 100.0)
}

/// `10 log₁₀(Σ s_i² / Σ n_i²)` per channel.
pub fn channel_snr_db(signal: &DMatrix<f64>, noise: &DMatrix<f64>) -> Vec<f64> {
    (0..signal.nrows())
        .map(|i| {
            let s = signal.row(i).norm_squared();
            let n = noise.row(i).norm_squared();
            10.0 * (s / n).log10()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SnrCalibration {
    /// Diagonal innovation covariance.
    pub xi: DMatrix<f64>,
    pub realized_db: Vec<f64>,
    /// Data simulated with the calibrated innovations.
    pub data: DataSet,
}

fn scaled_innovations(z: &DMatrix<f64>, var: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(z.nrows(), z.ncols(), |i, t| var[i].sqrt() * z[(i, t)])
}

/// Scales the diagonal of the model's `Ξ` per channel so that the output SNR against the
/// noise-free output hits `targets_db` (two scale-and-measure passes). `z` holds standard
/// normal draws (`ny × N`); infinite targets give zero noise.
pub fn set_snr(
    model: &LpvSsModel,
    u: &DMatrix<f64>,
    p: &DMatrix<f64>,
    targets_db: &[f64],
    z: &DMatrix<f64>,
) -> Result<SnrCalibration> {
    let ny = model.ny();
    let proto = match &model.noise {
        crate::model::NoiseModel::Innovation(inn) => inn.xi.clone(),
        _ => return Err(Error::InvalidArgument("SNR calibration needs an innovation-form model".into())),
    };
    if targets_db.len() != ny || z.shape() != (ny, u.ncols()) {
        return Err(Error::Dimension("SNR targets or noise draws do not match the outputs".into()));
    }
    let x0 = DVector::zeros(model.nx());
    let yd = simulate(&model.noise_free(), u, p, &x0, 0)?.y;
    for i in 0..ny {
        if yd.row(i).norm_squared() == 0.0 {
            return Err(Error::DegenerateSignal(format!("noise-free output channel {i} has zero power")));
        }
    }
    let mut var: Vec<f64> = (0..ny)
        .map(|i| if targets_db[i].is_infinite() && targets_db[i] > 0.0 { 0.0 } else { proto[(i, i)].max(1e-12) })
        .collect();
    let measure = |var: &[f64]| -> Result<(DataSet, Vec<f64>)> {
        let d = simulate_with_innovations(model, u, p, &x0, &scaled_innovations(z, var))?;
        let noise = &d.y - &yd;
        let snr = channel_snr_db(&yd, &noise);
        Ok((d, snr))
    };
    for _ in 0..2 {
        let (_, snr) = measure(&var)?;
        for i in 0..ny {
            if var[i] > 0.0 {
                var[i] *= 10f64.powf((snr[i] - targets_db[i]) / 10.0);
            }
        }
    }
    let (data, realized_db) = measure(&var)?;
    Ok(SnrCalibration {
        xi: DMatrix::from_diagonal(&DVector::from_vec(var)),
        realized_db,
        data,
    })
}

/// White uniform `u` on `u_range` and random-binary `p` on `p_levels`.
pub fn identification_signals(
    nu: usize,
    np: usize,
    n: usize,
    u_range: [f64; 2],
    p_levels: [f64; 2],
    seed: u64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = DMatrix::from_fn(nu, n, |_, _| rng.gen_range(u_range[0]..u_range[1]));
    let p = DMatrix::from_fn(np, n, |_, _| if rng.gen::<bool>() { p_levels[1] } else { p_levels[0] });
    (u, p)
}

/// Validation excitation: two sinusoidal inputs and `np` phase-shifted sinusoidal scheduling
/// signals, each with `U(−0.15, 0.15)` dither, at `t = 1 … N_val`.
pub fn validation_signals(n_val: usize, np: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dither = || rng.gen_range(-0.15..0.15);
    let mut u = DMatrix::zeros(2, n_val);
    let mut p = DMatrix::zeros(np, n_val);
    for c in 0..n_val {
        let t = (c + 1) as f64;
        u[(0, c)] = 0.5 * (0.035 * t).cos() + dither();
        u[(1, c)] = 0.5 * (0.035 * t).sin() + dither();
        for r in 0..np {
            let i = (r + 1) as f64;
            p[(r, c)] = 0.25 - 0.05 * i + 0.4 * (0.035 * t + 2.0 * i * std::f64::consts::PI / 5.0).sin() + dither();
        }
    }
    (u, p)
}

pub fn standard_normal(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Cra,
    Fir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Refinement {
    None,
    Em,
    Gb,
}

impl Estimator {
    pub fn label(self) -> &'static str {
        match self {
            Estimator::Cra => "CRA",
            Estimator::Fir => "FIR",
        }
    }
}

pub fn method_label(est: Estimator, refinement: Refinement) -> String {
    match refinement {
        Refinement::None => est.label().to_string(),
        Refinement::Em => format!("{}+EM", est.label()),
        Refinement::Gb => format!("{}+GB", est.label()),
    }
}

/// Serializable subset of [`EmConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EmSettings {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for EmSettings {
    fn default() -> Self {
        let c = EmConfig::default();
        Self {
            max_iter: c.max_iter,
            rel_tol: c.rel_tol,
            abs_tol: c.abs_tol,
        }
    }
}

impl From<&EmSettings> for EmConfig {
    fn from(s: &EmSettings) -> Self {
        EmConfig {
            max_iter: s.max_iter,
            rel_tol: s.rel_tol,
            abs_tol: s.abs_tol,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// FIR depth.
    pub nh: usize,
    pub no: usize,
    pub nr: usize,
    /// Greedy candidate depth.
    pub max_depth: usize,
    /// State order; `None` selects it from the singular values, or takes the true order in
    /// Monte-Carlo runs.
    pub order: Option<usize>,
    /// Guess of the state order passed to the greedy selection.
    pub nx_guess: usize,
    pub rank_tol: f64,
    pub em: EmSettings,
    pub gb: GbConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            nh: 2,
            no: 10,
            nr: 10,
            max_depth: 1,
            order: None,
            nx_guess: 4,
            rank_tol: NOISY_RANK_TOL,
            em: EmSettings::default(),
            gb: GbConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Identified {
    pub table: SubMarkovTable,
    pub selection: SelectionBasis,
    pub model: LpvSsModel,
    pub singular_values: DVector<f64>,
    /// FIR tuning ended on the search boundary.
    pub boundary: bool,
}

/// Sub-Markov estimation, greedy selection and SVD realization.
pub fn identify(est: Estimator, data: &DataSet, basis: &BasisFunctionSet, cfg: &PipelineConfig) -> Result<Identified> {
    let (table, boundary, selection) = match est {
        Estimator::Fir => {
            let fir = estimate_table_fir(data, basis, cfg.nh, None)?;
            let sel = greedy_selection(&fir.table, cfg.nx_guess, cfg.no, cfg.nr, cfg.max_depth)?;
            (fir.table, fir.boundary, sel)
        }
        Estimator::Cra => {
            // Hankel entries first, then the keys the chosen selection reads.
            let first = keys_up_to(basis.npsi(), 2 * cfg.max_depth);
            let coarse = estimate_table_cra(data, basis, &CraConfig::new(first.clone()))?;
            let sel = greedy_selection(&coarse, cfg.nx_guess, cfg.no, cfg.nr, cfg.max_depth)?;
            let rest: Vec<_> = required_keys(&sel, basis.npsi())
                .into_iter()
                .filter(|k| !coarse.contains(k))
                .collect();
            let mut table = estimate_table_cra(data, basis, &CraConfig::new(rest))?;
            for (k, v) in coarse.iter() {
                table.insert(k.clone(), v.clone())?;
            }
            (table, false, sel)
        }
    };
    let order = cfg.order.map_or(Order::Auto, Order::Fixed);
    let (model, singular_values) = realize_table(&table, &selection, basis, order, cfg.rank_tol)?;
    Ok(Identified {
        table,
        selection,
        model,
        singular_values,
        boundary,
    })
}

#[derive(Debug, Clone)]
pub struct Refined {
    pub model: LpvSsModel,
    pub iterations: usize,
    pub flags: Vec<String>,
    pub trace: Vec<f64>,
}

pub fn refine(model: &LpvSsModel, data: &DataSet, refinement: Refinement, cfg: &PipelineConfig) -> Result<Refined> {
    match refinement {
        Refinement::None => Ok(Refined {
            model: model.clone(),
            iterations: 0,
            flags: vec![],
            trace: vec![],
        }),
        Refinement::Em => {
            let start = em_initial_model(model, data)?;
            let r = em_refine(&start, data, &EmConfig::from(&cfg.em))?;
            let mut flags = vec![];
            if r.decreased {
                flags.push("em-decreased".to_string());
            }
            if !r.converged {
                flags.push("em-max-iter".to_string());
            }
            Ok(Refined {
                model: r.model,
                iterations: r.iterations,
                flags,
                trace: r.trace,
            })
        }
        Refinement::Gb => {
            let r = gb_refine(model, data, &cfg.gb)?;
            let mut flags = vec![];
            if r.stalled {
                flags.push("gb-stalled".to_string());
            }
            Ok(Refined {
                model: r.model,
                iterations: r.iterations,
                flags,
                trace: r.cost_trace,
            })
        }
    }
}

/// Where the data-generating system comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SystemSource {
    Random {
        seed: u64,
        nx: usize,
        nu: usize,
        ny: usize,
        np: usize,
        rho: f64,
    },
    File {
        path: String,
    },
}

impl SystemSource {
    pub fn load(&self) -> Result<LpvSsModel> {
        match self {
            SystemSource::Random { seed, nx, nu, ny, np, rho } => random_stable_model(
                ModelDims {
                    nx: *nx,
                    nu: *nu,
                    ny: *ny,
                    npsi: *np,
                },
                *rho,
                *seed,
            ),
            SystemSource::File { path } => LpvSsModel::load(path),
        }
    }
}

/// One SNR level: a value for every channel, a per-channel list, or `"inf"` for noise-free data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SnrTarget {
    Uniform(f64),
    PerChannel(Vec<f64>),
    Named(String),
}

impl SnrTarget {
    pub fn per_channel(&self, ny: usize) -> Result<Vec<f64>> {
        match self {
            SnrTarget::Uniform(v) => Ok(vec![*v; ny]),
            SnrTarget::PerChannel(v) if v.len() == ny => Ok(v.clone()),
            SnrTarget::PerChannel(v) => Err(Error::InvalidArgument(format!(
                "SNR list has {} entries for {ny} outputs",
                v.len()
            ))),
            SnrTarget::Named(s) if s == "inf" => Ok(vec![f64::INFINITY; ny]),
            SnrTarget::Named(s) => Err(Error::Parse(format!("unknown SNR target '{s}'"))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            SnrTarget::Uniform(v) => format!("{v}"),
            SnrTarget::PerChannel(v) => v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("/"),
            SnrTarget::Named(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub system: SystemSource,
    pub n: usize,
    pub n_val: usize,
    pub snr_db: Vec<SnrTarget>,
    pub u_range: [f64; 2],
    pub p_levels: [f64; 2],
    pub estimators: Vec<Estimator>,
    pub refinements: Vec<Refinement>,
    pub runs: usize,
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub output_dir: Option<String>,
    /// Write refinement traces to `trace/` under the output directory.
    pub save_traces: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            system: SystemSource::Random {
                seed: 1,
                nx: 4,
                nu: 2,
                ny: 2,
                np: 5,
                rho: 0.7,
            },
            n: 5000,
            n_val: 200,
            snr_db: [40.0, 25.0, 10.0, 0.0].into_iter().map(SnrTarget::Uniform).collect(),
            u_range: [-1.0, 1.0],
            p_levels: [-0.9, 0.9],
            estimators: vec![Estimator::Cra, Estimator::Fir],
            refinements: vec![Refinement::None, Refinement::Em, Refinement::Gb],
            runs: 20,
            seed: 2024,
            pipeline: PipelineConfig::default(),
            output_dir: None,
            save_traces: false,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidArgument("run count must be at least 1".into()));
        }
        if self.snr_db.is_empty() || self.estimators.is_empty() || self.refinements.is_empty() {
            return Err(Error::InvalidArgument("SNR levels, estimators and refinements must be non-empty".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// One row of `results.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub snr: String,
    pub method: String,
    pub success: bool,
    /// Simulated output against the noise-free validation output.
    pub bfr_sim: Option<f64>,
    /// One-step prediction against the oracle predictor.
    pub bfr_pred: Option<f64>,
    /// `bfr_sim` for unrefined models, `bfr_pred` for refined ones.
    pub bfr: Option<f64>,
    pub time_s: f64,
    pub iterations: usize,
    pub flags: String,
    pub seed: u64,
    /// Refinement objective per iteration.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub snr: String,
    pub mean: f64,
    pub sd: f64,
    pub successes: usize,
    pub runs: usize,
    pub mean_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct MonteCarloResult {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
    pub methods: Vec<String>,
    pub snr_labels: Vec<String>,
}

struct Validation {
    data: DataSet,
    oracle: DMatrix<f64>,
}

fn evaluate(model: &LpvSsModel, val: &Validation) -> Result<(f64, f64)> {
    let sim = simulate(&model.noise_free(), &val.data.u, &val.data.p, &DVector::zeros(model.nx()), 0)?;
    let yd = val.data.yd.as_ref().expect("validation data carries yd");
    let bfr_sim = bfr(yd, &sim.y)?;
    let bfr_pred = bfr(&val.oracle, &one_step_predict(model, &val.data)?)?;
    Ok((bfr_sim, bfr_pred))
}

fn run_seed(master: u64, run: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(run as u64 + 1);
    rng.gen()
}

fn one_run(spec: &ExperimentSpec, truth: &LpvSsModel, run: usize) -> Result<Vec<RunRecord>> {
    let seed = run_seed(spec.seed, run);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: [u64; 4] = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
    let (nu, ny, np) = (truth.nu(), truth.ny(), truth.basis.np);
    let (u, p) = identification_signals(nu, np, spec.n, spec.u_range, spec.p_levels, seeds[0]);
    let z = standard_normal(ny, spec.n, seeds[1]);
    if nu != 2 {
        return Err(Error::InvalidArgument("validation signals are defined for two inputs".into()));
    }
    let (uv, pv) = validation_signals(spec.n_val, np, seeds[2]);
    let zv = standard_normal(ny, spec.n_val, seeds[3]);
    let oracle_model = truth.clone();
    let mut pipeline = spec.pipeline.clone();
    pipeline.order = pipeline.order.or(Some(truth.nx()));
    let mut out = Vec::new();
    for level in &spec.snr_db {
        let targets = level.per_channel(ny)?;
        let cal = set_snr(truth, &u, &p, &targets, &z)?;
        let var: Vec<f64> = (0..ny).map(|i| cal.xi[(i, i)]).collect();
        let val_data = simulate_with_innovations(truth, &uv, &pv, &DVector::zeros(truth.nx()), &scaled_innovations(&zv, &var))?;
        let oracle = one_step_predict(&oracle_model, &val_data)?;
        let val = Validation { data: val_data, oracle };
        for &est in &spec.estimators {
            let t0 = Instant::now();
            let identified = identify(est, &cal.data, &truth.basis, &pipeline);
            let t_id = t0.elapsed().as_secs_f64();
            for &refinement in &spec.refinements {
                let mut rec = RunRecord {
                    run,
                    snr: level.label(),
                    method: method_label(est, refinement),
                    success: false,
                    bfr_sim: None,
                    bfr_pred: None,
                    bfr: None,
                    time_s: t_id,
                    iterations: 0,
                    flags: String::new(),
                    seed,
                    trace: vec![],
                };
                let outcome = identified.as_ref().map_err(|e| e.to_string()).and_then(|id| {
                    let t1 = Instant::now();
                    let r = refine(&id.model, &cal.data, refinement, &pipeline).map_err(|e| e.to_string())?;
                    rec.time_s += t1.elapsed().as_secs_f64();
                    rec.iterations = r.iterations;
                    rec.trace = r.trace;
                    let mut flags = r.flags;
                    if id.boundary {
                        flags.push("fir-boundary".into());
                    }
                    let (s, pr) = evaluate(&r.model, &val).map_err(|e| e.to_string())?;
                    Ok((s, pr, flags))
                });
                match outcome {
                    Ok((s, pr, flags)) => {
                        rec.success = true;
                        rec.bfr_sim = Some(s);
                        rec.bfr_pred = Some(pr);
                        rec.bfr = Some(if refinement == Refinement::None { s } else { pr });
                        rec.flags = flags.join(";");
                    }
                    Err(msg) => {
                        log::warn!("run {run}, SNR {}, {}: {msg}", level.label(), rec.method);
                        rec.flags = format!("failed: {msg}");
                    }
                }
                out.push(rec);
            }
        }
    }
    Ok(out)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Runs the Monte-Carlo study. Per-run failures are recorded, not propagated; statistics use
/// successful runs only.
pub fn run_montecarlo(spec: &ExperimentSpec) -> Result<MonteCarloResult> {
    spec.validate()?;
    let truth = spec.system.load()?;
    let per_run: Vec<Vec<RunRecord>> = (0..spec.runs)
        .into_par_iter()
        .map(|run| one_run(spec, &truth, run))
        .collect::<Result<_>>()?;
    let records: Vec<RunRecord> = per_run.into_iter().flatten().collect();

    let mut methods = Vec::new();
    for &e in &spec.estimators {
        for &r in &spec.refinements {
            methods.push(method_label(e, r));
        }
    }
    let snr_labels: Vec<String> = spec.snr_db.iter().map(|s| s.label()).collect();
    let mut groups: BTreeMap<(String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in &records {
        groups.entry((r.method.clone(), r.snr.clone())).or_default().push(r);
    }
    let mut summary = Vec::new();
    for m in &methods {
        for s in &snr_labels {
            let rows = groups.get(&(m.clone(), s.clone())).cloned().unwrap_or_default();
            let ok: Vec<f64> = rows.iter().filter_map(|r| r.bfr).collect();
            let times: Vec<f64> = rows.iter().filter(|r| r.success).map(|r| r.time_s).collect();
            let (mean, sd) = mean_sd(&ok);
            summary.push(SummaryRow {
                method: m.clone(),
                snr: s.clone(),
                mean,
                sd,
                successes: ok.len(),
                runs: rows.len(),
                mean_time_s: mean_sd(&times).0,
            });
        }
    }
    Ok(MonteCarloResult {
        records,
        summary,
        methods,
        snr_labels,
    })
}

impl MonteCarloResult {
    pub fn get(&self, method: &str, snr: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.method == method && r.snr == snr)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean (standard deviation) of the BFR per method and SNR, with success counts when some
    /// runs failed, followed by mean wall-clock times.
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let width = 20;
        let _ = write!(s, "{:<10}", "BFR [%]");
        for l in &self.snr_labels {
            let _ = write!(s, "{:>width$}", format!("{l} dB"));
        }
        let _ = writeln!(s);
        for m in &self.methods {
            let label = if m == "CRA" || m == "FIR" { format!("{m}*") } else { m.clone() };
            let _ = write!(s, "{label:<10}");
            for l in &self.snr_labels {
                let r = self.get(m, l).expect("summary row");
                let mut cell = format!("{:.2} ({:.2})", r.mean, r.sd);
                if r.successes < r.runs {
                    cell.push_str(&format!(" [{}/{}]", r.successes, r.runs));
                }
                let _ = write!(s, "{cell:>width$}");
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(s);
        let _ = write!(s, "{:<10}", "Time [s]");
        for l in &self.snr_labels {
            let _ = write!(s, "{:>width$}", format!("{l} dB"));
        }
        let _ = writeln!(s);
        for m in &self.methods {
            let _ = write!(s, "{m:<10}");
            for l in &self.snr_labels {
                let r = self.get(m, l).expect("summary row");
                let _ = write!(s, "{:>width$}", format!("{:.3}", r.mean_time_s));
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(s, "\n* simulated output against the noise-free output; others: one-step prediction against the oracle predictor.");
        s
    }

    pub fn write_outputs(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.write_csv(dir.join("results.csv"))?;
        std::fs::write(dir.join("summary.txt"), self.summary_text())?;
        Ok(())
    }

    /// One `iteration,value` CSV per refined record.
    pub fn write_traces(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref().join("trace");
        std::fs::create_dir_all(&dir)?;
        for r in self.records.iter().filter(|r| !r.trace.is_empty()) {
            let name = format!("run{}_snr{}_{}.csv", r.run, r.snr.replace('/', "-"), r.method.replace('+', "-"));
            let mut w = csv::Writer::from_path(dir.join(name))?;
            w.write_record(["iteration", "value"])?;
            for (i, v) in r.trace.iter().enumerate() {
                w.write_record([i.to_string(), v.to_string()])?;
            }
            w.flush()?;
        }
        Ok(())
    }
}
