use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};

use lpvss::cra::{estimate_table_cra, CraConfig};
use lpvss::em::{em_initial_model, em_refine, EmConfig};
use lpvss::fir::{estimate_table_fir, BayesHyper};
use lpvss::gb::{gb_refine, GbConfig};
use lpvss::harness::{
    bfr, identification_signals, run_montecarlo, set_snr, standard_normal, validation_signals, ExperimentSpec,
};
use lpvss::markov::{SubMarkovKey, SubMarkovTable};
use lpvss::model::{
    one_step_predict, random_stable_model, simulate, BasisFunctionSet, DataSet, LpvSsModel, ModelDims,
};
use lpvss::realization::{greedy_selection, realize_table, required_keys, Order, SelectionBasis, NOISY_RANK_TOL};

#[derive(Parser)]
#[command(name = "lpvss", version, about = "LPV state-space identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate excitation and simulate a model (or a freshly drawn random one).
    Simulate(SimulateArgs),
    /// Estimate sub-Markov parameters.
    #[command(subcommand)]
    Estimate(EstimateCmd),
    /// Realize a state-space model from a sub-Markov table.
    Realize(RealizeArgs),
    /// Refine a model by maximum likelihood.
    #[command(subcommand)]
    Refine(RefineCmd),
    /// Best fit rate of a model on a data set.
    Bfr(BfrArgs),
    /// Run a Monte-Carlo experiment.
    Montecarlo(MonteCarloArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Signals {
    Identification,
    Validation,
}

#[derive(Args)]
struct SimulateArgs {
    /// Model JSON; omit to draw a random stable model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Write the random model here.
    #[arg(long)]
    model_out: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    nx: usize,
    #[arg(long, default_value_t = 2)]
    nu: usize,
    #[arg(long, default_value_t = 2)]
    ny: usize,
    #[arg(long, default_value_t = 5)]
    np: usize,
    #[arg(long, default_value_t = 0.7)]
    rho: f64,
    #[arg(long, value_enum, default_value_t = Signals::Identification)]
    signals: Signals,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    /// Output SNR in dB for every channel ("inf" for noise-free); needs an innovation model.
    /// Without it the model's own noise description is used.
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EstimateCmd {
    /// Correlation analysis, one key at a time.
    Cra {
        /// JSON list of key strings such as "0|12|3" and "D|0", or `auto-from-selection`.
        #[arg(long)]
        keys: String,
        /// Selection JSON used with `--keys auto-from-selection`.
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Empirical-Bayes regularized FIR regression.
    Fir {
        #[arg(long, default_value_t = 2)]
        nh: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fixed prior scale (skips tuning together with `--sigma2`).
        #[arg(long, requires = "sigma2")]
        alpha: Option<f64>,
        #[arg(long, requires = "alpha")]
        sigma2: Option<f64>,
    },
}

#[derive(Args)]
struct RealizeArgs {
    #[arg(long)]
    table: PathBuf,
    /// Selection JSON or `greedy`.
    #[arg(long, default_value = "greedy")]
    selection: String,
    /// State order or `auto`.
    #[arg(long, default_value = "auto")]
    order: Order,
    #[arg(long, default_value_t = NOISY_RANK_TOL)]
    tol: f64,
    /// Rank target of the greedy selection (defaults to the order).
    #[arg(long)]
    nx_guess: Option<usize>,
    #[arg(long, default_value_t = 10)]
    no: usize,
    #[arg(long, default_value_t = 10)]
    nr: usize,
    #[arg(long, default_value_t = 1)]
    max_depth: usize,
    /// Write the selection used here.
    #[arg(long)]
    selection_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum RefineCmd {
    /// Expectation-maximization.
    Em {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        max_iter: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Enhanced Gauss-Newton prediction-error search.
    Gb {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// GB settings JSON; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BfrMode {
    /// Simulated output against yd (or y when the data has no yd).
    Sim,
    /// One-step prediction against y, or against `--oracle`'s prediction when given.
    Pred,
}

#[derive(Args)]
struct BfrArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = BfrMode::Sim)]
    mode: BfrMode,
    /// True system whose one-step prediction is the reference in `pred` mode.
    #[arg(long)]
    oracle: Option<PathBuf>,
}

#[derive(Args)]
struct MonteCarloArgs {
    /// ExperimentSpec JSON.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    runs: Option<usize>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_data(path: &Path) -> Result<DataSet> {
    DataSet::load(path).with_context(|| format!("reading data {}", path.display()))
}

fn load_model(path: &Path) -> Result<LpvSsModel> {
    LpvSsModel::load(path).with_context(|| format!("reading model {}", path.display()))
}

fn write_trace(path: &Path, header: &str, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", header])?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate_cmd(a),
        Command::Estimate(e) => estimate_cmd(e),
        Command::Realize(a) => realize_cmd(a),
        Command::Refine(r) => refine_cmd(r),
        Command::Bfr(a) => bfr_cmd(a),
        Command::Montecarlo(a) => montecarlo_cmd(a),
    }
}

fn simulate_cmd(a: SimulateArgs) -> Result<()> {
    let model = match &a.model {
        Some(p) => load_model(p)?,
        None => random_stable_model(
            ModelDims {
                nx: a.nx,
                nu: a.nu,
                ny: a.ny,
                npsi: a.np,
            },
            a.rho,
            a.seed,
        )?,
    };
    if let Some(p) = &a.model_out {
        model.save(p)?;
    }
    let np = model.basis.np;
    let (u, p) = match a.signals {
        Signals::Identification => identification_signals(model.nu(), np, a.n, [-1.0, 1.0], [-0.9, 0.9], a.seed),
        Signals::Validation => {
            if model.nu() != 2 {
                bail!("validation signals are defined for two inputs");
            }
            validation_signals(a.n, np, a.seed)
        }
    };
    let data = match a.snr {
        Some(db) => {
            let z = standard_normal(model.ny(), a.n, a.seed.wrapping_add(1));
            let cal = set_snr(&model, &u, &p, &vec![db; model.ny()], &z)?;
            log::info!("realized SNR {:?} dB", cal.realized_db);
            cal.data
        }
        None => simulate(&model, &u, &p, &DVector::zeros(model.nx()), a.seed)?,
    };
    data.save(&a.out)?;
    Ok(())
}

fn read_keys(path: &str) -> Result<Vec<SubMarkovKey>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading keys {path}"))?;
    let names: Vec<String> = serde_json::from_str(&text).context("keys file must be a JSON list of strings")?;
    names.iter().map(|s| Ok(s.parse::<SubMarkovKey>()?)).collect()
}

fn estimate_cmd(e: EstimateCmd) -> Result<()> {
    match e {
        EstimateCmd::Cra {
            keys,
            selection,
            data,
            out,
        } => {
            let data = load_data(&data)?;
            let basis = BasisFunctionSet::poly_linear(data.np());
            let keys = if keys == "auto-from-selection" {
                let Some(sel) = selection else {
                    bail!("--keys auto-from-selection needs --selection");
                };
                let sel = SelectionBasis::load(&sel)?;
                required_keys(&sel, basis.npsi()).into_iter().collect()
            } else {
                read_keys(&keys)?
            };
            estimate_table_cra(&data, &basis, &CraConfig::new(keys))?.save(&out)?;
        }
        EstimateCmd::Fir {
            nh,
            data,
            out,
            alpha,
            sigma2,
        } => {
            let data = load_data(&data)?;
            let basis = BasisFunctionSet::poly_linear(data.np());
            let hyper = match (alpha, sigma2) {
                (Some(a), Some(s)) => Some(BayesHyper::new(a, s)?),
                _ => None,
            };
            let est = estimate_table_fir(&data, &basis, nh, hyper)?;
            eprintln!("alpha = {:e}, sigma2 = {:e}", est.hyper.alpha, est.hyper.sigma2);
            est.table.save(&out)?;
        }
    }
    Ok(())
}

fn realize_cmd(a: RealizeArgs) -> Result<()> {
    let table = SubMarkovTable::load(&a.table)?;
    let basis = BasisFunctionSet::poly_linear(table.npsi);
    let selection = if a.selection == "greedy" {
        let nx_guess = match (a.nx_guess, a.order) {
            (Some(n), _) | (None, Order::Fixed(n)) => n,
            (None, Order::Auto) => bail!("greedy selection with --order auto needs --nx-guess"),
        };
        greedy_selection(&table, nx_guess, a.no, a.nr, a.max_depth)?
    } else {
        SelectionBasis::load(&a.selection)?
    };
    if let Some(p) = &a.selection_out {
        selection.save(p)?;
    }
    let (model, sv) = realize_table(&table, &selection, &basis, a.order, a.tol)?;
    let shown: Vec<String> = sv.iter().take(12).map(|s| format!("{s:.4e}")).collect();
    eprintln!("order {}; singular values {}", model.nx(), shown.join(" "));
    model.save(&a.out)?;
    Ok(())
}

fn refine_cmd(r: RefineCmd) -> Result<()> {
    match r {
        RefineCmd::Em {
            model,
            data,
            max_iter,
            out,
            trace,
        } => {
            let data = load_data(&data)?;
            let start = em_initial_model(&load_model(&model)?, &data)?;
            let config = EmConfig {
                max_iter,
                ..Default::default()
            };
            let res = em_refine(&start, &data, &config)?;
            eprintln!(
                "EM: {} iterations, converged {}, decreased {}",
                res.iterations, res.converged, res.decreased
            );
            res.model.save(&out)?;
            if let Some(t) = trace {
                write_trace(&t, "log_likelihood", &res.trace)?;
            }
        }
        RefineCmd::Gb {
            model,
            data,
            config,
            out,
            trace,
        } => {
            let data = load_data(&data)?;
            let config: GbConfig = match config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => GbConfig::default(),
            };
            let res = gb_refine(&load_model(&model)?, &data, &config)?;
            eprintln!(
                "GB: {} iterations, converged {}, stalled {}",
                res.iterations, res.converged, res.stalled
            );
            res.model.save(&out)?;
            if let Some(t) = trace {
                write_trace(&t, "cost", &res.cost_trace)?;
            }
        }
    }
    Ok(())
}

fn bfr_cmd(a: BfrArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let value = match a.mode {
        BfrMode::Sim => {
            let sim = simulate(&model.noise_free(), &data.u, &data.p, &DVector::zeros(model.nx()), 0)?;
            let reference: &DMatrix<f64> = data.yd.as_ref().unwrap_or(&data.y);
            bfr(reference, &sim.y)?
        }
        BfrMode::Pred => {
            let reference = match &a.oracle {
                Some(p) => one_step_predict(&load_model(p)?, &data)?,
                None => data.y.clone(),
            };
            bfr(&reference, &one_step_predict(&model, &data)?)?
        }
    };
    println!("{value:.4}");
    Ok(())
}

fn montecarlo_cmd(a: MonteCarloArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut spec = ExperimentSpec::from_json(&text)?;
    if let Some(r) = a.runs {
        spec.runs = r;
    }
    let out = a.out.or_else(|| spec.output_dir.as_ref().map(PathBuf::from));
    let res = run_montecarlo(&spec)?;
    print!("{}", res.summary_text());
    if let Some(dir) = out {
        res.write_outputs(&dir)?;
        if spec.save_traces {
            res.write_traces(&dir)?;
        }
    }
    Ok(())
}
