//! `vicsearch`: run discoveries, baselines, single fits, evaluations and
//! reports from the command line.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 run aborted,
//! 4 corrupt run logs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use vicsearch_core::dataset::Dataset;
use vicsearch_core::evaluator::{evaluate_view, ModelFamily, PredictiveView};
use vicsearch_core::fitting::{fit, derive_seed};
use vicsearch_core::kernel::{param_schema, parse};
use vicsearch_core::scoring::{bic, vic};
use vicsearch_core::search::{
    build_client, build_evaluator, load_dataset, load_prompts, run_configured, write_report, Mode, ProposerKind,
    RunConfig, RunError,
};
use vicsearch_core::symreg::{fit_function, parse_function, run_sr_configured, sr_objective_xy, FunctionView};

const EXIT_CONFIG: u8 = 2;
const EXIT_ABORT: u8 = 3;
const EXIT_CORRUPT: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "vicsearch", version, about = "Kernel and function discovery with visual scoring")]
struct Cli {
    /// Log progress at info level (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the discovery loop (GP kernels by default, functions with --mode sr).
    Discover(RunArgs),
    /// Symbolic-regression discovery; same as `discover --mode sr`.
    Sr(RunArgs),
    /// Greedy grammar search scored by BIC alone with top-1 references.
    Baseline(RunArgs),
    /// Fit one kernel (or function with --mode sr) and print its parameters.
    Fit(ModelArgs),
    /// Fit one kernel (or function) and print its evaluator scores.
    Evaluate(ModelArgs),
    /// Regenerate report.md and the MSE plot of a finished run from its logs.
    Report {
        /// Run directory holding config.json and rounds/.
        #[arg(long = "out", value_name = "DIR")]
        out: PathBuf,
    },
}

/// Options shared by every run; flags win over the config file.
#[derive(Debug, Args, Clone, Default)]
struct Overrides {
    /// JSON config file (see docs/config.md).
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV data file with a header and columns x, y.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long = "top-k")]
    top_k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long, value_parser = ["agent", "greedy", "scripted"])]
    proposer: Option<String>,
    #[arg(long, value_parser = ["vlm", "heuristic"])]
    evaluator: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Recency penalty per round of age in selection.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_parser = ["gp", "sr"])]
    mode: Option<String>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Run directory; defaults to out/<data-stem>-<mode>-seed<seed>.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Kernel text (GP mode) or function template (SR mode).
    #[arg(long)]
    model: String,
    /// Directory for evaluation plots.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let code = match &e {
            RunError::Config(_) | RunError::Dataset(_) => EXIT_CONFIG,
            RunError::CorruptLog { .. } => EXIT_CORRUPT,
            _ => EXIT_ABORT,
        };
        Self { code, message: e.to_string() }
    }
}

fn enum_value<T: serde::de::DeserializeOwned>(name: &str) -> Result<T, Failure> {
    serde_json::from_value(json!(name)).map_err(|e| Failure::config(format!("{name}: {e}")))
}

/// Config file (or defaults) with flag overrides applied, validated.
fn effective_config(o: &Overrides) -> Result<RunConfig, Failure> {
    let mut c = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &o.data {
        c.data = Some(v.clone());
    }
    if let Some(v) = o.rounds {
        c.rounds = Some(v);
    }
    if let Some(v) = o.top_k {
        c.top_k = v;
    }
    if let Some(v) = o.alpha {
        c.alpha = Some(v);
    }
    if let Some(v) = o.restarts {
        c.n_restarts = Some(v);
    }
    if let Some(v) = &o.proposer {
        c.proposer = enum_value(v)?;
    }
    if let Some(v) = &o.evaluator {
        c.evaluator = enum_value(v)?;
    }
    if let Some(v) = o.seed {
        c.seed = v;
    }
    if let Some(v) = o.gamma {
        c.recency_gamma = v;
    }
    if let Some(v) = &o.mode {
        c.mode = enum_value(v)?;
    }
    Ok(c)
}

fn default_out(c: &RunConfig) -> PathBuf {
    let stem = c
        .data
        .as_deref()
        .and_then(|d| Path::new(d).file_stem())
        .and_then(|s| s.to_str())
        .unwrap_or("run");
    let mode = if c.mode == Mode::Sr { "sr" } else { "gp" };
    PathBuf::from("out").join(format!("{stem}-{mode}-seed{}", c.seed))
}

fn fmt_rmse(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

fn run(config: RunConfig, out: Option<PathBuf>) -> Result<(), Failure> {
    config.validate()?;
    let dataset = load_dataset(&config)?;
    let out = out.unwrap_or_else(|| default_out(&config));
    match config.mode {
        Mode::Gp => {
            let outcome = run_configured(&config, &dataset, &out)?;
            let last = outcome.rmse_series.last();
            println!("best kernel: {}", outcome.best.text());
            println!("VIC: {:.6}  BIC: {:.6}  evaluator total: {:.3}", outcome.score.vic, outcome.score.bic, outcome.score.evaluator_total);
            println!(
                "RMSE (normalized) train: {}  test: {}",
                fmt_rmse(last.and_then(|r| r.train)),
                fmt_rmse(last.and_then(|r| r.test))
            );
        }
        Mode::Sr => {
            let outcome = run_sr_configured(&config, &dataset, &out)?;
            let last = outcome.rmse_series.last();
            println!("best function: {}  [{}]", outcome.best.text(), outcome.best.describe_coefficients());
            println!(
                "combined: {:.6}  NMSE: {:.6e}  complexity: {}  evaluator total: {:.3}",
                outcome.score.combined, outcome.score.nmse, outcome.score.complexity, outcome.score.evaluator_total
            );
            println!(
                "RMSE (normalized) train: {}  test: {}",
                fmt_rmse(last.and_then(|r| r.train)),
                fmt_rmse(last.and_then(|r| r.test))
            );
        }
    }
    println!("artifacts: {}", out.display());
    Ok(())
}

/// Fits the model given on the command line; returns the JSON summary and,
/// for `evaluate`, the evaluator report as well.
fn fit_one(args: &ModelArgs, evaluate: bool) -> Result<serde_json::Value, Failure> {
    let config = effective_config(&args.overrides)?;
    config.validate()?;
    let dataset: Dataset = load_dataset(&config)?;
    let seed = derive_seed(config.seed, 0xF17);
    let restarts = config.effective_restarts();
    let backend = if evaluate {
        let prompts = load_prompts(&config)?;
        let client = if config.evaluator == vicsearch_core::evaluator::EvaluatorKind::Vlm {
            Some(build_client(&config.vlm)?)
        } else {
            None
        };
        Some(build_evaluator(&config, client, &prompts)?)
    } else {
        None
    };
    let plot_dir = args.out.as_deref();
    match config.mode {
        Mode::Gp => {
            let expr = parse(&args.model).map_err(|e| Failure::config(e.to_string()))?;
            let model = fit(&expr, &dataset, restarts, None, seed).map_err(|e| Failure { code: EXIT_ABORT, message: e.to_string() })?;
            let n = dataset.train_idx.len();
            let b = bic(model.train_loglik, param_schema(&expr).n_params(), n);
            let mut out = json!({
                "kernel": model.text(),
                "params": model.describe_params(),
                "train_loglik": model.train_loglik,
                "bic": b,
            });
            if let Some(backend) = backend {
                let view = PredictiveView::from_gp(&model, &dataset, config.grid_points)
                    .map_err(|e| Failure { code: EXIT_ABORT, message: e.to_string() })?;
                let (report, plots) = evaluate_view(&view, ModelFamily::Kernel, &backend, config.eval_repeats, plot_dir, "evaluate")
                    .map_err(|e| Failure { code: EXIT_ABORT, message: e.to_string() })?;
                out["evaluator"] = json!(report);
                out["evaluator_total"] = json!(report.total());
                out["vic"] = json!(vic(b, report.total(), config.effective_alpha()));
                out["plots"] = json!(plots);
            }
            Ok(out)
        }
        Mode::Sr => {
            let expr = parse_function(&args.model).map_err(|e| Failure::config(e.to_string()))?;
            let f = fit_function(&expr, &dataset, restarts, seed).map_err(|e| Failure { code: EXIT_ABORT, message: e.to_string() })?;
            let view = FunctionView::new(&f, &dataset, config.grid_points).map_err(|e| Failure { code: EXIT_ABORT, message: e.to_string() })?;
            let (x, y) = dataset.train_raw();
            let score = sr_objective_xy(&f, &x, &y, &view.view.grid_x, config.lambda_c)
                .map_err(|e| Failure { code: EXIT_ABORT, message: e.to_string() })?;
            let mut out = json!({
                "function": f.text(),
                "coefficients": f.coefficients,
                "rss": f.rss,
                "nmse": score.nmse,
                "complexity": score.complexity,
                "objective": score.objective,
            });
            if let Some(backend) = backend {
                if !view.finite {
                    return Err(Failure { code: EXIT_ABORT, message: "function is not finite on the plotting grid".into() });
                }
                let (report, plots) = evaluate_view(&view.view, ModelFamily::Function, &backend, config.eval_repeats, plot_dir, "evaluate")
                    .map_err(|e| Failure { code: EXIT_ABORT, message: e.to_string() })?;
                let score = score.with_evaluation(report.fitness(), report.generalizability, config.effective_alpha(), 0);
                out["evaluator"] = json!(report);
                out["evaluator_total"] = json!(score.evaluator_total);
                out["combined"] = json!(score.combined);
                out["plots"] = json!(plots);
            }
            Ok(out)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Discover(a) => run(effective_config(&a.overrides)?, a.out),
        Command::Sr(a) => {
            let mut c = effective_config(&a.overrides)?;
            c.mode = Mode::Sr;
            run(c, a.out)
        }
        Command::Baseline(a) => {
            let mut c = effective_config(&a.overrides)?;
            c.proposer = ProposerKind::Greedy;
            c.alpha = Some(0.0);
            c.top_k = 1;
            c.evaluator = vicsearch_core::evaluator::EvaluatorKind::Heuristic;
            run(c, a.out)
        }
        Command::Fit(a) => {
            let v = fit_one(&a, false)?;
            println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
            Ok(())
        }
        Command::Evaluate(a) => {
            let v = fit_one(&a, true)?;
            println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
            Ok(())
        }
        Command::Report { out } => {
            let path = write_report(&out)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
