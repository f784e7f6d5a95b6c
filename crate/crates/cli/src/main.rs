//! `debinet`: selection-then-PLM estimation, classical baselines, the
//! tangent-kernel lab, and the seeded benchmark harness, from the shell.

mod checks;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array1, Array2, Axis};
use serde_json::json;

use debinet_core::bench::{
    self, compare_plms, emit_convergence, run_experiment, ConvergenceReport, ExperimentConfig,
    ExperimentOutput, MetricsRow, NtkOverrides, Scenario, BANDWIDTH_CV_FOLDS, COMPARE_NW_GRID,
    NW_POST_GRID_FACTORS,
};
use debinet_core::debias::{self, confidence_intervals, DebiasMethod, DEFAULT_CI_LEVEL};
use debinet_core::kernel::nw_bandwidth_cv;
use debinet_core::ntk::{concentration_sweep, least_eigenvalue, ntk_empirical, verify_rate_with};
use debinet_core::plm::{
    dml_fit, plm_nn_fit, plm_nw_fit, plm_predict, DmlLearner, NnConfig, PlmEstimate,
    DEFAULT_DML_FOLDS,
};
use debinet_core::selection::{lasso_fit, split_by_indices, DEFAULT_MAX_SWEEPS, DEFAULT_TOL};
use debinet_core::synth::{
    gen_complex_with, gen_table1_with, gen_table2_with, write_csv, PlmDataset,
};
use debinet_core::widenet::{
    forward_batch, init_network, train, Activation, EarlyStop, Loss, Optimizer, TrainConfig,
};
use debinet_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "debinet",
    version,
    about = "Partially-linear-model estimation with network-learned nuisances",
    long_about = "Feature selection followed by partialling-out estimation whose nuisance \
                  functions are learned by an over-parameterized two-layer network, plus \
                  kernel-regression and cross-fitting baselines, debiasing methods with \
                  confidence intervals, a tangent-kernel verification lab, and a seeded \
                  benchmark harness."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Benchmark harness: replicated experiments with CSV/JSON export
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Fit a PLM with a jointly trained wide-network nuisance
    PlmNn(PlmNnArgs),
    /// Fit a PLM with Nadaraya-Watson kernel nuisances
    PlmNw(PlmNwArgs),
    /// Fit a PLM by cross-fitting (DML1 aggregation)
    Dml(DmlArgs),
    /// Tangent-kernel diagnostics: concentration sweep and rate check
    Ntk(NtkArgs),
    /// Select-then-debias on a sparse design, with confidence intervals
    Debias(DebiasArgs),
    /// Write a synthetic dataset to CSV
    Gen(GenArgs),
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run the experiment described by a JSON config
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Evaluate the scenario's acceptance bounds; nonzero exit on failure
        #[arg(long)]
        check: bool,
    },
    /// Trace full-batch training in the kernel regime (ntk_figure scenario)
    Convergence {
        /// JSON config; flags below are ignored when present
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 5000)]
        width: usize,
        #[arg(long, default_value_t = 2000)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Path prefix for the trace CSV and summary JSON
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        check: bool,
    },
    /// Compare PLM-NN, PLM-NW, and cross-fitted Lasso on shared data
    ComparePlms {
        /// JSON config; flags below are ignored when present
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = CompareScenario::Table1)]
        scenario: CompareScenario,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Path prefix for the metrics CSV and summary JSON
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        check: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CompareScenario {
    Table1,
    Table4,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlmSource {
    Table1,
    Table4,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Gd,
    Sgd,
    Adam,
}

#[derive(Clone, Copy, ValueEnum)]
enum DmlLearnerArg {
    Lasso,
    Nw,
    Mean,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Debinet,
    OlsPost,
    DebiasedLasso,
    NwPost,
}

impl From<MethodArg> for DebiasMethod {
    fn from(value: MethodArg) -> Self {
        match value {
            MethodArg::Debinet => DebiasMethod::Debinet,
            MethodArg::OlsPost => DebiasMethod::OlsPost,
            MethodArg::DebiasedLasso => DebiasMethod::DebiasedLasso,
            MethodArg::NwPost => DebiasMethod::NwPost,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GenRegime {
    Table1,
    Table2,
    Table4,
}

/// Where the (D, Z, y) triple comes from: a seeded generator or a headed
/// CSV whose treatment/response columns are picked by name.
#[derive(Args)]
struct DataArgs {
    /// Synthetic generator
    #[arg(long, value_enum, conflicts_with_all = ["data", "d_cols", "y_col"])]
    scenario: Option<PlmSource>,
    /// Rows drawn from the generator
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Base seed (data stream; derived streams offset from it)
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV with named columns
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated treatment column names in the CSV
    #[arg(long, value_delimiter = ',')]
    d_cols: Vec<String>,
    /// Response column name in the CSV
    #[arg(long, default_value = "y")]
    y_col: String,
}

impl DataArgs {
    fn load(&self) -> Result<data::PlmData> {
        match (&self.scenario, &self.data) {
            (Some(src), None) => {
                let ds = match src {
                    PlmSource::Table1 => gen_table1_with(self.n, self.seed, 1.0)?,
                    PlmSource::Table4 => gen_complex_with(self.n, self.seed, 1.0)?,
                };
                Ok(data::PlmData {
                    d: ds.d,
                    z: ds.z,
                    y: ds.y,
                })
            }
            (None, Some(path)) => data::load_plm_csv(path, &self.d_cols, &self.y_col),
            (None, None) => Err(Error::Config(
                "provide a data source: --scenario or --data".into(),
            )),
            (Some(_), Some(_)) => unreachable!("clap enforces the conflict"),
        }
    }
}

#[derive(Args)]
struct PlmNnArgs {
    #[command(flatten)]
    source: DataArgs,
    #[arg(long, default_value_t = 2048)]
    width: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
    optimizer: OptimizerArg,
    /// Minibatch size for the sgd optimizer
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Train to max epochs instead of validation-based stopping
    #[arg(long)]
    no_early_stop: bool,
    /// Network seed; defaults to the data seed plus 777
    #[arg(long)]
    nn_seed: Option<u64>,
    /// Path prefix for `<out>_estimate.json` and `<out>_residuals.csv`
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlmNwArgs {
    #[command(flatten)]
    source: DataArgs,
    /// Response bandwidth; cross-validated over --grid when omitted
    #[arg(long)]
    h_y: Option<f64>,
    /// Treatment bandwidth; cross-validated over --grid when omitted
    #[arg(long)]
    h_d: Option<f64>,
    /// Comma-separated bandwidth grid for cross-validation
    #[arg(long, value_delimiter = ',', default_values_t = COMPARE_NW_GRID)]
    grid: Vec<f64>,
    #[arg(long, default_value_t = BANDWIDTH_CV_FOLDS)]
    folds: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DmlArgs {
    #[command(flatten)]
    source: DataArgs,
    #[arg(long, default_value_t = DEFAULT_DML_FOLDS)]
    folds: usize,
    #[arg(long, value_enum, default_value_t = DmlLearnerArg::Lasso)]
    learner: DmlLearnerArg,
    /// Response bandwidth for the nw learner
    #[arg(long)]
    h_y: Option<f64>,
    /// Treatment bandwidth for the nw learner
    #[arg(long)]
    h_d: Option<f64>,
    /// Fold-assignment seed; defaults to the data seed
    #[arg(long)]
    dml_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NtkArgs {
    /// Inputs: controls of the table1 generator, rows unit-normalized
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Widths for the concentration sweep, strictly increasing
    #[arg(long, value_delimiter = ',', default_values_t = [256usize, 1024, 4096])]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    seeds_per_width: usize,
    /// Treatment outputs assumed by the kernel blocks
    #[arg(long, default_value_t = 1)]
    p_l: usize,
    /// Epochs for the rate check; 0 skips it
    #[arg(long, default_value_t = 0)]
    epochs: usize,
    /// Width used by the rate check
    #[arg(long, default_value_t = 2048)]
    rate_width: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Rate discount in the decay bound
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    /// Multiplicative slack in the decay bound
    #[arg(long, default_value_t = 1.5)]
    slack: f64,
    /// Path prefix for `<out>_sweep.csv` (and `<out>_rate.json`)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DebiasArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Rows of the sparse-regression generator
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Features of the sparse-regression generator
    #[arg(long, default_value_t = 1000)]
    p: usize,
    /// Nonzero coefficients of the sparse-regression generator
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent replicates (generator data only)
    #[arg(long, default_value_t = 1)]
    replicates: usize,
    /// Fit a CSV design instead of generated data
    #[arg(long, conflicts_with_all = ["n", "p", "k", "replicates"])]
    data: Option<PathBuf>,
    /// Response column name in the CSV
    #[arg(long, default_value = "y")]
    y_col: String,
    /// Absolute selection penalty
    #[arg(long, group = "penalty")]
    lambda: Option<f64>,
    /// Penalty as a fraction of max_j |X_j'y| (default 0.05)
    #[arg(long, group = "penalty")]
    lambda_frac: Option<f64>,
    /// Penalty per training row
    #[arg(long, group = "penalty")]
    lambda_per_sample: Option<f64>,
    /// Network width (debinet)
    #[arg(long, default_value_t = 1000)]
    width: usize,
    /// Network learning rate (debinet, Adam)
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    /// Network epoch cap (debinet)
    #[arg(long, default_value_t = 400)]
    epochs: usize,
    /// Response bandwidth (nw-post); cross-validated when omitted
    #[arg(long)]
    h_y: Option<f64>,
    /// Treatment bandwidth (nw-post); cross-validated when omitted
    #[arg(long)]
    h_d: Option<f64>,
    /// Nodewise penalty (debiased-lasso); defaults to sqrt(2 ln p / n)
    #[arg(long)]
    lambda_node: Option<f64>,
    /// Path prefix for `<out>_replicates.json` and `<out>_metrics.csv`
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    regime: GenRegime,
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Features (table2 regime)
    #[arg(long, default_value_t = 1000)]
    p: usize,
    /// Nonzero coefficients (table2 regime)
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Additive noise standard deviation; 0 disables noise
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    if let Ok(raw) = std::env::var("DEBINET_WORKERS") {
        match raw.parse::<usize>() {
            Ok(0) | Err(_) => eprintln!("ignoring invalid DEBINET_WORKERS={raw:?}"),
            Ok(1) => {}
            Ok(w) => eprintln!(
                "DEBINET_WORKERS={w} requested; this build runs replicates sequentially"
            ),
        }
    }
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Bench(cmd) => run_bench(cmd),
        Command::PlmNn(args) => cmd_plm_nn(args),
        Command::PlmNw(args) => cmd_plm_nw(args),
        Command::Dml(args) => cmd_dml(args),
        Command::Ntk(args) => cmd_ntk(args),
        Command::Debias(args) => cmd_debias(args),
        Command::Gen(args) => cmd_gen(args),
    }
}

fn run_bench(cmd: BenchCommand) -> Result<ExitCode> {
    match cmd {
        BenchCommand::Run { config, check } => {
            let cfg = ExperimentConfig::from_json_file(&config)?;
            match cfg.scenario {
                Scenario::NtkFigure => {
                    let report = emit_convergence(&cfg)?;
                    print_convergence(&report);
                    finish_checks(check, checks::convergence_checks(&report))
                }
                Scenario::Table1 | Scenario::Table4 => {
                    let out = compare_plms(&cfg)?;
                    print_summary(&out);
                    finish_checks(check, checks::experiment_checks(&out))
                }
                _ => {
                    let out = run_experiment(&cfg)?;
                    print_summary(&out);
                    finish_checks(check, checks::experiment_checks(&out))
                }
            }
        }
        BenchCommand::Convergence {
            config,
            n,
            width,
            epochs,
            lr,
            seed,
            out,
            check,
        } => {
            let cfg = match config {
                Some(path) => ExperimentConfig::from_json_file(&path)?,
                None => {
                    let mut cfg = ExperimentConfig::new(Scenario::NtkFigure);
                    cfg.scale.n = Some(n);
                    cfg.ntk = NtkOverrides {
                        width: Some(width),
                        epochs: Some(epochs),
                        learning_rate: Some(lr),
                    };
                    cfg.seed = seed;
                    cfg.output = out;
                    cfg
                }
            };
            let report = emit_convergence(&cfg)?;
            print_convergence(&report);
            finish_checks(check, checks::convergence_checks(&report))
        }
        BenchCommand::ComparePlms {
            config,
            scenario,
            n,
            replicates,
            seed,
            out,
            check,
        } => {
            let cfg = match config {
                Some(path) => ExperimentConfig::from_json_file(&path)?,
                None => {
                    let mut cfg = ExperimentConfig::new(match scenario {
                        CompareScenario::Table1 => Scenario::Table1,
                        CompareScenario::Table4 => Scenario::Table4,
                    });
                    cfg.scale.n = Some(n);
                    cfg.replicates = replicates;
                    cfg.seed = seed;
                    cfg.output = out;
                    cfg
                }
            };
            let out = compare_plms(&cfg)?;
            print_summary(&out);
            finish_checks(check, checks::experiment_checks(&out))
        }
    }
}

fn finish_checks(check: bool, lines: Vec<checks::CheckLine>) -> Result<ExitCode> {
    if !check {
        return Ok(ExitCode::SUCCESS);
    }
    if checks::print_checks(&lines) {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::FAILURE)
    }
}

fn print_summary(out: &ExperimentOutput) {
    println!(
        "scenario {}  seed {}  replicates {}",
        out.scenario, out.seed, out.replicates
    );
    println!(
        "{:<16} {:>3} {:>4} {:>13} {:>13} {:>13} {:>9} {:>8}",
        "method", "ok", "fail", "est mse", "train mse", "test mse", "coverage", "sec"
    );
    for s in &out.summary {
        let coverage = s
            .coverage
            .map(|c| format!("{c:.3}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<16} {:>3} {:>4} {:>13.6} {:>13.6} {:>13.6} {:>9} {:>8.2}",
            s.method,
            s.replicates_ok,
            s.failures,
            s.mean_estimation_mse,
            s.mean_train_mse,
            s.mean_test_mse,
            coverage,
            s.mean_seconds
        );
    }
    for row in out.rows.iter().filter(|r| r.error.is_some()) {
        println!(
            "  replicate {} {}: {}",
            row.replicate,
            row.method,
            row.error.as_deref().unwrap_or("")
        );
    }
}

fn print_convergence(report: &ConvergenceReport) {
    println!(
        "n {}  width {}  lr {}  epochs {}",
        report.n, report.width, report.learning_rate, report.epochs_run
    );
    println!(
        "lambda0 empirical {:.6}  closed form {:.6}",
        report.lambda0_emp, report.lambda0_inf
    );
    let first = report.rows.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let last = report.rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!("loss {first:.6e} -> {last:.6e}");
    println!(
        "fitted slope {:.6e}  ratio to -lambda0*lr {:.4}  bound violations {}",
        report.rate.fitted_slope, report.rate.slope_ratio, report.rate.violations
    );
}

fn standard_errors(cov: &Array2<f64>) -> Vec<f64> {
    (0..cov.nrows()).map(|j| cov[[j, j]].max(0.0).sqrt()).collect()
}

fn estimate_doc(method: &str, est: &PlmEstimate, extra: serde_json::Value) -> Result<serde_json::Value> {
    let (lo, hi) = confidence_intervals(&est.beta_hat, &est.cov_beta, DEFAULT_CI_LEVEL)?;
    let mut doc = json!({
        "method": method,
        "beta_hat": est.beta_hat.to_vec(),
        "std_errors": standard_errors(&est.cov_beta),
        "ci_low": lo.to_vec(),
        "ci_high": hi.to_vec(),
        "level": DEFAULT_CI_LEVEL,
        "sigma2_hat": est.sigma2_hat,
    });
    if let (Some(map), Some(more)) = (doc.as_object_mut(), extra.as_object()) {
        for (key, value) in more {
            map.insert(key.clone(), value.clone());
        }
    }
    Ok(doc)
}

fn emit_estimate(doc: &serde_json::Value, est: &PlmEstimate, out: &Option<PathBuf>) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(doc)?);
    if let Some(prefix) = out {
        let json_path = PathBuf::from(format!("{}_estimate.json", prefix.display()));
        std::fs::write(&json_path, serde_json::to_string_pretty(doc)?)?;
        let resid_path = PathBuf::from(format!("{}_residuals.csv", prefix.display()));
        data::write_residuals_csv(&est.x_resid, &est.y_resid, &resid_path)?;
        eprintln!(
            "wrote {} and {}",
            json_path.display(),
            resid_path.display()
        );
    }
    Ok(())
}

fn cmd_plm_nn(args: PlmNnArgs) -> Result<ExitCode> {
    let plm = args.source.load()?;
    let nn_seed = args.nn_seed.unwrap_or(args.source.seed.wrapping_add(777));
    let optimizer = match args.optimizer {
        OptimizerArg::Gd => Optimizer::Gd,
        OptimizerArg::Sgd => Optimizer::Sgd { batch: args.batch },
        OptimizerArg::Adam => Optimizer::adam_default(),
    };
    let cfg = NnConfig {
        width: args.width,
        activation: Activation::Relu,
        train: TrainConfig {
            optimizer,
            learning_rate: args.lr,
            max_epochs: args.epochs,
            loss: Loss::Mse,
            early_stop: if args.no_early_stop {
                None
            } else {
                Some(EarlyStop::default())
            },
            freeze_second_layer: false,
            seed: nn_seed,
        },
    };
    let est = plm_nn_fit(&plm.d, &plm.z, &plm.y, &cfg)?;
    let doc = estimate_doc(
        "plm_nn",
        &est,
        json!({ "width": args.width, "epochs": args.epochs, "nn_seed": nn_seed }),
    )?;
    emit_estimate(&doc, &est, &args.out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_plm_nw(args: PlmNwArgs) -> Result<ExitCode> {
    let plm = args.source.load()?;
    let h_y = match args.h_y {
        Some(h) => h,
        None => {
            let y_2d = plm.y.view().insert_axis(Axis(1)).to_owned();
            nw_bandwidth_cv(&plm.z, &y_2d, &args.grid, args.folds)?
        }
    };
    let h_d = match args.h_d {
        Some(h) => h,
        None => nw_bandwidth_cv(&plm.z, &plm.d, &args.grid, args.folds)?,
    };
    let est = plm_nw_fit(&plm.d, &plm.z, &plm.y, h_y, h_d)?;
    let doc = estimate_doc("plm_nw", &est, json!({ "h_y": h_y, "h_d": h_d }))?;
    emit_estimate(&doc, &est, &args.out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_dml(args: DmlArgs) -> Result<ExitCode> {
    let plm = args.source.load()?;
    let learner = match args.learner {
        DmlLearnerArg::Lasso => DmlLearner::Lasso,
        DmlLearnerArg::Mean => DmlLearner::Mean,
        DmlLearnerArg::Nw => {
            let (h_y, h_d) = match (args.h_y, args.h_d) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::Config(
                        "the nw learner needs --h-y and --h-d".into(),
                    ))
                }
            };
            DmlLearner::Nw { h_y, h_d }
        }
    };
    let dml_seed = args.dml_seed.unwrap_or(args.source.seed);
    let est = dml_fit(&plm.d, &plm.z, &plm.y, &learner, args.folds, dml_seed)?;
    let doc = estimate_doc(
        "dml",
        &est,
        json!({ "folds": args.folds, "dml_seed": dml_seed }),
    )?;
    emit_estimate(&doc, &est, &args.out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_ntk(args: NtkArgs) -> Result<ExitCode> {
    let ds = gen_table1_with(args.n, args.seed, 1.0)?;
    let mut z = ds.z;
    for mut row in z.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }

    let sweep = concentration_sweep(&z, args.p_l, &args.widths, args.seeds_per_width, args.seed)?;
    println!(
        "{:>6} {:>14} {:>14} {:>14}",
        "width", "frob gap", "offdiag norm", "lambda0"
    );
    for row in &sweep {
        println!(
            "{:>6} {:>14.6} {:>14.6} {:>14.6}",
            row.width, row.mean_frob_gap, row.mean_offdiag_norm, row.mean_lambda0_emp
        );
    }
    if let Some(prefix) = &args.out {
        let path = PathBuf::from(format!("{}_sweep.csv", prefix.display()));
        let mut writer = csv::Writer::from_path(&path)?;
        writer.write_record(["width", "mean_frob_gap", "mean_offdiag_norm", "mean_lambda0_emp"])?;
        for row in &sweep {
            writer.write_record([
                row.width.to_string(),
                row.mean_frob_gap.to_string(),
                row.mean_offdiag_norm.to_string(),
                row.mean_lambda0_emp.to_string(),
            ])?;
        }
        writer.flush()?;
        eprintln!("wrote {}", path.display());
    }

    if args.epochs > 0 {
        let mut m_targets = Array2::zeros((args.n, 1 + ds.d.ncols()));
        m_targets.column_mut(0).assign(&ds.y);
        for (t, col) in ds.d.columns().into_iter().enumerate() {
            m_targets.column_mut(1 + t).assign(&col);
        }
        let net0 = init_network(
            z.ncols(),
            args.rate_width,
            ds.d.ncols(),
            Activation::Relu,
            args.seed,
        )?;
        let lambda0 = least_eigenvalue(&ntk_empirical(&net0, &z)?)?;
        let train_cfg = TrainConfig {
            optimizer: Optimizer::Gd,
            learning_rate: args.lr,
            max_epochs: args.epochs,
            loss: Loss::Mse,
            early_stop: None,
            freeze_second_layer: true,
            seed: args.seed,
        };
        let (_, trace) = train(&net0, &z, &m_targets, &train_cfg)?;
        let resid0: Vec<f64> = (&m_targets - &forward_batch(&net0, &z)?)
            .iter()
            .copied()
            .collect();
        let report = verify_rate_with(&trace, lambda0, args.lr, &resid0, args.rho, args.slack);
        println!(
            "rate check: width {}  lambda0 {:.6}  slope {:.6e}  ratio {:.4}  violations {}  {}",
            args.rate_width,
            lambda0,
            report.fitted_slope,
            report.slope_ratio,
            report.violations,
            if report.passed { "pass" } else { "FAIL" }
        );
        if let Some(prefix) = &args.out {
            let path = PathBuf::from(format!("{}_rate.json", prefix.display()));
            std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            eprintln!("wrote {}", path.display());
        }
        if !report.passed {
            return Ok(ExitCode::FAILURE);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_debias(args: DebiasArgs) -> Result<ExitCode> {
    let method: DebiasMethod = args.method.into();
    let from_csv = args.data.is_some();
    if from_csv && args.replicates != 1 {
        return Err(Error::Config(
            "replicates require generated data; a CSV design is fixed".into(),
        ));
    }

    let mut docs = Vec::new();
    let mut rows: Vec<MetricsRow> = Vec::new();
    for rep in 0..args.replicates {
        let (x, y, truth): (Array2<f64>, Array1<f64>, Option<Array1<f64>>) = match &args.data {
            Some(path) => {
                let ds = debinet_core::synth::load_csv(path, &args.y_col)?;
                (ds.x, ds.y, None)
            }
            None => {
                let ds = gen_table2_with(args.n, args.p, args.k, args.seed + rep as u64, 1.0)?;
                (ds.x, ds.y, ds.beta_true)
            }
        };
        let started = Instant::now();
        let outcome = run_debias_once(&args, method, &x, &y);
        let seconds = started.elapsed().as_secs_f64();
        match outcome {
            Ok((result, pred)) => {
                let truth_s: Option<Array1<f64>> = truth.as_ref().map(|t| {
                    result.active_set.iter().map(|&j| t[j]).collect()
                });
                let estimation_mse = truth_s
                    .as_ref()
                    .map(|t| (&result.beta_hat - t).mapv(|v| v * v).mean().unwrap_or(f64::NAN));
                let coverage = truth_s.as_ref().map(|t| {
                    let hits = t
                        .iter()
                        .enumerate()
                        .filter(|(j, &v)| result.ci_low[*j] <= v && v <= result.ci_high[*j])
                        .count();
                    hits as f64 / t.len().max(1) as f64
                });
                let train_mse = (&pred - &y).mapv(|v| v * v).mean().unwrap_or(f64::NAN);
                docs.push(json!({
                    "replicate": rep,
                    "method": result.method.to_string(),
                    "seconds": seconds,
                    "beta_hat": result.beta_hat.to_vec(),
                    "ci_low": result.ci_low.to_vec(),
                    "ci_high": result.ci_high.to_vec(),
                    "active_set": result.active_set,
                    "estimation_mse": estimation_mse,
                    "coverage": coverage,
                }));
                rows.push(MetricsRow {
                    method: result.method.to_string(),
                    estimation_mse: estimation_mse.unwrap_or(f64::NAN),
                    train_mse,
                    test_mse: f64::NAN,
                    coverage,
                    seconds,
                    replicate: rep,
                    error: None,
                });
            }
            Err(e) => {
                let msg = e.to_string();
                eprintln!("replicate {rep}: {msg}");
                docs.push(json!({ "replicate": rep, "method": method.to_string(), "error": msg }));
                rows.push(MetricsRow {
                    method: method.to_string(),
                    estimation_mse: f64::NAN,
                    train_mse: f64::NAN,
                    test_mse: f64::NAN,
                    coverage: None,
                    seconds,
                    replicate: rep,
                    error: Some(msg),
                });
            }
        }
    }

    let ok: Vec<&MetricsRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    println!(
        "{}: {} of {} replicates succeeded",
        method,
        ok.len(),
        rows.len()
    );
    if !ok.is_empty() && !from_csv {
        let mean_est =
            ok.iter().map(|r| r.estimation_mse).sum::<f64>() / ok.len() as f64;
        let mean_cov = ok.iter().filter_map(|r| r.coverage).sum::<f64>() / ok.len() as f64;
        println!("mean estimation mse {mean_est:.6}  mean coverage {mean_cov:.4}");
    }
    if args.out.is_none() {
        println!("{}", serde_json::to_string_pretty(&docs)?);
    }
    if let Some(prefix) = &args.out {
        let json_path = PathBuf::from(format!("{}_replicates.json", prefix.display()));
        std::fs::write(&json_path, serde_json::to_string_pretty(&docs)?)?;
        let csv_path = PathBuf::from(format!("{}_metrics.csv", prefix.display()));
        bench::write_metrics_csv(&rows, &csv_path)?;
        eprintln!("wrote {} and {}", json_path.display(), csv_path.display());
    }
    if ok.is_empty() {
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

/// One select-then-debias fit; returns the result and in-sample predictions.
fn run_debias_once(
    args: &DebiasArgs,
    method: DebiasMethod,
    x: &Array2<f64>,
    y: &Array1<f64>,
) -> Result<(debias::DebiasResult, Array1<f64>)> {
    let n = x.nrows();
    let p = x.ncols();
    let lambda = if let Some(lam) = args.lambda {
        lam
    } else if let Some(c) = args.lambda_per_sample {
        c * n as f64
    } else {
        let frac = args.lambda_frac.unwrap_or(0.05);
        let lam_max = (0..p)
            .map(|j| x.column(j).dot(y).abs())
            .fold(0.0f64, f64::max);
        frac * lam_max
    };
    let fit = lasso_fit(x, y, lambda, DEFAULT_TOL, DEFAULT_MAX_SWEEPS)?;
    let s = fit.active_set.clone();

    match method {
        DebiasMethod::Debinet => {
            let picked = s.clone();
            let selector = move |_: &Array2<f64>, _: &Array1<f64>| Ok(picked.clone());
            let nn_cfg = NnConfig {
                width: args.width,
                activation: Activation::Relu,
                train: TrainConfig {
                    optimizer: Optimizer::adam_default(),
                    learning_rate: args.lr,
                    max_epochs: args.epochs,
                    loss: Loss::Mse,
                    early_stop: Some(EarlyStop::default()),
                    freeze_second_layer: false,
                    seed: args.seed.wrapping_add(777),
                },
            };
            let (result, est) = debias::debinet_fit_full(x, y, &selector, &nn_cfg)?;
            let split = split_by_indices(x, &s)?;
            let pred = plm_predict(&est, &split.d, &split.z)?;
            Ok((result, pred))
        }
        DebiasMethod::OlsPost => {
            let result = debias::ols_post(x, y, &s)?;
            let pred = x.dot(&result.theta_full);
            Ok((result, pred))
        }
        DebiasMethod::NwPost => {
            let split = split_by_indices(x, &s)?;
            let (h_y, h_d) = match (args.h_y, args.h_d) {
                (Some(a), Some(b)) => (a, b),
                _ if split.p_n == 0 => (1.0, 1.0),
                (a, b) => {
                    let scale = (split.p_n as f64).sqrt();
                    let grid: Vec<f64> =
                        NW_POST_GRID_FACTORS.iter().map(|f| f * scale).collect();
                    let y_2d = y.view().insert_axis(Axis(1)).to_owned();
                    let h_y = match a {
                        Some(v) => v,
                        None => nw_bandwidth_cv(&split.z, &y_2d, &grid, BANDWIDTH_CV_FOLDS)?,
                    };
                    let h_d = match b {
                        Some(v) => v,
                        None => nw_bandwidth_cv(&split.z, &split.d, &grid, BANDWIDTH_CV_FOLDS)?,
                    };
                    (h_y, h_d)
                }
            };
            let (result, est) = debias::nw_post_full(x, y, &s, h_y, h_d)?;
            let pred = plm_predict(&est, &split.d, &split.z)?;
            Ok((result, pred))
        }
        DebiasMethod::DebiasedLasso => {
            let lambda_node = args
                .lambda_node
                .unwrap_or_else(|| debias::default_nodewise_lambda(n, p));
            let result = debias::debiased_lasso(x, y, &fit, lambda_node)?;
            let pred = x.dot(&result.theta_full);
            Ok((result, pred))
        }
    }
}

fn cmd_gen(args: GenArgs) -> Result<ExitCode> {
    match args.regime {
        GenRegime::Table2 => {
            let ds = gen_table2_with(args.n, args.p, args.k, args.seed, args.noise_sd)?;
            write_csv(&ds, &args.out)?;
            println!(
                "wrote {} rows x {} features (+ y) to {}",
                ds.x.nrows(),
                ds.x.ncols(),
                args.out.display()
            );
        }
        GenRegime::Table1 | GenRegime::Table4 => {
            let ds: PlmDataset = match args.regime {
                GenRegime::Table1 => gen_table1_with(args.n, args.seed, args.noise_sd)?,
                _ => gen_complex_with(args.n, args.seed, args.noise_sd)?,
            };
            data::write_plm_csv(&ds, &args.out)?;
            println!(
                "wrote {} rows ({} treatment, {} control columns + y) to {}",
                ds.y.len(),
                ds.d.ncols(),
                ds.z.ncols(),
                args.out.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}
