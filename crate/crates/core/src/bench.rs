//! Seeded benchmark harness: scenario presets, the replicated
//! selection-then-debias experiment, the low-dimensional PLM comparison,
//! and the kernel-regime convergence trace, with CSV/JSON export.
//!
//! Every run is a pure function of its [`ExperimentConfig`]. Replicate
//! `r` draws data from seed `seed + r`, splits rows 50/50 from seed
//! `seed + 7777 + r`, and hands every method the identical training and
//! test halves, so methods stay comparable row by row. A method failure
//! is recorded in that row's `error` column and the run continues.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::debias::{self, DebiasMethod, DebiasResult};
use crate::error::{Error, Result};
use crate::kernel::nw_bandwidth_cv;
use crate::ntk::{least_eigenvalue, ntk_empirical, ntk_infinite, verify_rate, InfMethod, RateReport};
use crate::plm::{
    dml_fit, plm_nn_fit, plm_nw_fit, plm_predict, DmlLearner, NnConfig, PlmEstimate,
    DEFAULT_DML_FOLDS,
};
use crate::selection::{
    lasso_fit, split_by_indices, LassoFit, SplitDesign, DEFAULT_MAX_SWEEPS, DEFAULT_TOL,
};
use crate::synth::{gen_complex, gen_table1, gen_table2, PlmDataset};
use crate::widenet::{
    forward_batch, init_network, train, Activation, EarlyStop, Loss, Optimizer, TrainConfig,
};

/// Offset separating the row-split seed stream from the data stream.
pub const SPLIT_SEED_OFFSET: u64 = 7777;
/// Offset separating network-init seeds from the data stream in
/// [`run_experiment`].
pub const NN_SEED_OFFSET: u64 = 777;
/// Per-replicate stride for network seeds in [`compare_plms`].
pub const COMPARE_NN_SEED_STRIDE: u64 = 31;
/// Per-replicate stride for cross-fitting seeds in [`compare_plms`].
pub const DML_SEED_STRIDE: u64 = 13;
/// Bandwidth grid for kernel regression over low-dimensional controls.
pub const COMPARE_NW_GRID: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];
/// Bandwidth grid factors for kernel regression over high-dimensional
/// controls; each factor multiplies `sqrt(p_N)`, the scale of pairwise
/// distances between standard normal rows.
pub const NW_POST_GRID_FACTORS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Cross-validation folds for bandwidth selection.
pub const BANDWIDTH_CV_FOLDS: usize = 5;

/// Named experiment family. The three `table2_*` scenarios run the
/// selection-then-debias pipeline at different sparsity/dimension regimes;
/// `table1`/`table4` compare the PLM estimators on low-dimensional designs;
/// `ntk_figure` traces full-batch training in the kernel regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Table1,
    Table2HighLow,
    Table2HighHigh,
    Table2LowHigh,
    Table4,
    NtkFigure,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Scenario::Table1 => "table1",
            Scenario::Table2HighLow => "table2_high_low",
            Scenario::Table2HighHigh => "table2_high_high",
            Scenario::Table2LowHigh => "table2_low_high",
            Scenario::Table4 => "table4",
            Scenario::NtkFigure => "ntk_figure",
        };
        f.write_str(name)
    }
}

/// Optional size overrides; `None` keeps the scenario preset.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ScaleOverrides {
    pub n: Option<usize>,
    pub p: Option<usize>,
    pub k: Option<usize>,
}

/// Knobs read only by the `ntk_figure` scenario.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct NtkOverrides {
    /// Hidden width, default 5000.
    pub width: Option<usize>,
    /// Full-batch epochs, default 2000.
    pub epochs: Option<usize>,
    /// Step size, default 0.01.
    pub learning_rate: Option<f64>,
}

/// A complete, serializable description of one benchmark run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub scale: ScaleOverrides,
    /// Methods to run each replicate; empty means the scenario default.
    #[serde(default)]
    pub methods: Vec<DebiasMethod>,
    /// Base seed; all per-replicate streams derive from it.
    #[serde(default, alias = "seeds")]
    pub seed: u64,
    /// Path prefix: metrics land in `<prefix>_metrics.csv` (or
    /// `<prefix>_convergence.csv`) and aggregates in `<prefix>_summary.json`.
    /// `None` keeps everything in memory.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// When false the seconds column is written as zero, making repeated
    /// runs of the same config byte-identical.
    #[serde(default = "default_true")]
    pub include_timings: bool,
    /// Report coverage as the mean of per-replicate fractions instead of
    /// the default pooled per-coordinate fraction.
    #[serde(default)]
    pub coverage_by_replicate: bool,
    /// Replaces the scenario's network preset; the per-replicate seed
    /// schedule still applies on top of it.
    #[serde(default)]
    pub nn_override: Option<NnConfig>,
    #[serde(default)]
    pub ntk: NtkOverrides,
}

fn default_replicates() -> usize {
    10
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// A config with every field at its default for the given scenario.
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            replicates: default_replicates(),
            scale: ScaleOverrides::default(),
            methods: Vec::new(),
            seed: 0,
            output: None,
            include_timings: true,
            coverage_by_replicate: false,
            nn_override: None,
            ntk: NtkOverrides::default(),
        }
    }

    /// Parse a config from a JSON file.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Config(format!("duplicate method {m}")));
            }
        }
        Ok(())
    }
}

/// One method on one replicate. `error` is set when the method failed,
/// in which case the metric columns are NaN; `seconds` includes the
/// method's share of the replicate's shared selection step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    /// Mean squared error of the active-set coefficients against the
    /// generating ones (against the unit treatment effect for PLM runs).
    pub estimation_mse: f64,
    pub train_mse: f64,
    pub test_mse: f64,
    /// Fraction of active coordinates whose interval covers the truth;
    /// absent for methods that report no intervals here.
    pub coverage: Option<f64>,
    pub seconds: f64,
    pub replicate: usize,
    pub error: Option<String>,
}

/// Per-method aggregate over the successful replicates.
#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub replicates_ok: usize,
    pub failures: usize,
    pub mean_estimation_mse: f64,
    pub std_estimation_mse: f64,
    pub mean_train_mse: f64,
    pub std_train_mse: f64,
    pub mean_test_mse: f64,
    pub std_test_mse: f64,
    /// Pooled over (replicate, coordinate) pairs by default; the mean of
    /// per-replicate fractions when `coverage_by_replicate` is set.
    pub coverage: Option<f64>,
    pub mean_seconds: f64,
}

/// Rows plus aggregates from [`run_experiment`] or [`compare_plms`].
/// Serializing yields the summary document; the rows travel in the CSV.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentOutput {
    pub scenario: Scenario,
    pub replicates: usize,
    pub seed: u64,
    #[serde(skip)]
    pub rows: Vec<MetricsRow>,
    pub summary: Vec<MethodSummary>,
}

/// How a scenario sets its selection penalty.
#[derive(Debug, Clone, Copy)]
enum SelectionRule {
    /// `lambda = c * n_train` on this crate's unnormalized objective,
    /// i.e. a fixed per-sample penalty.
    PerSample(f64),
    /// `lambda = f * max_j |X_j'y|`, a fraction of the smallest penalty
    /// that zeroes every coordinate.
    FracMax(f64),
}

struct Table2Preset {
    n: usize,
    p: usize,
    k: usize,
    selection: SelectionRule,
    nn_width: usize,
    nn_lr: f64,
    nn_epochs: usize,
    methods: Vec<DebiasMethod>,
}

fn table2_preset(scenario: Scenario) -> Result<Table2Preset> {
    match scenario {
        // Sparse signal in high dimension: selection recovers the signal
        // and the active-set methods agree; kernel post-processing keeps up.
        Scenario::Table2HighLow => Ok(Table2Preset {
            n: 500,
            p: 1000,
            k: 10,
            selection: SelectionRule::PerSample(0.48),
            nn_width: 256,
            nn_lr: 1e-3,
            nn_epochs: 200,
            methods: vec![
                DebiasMethod::Debinet,
                DebiasMethod::OlsPost,
                DebiasMethod::NwPost,
            ],
        }),
        // Dense signal in high dimension: selection necessarily misses
        // signal, the regime where nuisance learning earns its keep.
        Scenario::Table2HighHigh => Ok(Table2Preset {
            n: 500,
            p: 1500,
            k: 150,
            selection: SelectionRule::PerSample(1.0),
            nn_width: 1000,
            nn_lr: 2e-4,
            nn_epochs: 200,
            methods: vec![DebiasMethod::Debinet, DebiasMethod::OlsPost],
        }),
        // Dense signal in moderate dimension, where the nodewise-corrected
        // Lasso is feasible and worth comparing against.
        Scenario::Table2LowHigh => Ok(Table2Preset {
            n: 400,
            p: 200,
            k: 160,
            selection: SelectionRule::FracMax(0.05),
            nn_width: 1000,
            nn_lr: 2e-4,
            nn_epochs: 200,
            methods: vec![
                DebiasMethod::Debinet,
                DebiasMethod::OlsPost,
                DebiasMethod::DebiasedLasso,
            ],
        }),
        other => Err(Error::Config(format!(
            "scenario {other} does not run the selection pipeline; use \
             compare_plms for table1/table4 and emit_convergence for ntk_figure"
        ))),
    }
}

/// A seeded 50/50 row split (first half train, second half test).
fn half_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let test = order.split_off(n / 2);
    (order, test)
}

fn mse(pred: &Array1<f64>, truth: &Array1<f64>) -> f64 {
    if pred.is_empty() {
        return f64::NAN;
    }
    (pred - truth).mapv(|v| v * v).mean().unwrap_or(f64::NAN)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn failure_row(method: String, replicate: usize, seconds: f64, message: String) -> MetricsRow {
    MetricsRow {
        method,
        estimation_mse: f64::NAN,
        train_mse: f64::NAN,
        test_mse: f64::NAN,
        coverage: None,
        seconds,
        replicate,
        error: Some(message),
    }
}

struct MethodRun {
    result: DebiasResult,
    pred_train: Array1<f64>,
    pred_test: Array1<f64>,
}

enum RepState {
    Ready {
        fit: LassoFit,
        split_train: SplitDesign,
        split_test: SplitDesign,
    },
    Failed(String),
}

fn rep_nn_config(preset: &Table2Preset, nn_override: &Option<NnConfig>, seed: u64) -> NnConfig {
    if let Some(ov) = nn_override {
        let mut cfg = ov.clone();
        cfg.train.seed = seed;
        return cfg;
    }
    NnConfig {
        width: preset.nn_width,
        activation: Activation::Relu,
        train: TrainConfig {
            optimizer: Optimizer::adam_default(),
            learning_rate: preset.nn_lr,
            max_epochs: preset.nn_epochs,
            loss: Loss::Mse,
            early_stop: Some(EarlyStop::default()),
            freeze_second_layer: false,
            seed,
        },
    }
}

fn run_table2_method(
    method: DebiasMethod,
    fit: &LassoFit,
    split_train: &SplitDesign,
    split_test: &SplitDesign,
    x_train: &Array2<f64>,
    y_train: &Array1<f64>,
    x_test: &Array2<f64>,
    nn_cfg: &NnConfig,
) -> Result<MethodRun> {
    let s = &fit.active_set;
    match method {
        DebiasMethod::Debinet => {
            let picked = s.clone();
            let selector = move |_: &Array2<f64>, _: &Array1<f64>| Ok(picked.clone());
            let (result, est) = debias::debinet_fit_full(x_train, y_train, &selector, nn_cfg)?;
            let pred_train = plm_predict(&est, &split_train.d, &split_train.z)?;
            let pred_test = plm_predict(&est, &split_test.d, &split_test.z)?;
            Ok(MethodRun {
                result,
                pred_train,
                pred_test,
            })
        }
        DebiasMethod::OlsPost => {
            let result = debias::ols_post(x_train, y_train, s)?;
            let pred_train = x_train.dot(&result.theta_full);
            let pred_test = x_test.dot(&result.theta_full);
            Ok(MethodRun {
                result,
                pred_train,
                pred_test,
            })
        }
        DebiasMethod::NwPost => {
            // Bandwidths are cross-validated on the training controls at
            // the sqrt(p_N) distance scale; with no controls left the
            // estimator is plain OLS and the bandwidths are never used.
            let (h_y, h_d) = if split_train.p_n == 0 {
                (1.0, 1.0)
            } else {
                let scale = (split_train.p_n as f64).sqrt();
                let grid: Vec<f64> = NW_POST_GRID_FACTORS.iter().map(|f| f * scale).collect();
                let y_2d = y_train
                    .view()
                    .insert_axis(Axis(1))
                    .to_owned();
                let h_y = nw_bandwidth_cv(&split_train.z, &y_2d, &grid, BANDWIDTH_CV_FOLDS)?;
                let h_d =
                    nw_bandwidth_cv(&split_train.z, &split_train.d, &grid, BANDWIDTH_CV_FOLDS)?;
                (h_y, h_d)
            };
            let (result, est) = debias::nw_post_full(x_train, y_train, s, h_y, h_d)?;
            let pred_train = plm_predict(&est, &split_train.d, &split_train.z)?;
            let pred_test = plm_predict(&est, &split_test.d, &split_test.z)?;
            Ok(MethodRun {
                result,
                pred_train,
                pred_test,
            })
        }
        DebiasMethod::DebiasedLasso => {
            let lambda_node = debias::default_nodewise_lambda(x_train.nrows(), x_train.ncols());
            let result = debias::debiased_lasso(x_train, y_train, fit, lambda_node)?;
            let pred_train = x_train.dot(&result.theta_full);
            let pred_test = x_test.dot(&result.theta_full);
            Ok(MethodRun {
                result,
                pred_train,
                pred_test,
            })
        }
    }
}

fn rep_coverage(result: &DebiasResult, truth: &Array1<f64>) -> f64 {
    let mut hits = 0usize;
    for (j, &t) in truth.iter().enumerate() {
        if result.ci_low[j] <= t && t <= result.ci_high[j] {
            hits += 1;
        }
    }
    hits as f64 / truth.len().max(1) as f64
}

/// Run a `table2_*` scenario: per replicate, draw fresh data, split 50/50,
/// select once with the scenario's penalty, then hand the identical fit and
/// halves to every configured method.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let preset = table2_preset(cfg.scenario)?;
    let n = cfg.scale.n.unwrap_or(preset.n);
    let p = cfg.scale.p.unwrap_or(preset.p);
    let k = cfg.scale.k.unwrap_or(preset.k);
    if n < 4 {
        return Err(Error::Config(format!("n = {n} leaves no usable split")));
    }
    let methods = if cfg.methods.is_empty() {
        preset.methods.clone()
    } else {
        cfg.methods.clone()
    };

    let mut rows = Vec::with_capacity(cfg.replicates * methods.len());
    let mut kept: BTreeMap<String, Vec<(DebiasResult, Array1<f64>)>> = BTreeMap::new();

    for rep in 0..cfg.replicates {
        let ds = gen_table2(n, p, k, cfg.seed.wrapping_add(rep as u64))?;
        let theta_true = ds
            .beta_true
            .as_ref()
            .expect("synthetic datasets carry their coefficients")
            .clone();
        let (train_idx, test_idx) = half_split(
            n,
            cfg.seed
                .wrapping_add(SPLIT_SEED_OFFSET)
                .wrapping_add(rep as u64),
        );
        let x_train = ds.x.select(Axis(0), &train_idx);
        let y_train = ds.y.select(Axis(0), &train_idx);
        let x_test = ds.x.select(Axis(0), &test_idx);
        let y_test = ds.y.select(Axis(0), &test_idx);

        let sel_started = Instant::now();
        let lambda = match preset.selection {
            SelectionRule::PerSample(c) => c * train_idx.len() as f64,
            SelectionRule::FracMax(f) => {
                let lam_max = (0..p)
                    .map(|j| x_train.column(j).dot(&y_train).abs())
                    .fold(0.0f64, f64::max);
                f * lam_max
            }
        };
        let state = match lasso_fit(&x_train, &y_train, lambda, DEFAULT_TOL, DEFAULT_MAX_SWEEPS) {
            Ok(fit) => {
                match (
                    split_by_indices(&x_train, &fit.active_set),
                    split_by_indices(&x_test, &fit.active_set),
                ) {
                    (Ok(split_train), Ok(split_test)) => RepState::Ready {
                        fit,
                        split_train,
                        split_test,
                    },
                    (Err(e), _) | (_, Err(e)) => RepState::Failed(e.to_string()),
                }
            }
            Err(e) => RepState::Failed(e.to_string()),
        };
        let sel_seconds = sel_started.elapsed().as_secs_f64();

        let nn_cfg = rep_nn_config(
            &preset,
            &cfg.nn_override,
            cfg.seed
                .wrapping_add(rep as u64)
                .wrapping_add(NN_SEED_OFFSET),
        );

        for &method in &methods {
            let name = method.to_string();
            let started = Instant::now();
            let outcome = match &state {
                RepState::Failed(msg) => Err(msg.clone()),
                RepState::Ready {
                    fit,
                    split_train,
                    split_test,
                } => run_table2_method(
                    method,
                    fit,
                    split_train,
                    split_test,
                    &x_train,
                    &y_train,
                    &x_test,
                    &nn_cfg,
                )
                .map_err(|e| e.to_string()),
            };
            let seconds = sel_seconds + started.elapsed().as_secs_f64();
            match outcome {
                Ok(run) => {
                    let truth_s: Array1<f64> = run
                        .result
                        .active_set
                        .iter()
                        .map(|&j| theta_true[j])
                        .collect();
                    rows.push(MetricsRow {
                        method: name.clone(),
                        estimation_mse: mse(&run.result.beta_hat, &truth_s),
                        train_mse: mse(&run.pred_train, &y_train),
                        test_mse: mse(&run.pred_test, &y_test),
                        coverage: Some(rep_coverage(&run.result, &truth_s)),
                        seconds,
                        replicate: rep,
                        error: None,
                    });
                    kept.entry(name).or_default().push((run.result, truth_s));
                }
                Err(msg) => rows.push(failure_row(name, rep, seconds, msg)),
            }
        }
    }

    finish_run(cfg, methods.iter().map(|m| m.to_string()).collect(), rows, kept)
}

/// Compare PLM-NN, PLM-NW, and cross-fitted Lasso on a low-dimensional
/// scenario (`table1` or `table4`). The treatment effect is 1 in both
/// generators, so estimation error is measured against unit coefficients.
pub fn compare_plms(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let n = cfg.scale.n.unwrap_or(2000);
    if n < 8 {
        return Err(Error::Config(format!("n = {n} leaves no usable split")));
    }
    let gen: fn(usize, u64) -> Result<PlmDataset> = match cfg.scenario {
        Scenario::Table1 => gen_table1,
        Scenario::Table4 => gen_complex,
        other => {
            return Err(Error::Config(format!(
                "scenario {other} does not compare PLM estimators; use \
                 run_experiment for table2_* and emit_convergence for ntk_figure"
            )))
        }
    };
    let methods = ["plm_nn", "plm_nw", "dml_lasso"];

    let mut rows = Vec::with_capacity(cfg.replicates * methods.len());
    for rep in 0..cfg.replicates {
        let ds = gen(n, cfg.seed.wrapping_add(rep as u64))?;
        let (train_idx, test_idx) = half_split(
            n,
            cfg.seed
                .wrapping_add(SPLIT_SEED_OFFSET)
                .wrapping_add(rep as u64),
        );
        let d_train = ds.d.select(Axis(0), &train_idx);
        let z_train = ds.z.select(Axis(0), &train_idx);
        let y_train = ds.y.select(Axis(0), &train_idx);
        let d_test = ds.d.select(Axis(0), &test_idx);
        let z_test = ds.z.select(Axis(0), &test_idx);
        let y_test = ds.y.select(Axis(0), &test_idx);
        let truth = Array1::ones(d_train.ncols());

        for name in methods {
            let started = Instant::now();
            let estimate: Result<PlmEstimate> = match name {
                "plm_nn" => {
                    let nn_seed = cfg
                        .seed
                        .wrapping_add(COMPARE_NN_SEED_STRIDE * rep as u64);
                    let nn_cfg = match &cfg.nn_override {
                        Some(ov) => {
                            let mut c = ov.clone();
                            c.train.seed = nn_seed;
                            c
                        }
                        None => NnConfig::table1_default(nn_seed),
                    };
                    plm_nn_fit(&d_train, &z_train, &y_train, &nn_cfg)
                }
                "plm_nw" => {
                    let y_2d = y_train.view().insert_axis(Axis(1)).to_owned();
                    nw_bandwidth_cv(&z_train, &y_2d, &COMPARE_NW_GRID, BANDWIDTH_CV_FOLDS)
                        .and_then(|h_y| {
                            let h_d = nw_bandwidth_cv(
                                &z_train,
                                &d_train,
                                &COMPARE_NW_GRID,
                                BANDWIDTH_CV_FOLDS,
                            )?;
                            plm_nw_fit(&d_train, &z_train, &y_train, h_y, h_d)
                        })
                }
                _ => dml_fit(
                    &d_train,
                    &z_train,
                    &y_train,
                    &DmlLearner::Lasso,
                    DEFAULT_DML_FOLDS,
                    cfg.seed.wrapping_add(DML_SEED_STRIDE * rep as u64),
                ),
            };
            let outcome = estimate.and_then(|est| {
                let pred_train = plm_predict(&est, &d_train, &z_train)?;
                let pred_test = plm_predict(&est, &d_test, &z_test)?;
                Ok((est, pred_train, pred_test))
            });
            let seconds = started.elapsed().as_secs_f64();
            match outcome {
                Ok((est, pred_train, pred_test)) => rows.push(MetricsRow {
                    method: name.to_string(),
                    estimation_mse: mse(&est.beta_hat, &truth),
                    train_mse: mse(&pred_train, &y_train),
                    test_mse: mse(&pred_test, &y_test),
                    coverage: None,
                    seconds,
                    replicate: rep,
                    error: None,
                }),
                Err(e) => rows.push(failure_row(name.to_string(), rep, seconds, e.to_string())),
            }
        }
    }

    let order = methods.iter().map(|m| m.to_string()).collect();
    finish_run(cfg, order, rows, BTreeMap::new())
}

fn finish_run(
    cfg: &ExperimentConfig,
    method_order: Vec<String>,
    mut rows: Vec<MetricsRow>,
    kept: BTreeMap<String, Vec<(DebiasResult, Array1<f64>)>>,
) -> Result<ExperimentOutput> {
    if !cfg.include_timings {
        for row in &mut rows {
            row.seconds = 0.0;
        }
    }
    let mut summary = Vec::with_capacity(method_order.len());
    for name in method_order {
        let ok: Vec<&MetricsRow> = rows
            .iter()
            .filter(|r| r.method == name && r.error.is_none())
            .collect();
        let failures = rows
            .iter()
            .filter(|r| r.method == name && r.error.is_some())
            .count();
        let collect = |f: fn(&MetricsRow) -> f64| -> Vec<f64> { ok.iter().map(|r| f(r)).collect() };
        let (mean_est, std_est) = mean_std(&collect(|r| r.estimation_mse));
        let (mean_train, std_train) = mean_std(&collect(|r| r.train_mse));
        let (mean_test, std_test) = mean_std(&collect(|r| r.test_mse));
        let (mean_seconds, _) = mean_std(&collect(|r| r.seconds));
        let coverage = match kept.get(&name) {
            Some(entries) if !entries.is_empty() => {
                if cfg.coverage_by_replicate {
                    let fractions: Vec<f64> = ok.iter().filter_map(|r| r.coverage).collect();
                    Some(mean_std(&fractions).0)
                } else {
                    let (results, truths): (Vec<DebiasResult>, Vec<Array1<f64>>) =
                        entries.iter().cloned().unzip();
                    Some(debias::coverage(&results, &truths)?)
                }
            }
            _ => None,
        };
        summary.push(MethodSummary {
            method: name,
            replicates_ok: ok.len(),
            failures,
            mean_estimation_mse: mean_est,
            std_estimation_mse: std_est,
            mean_train_mse: mean_train,
            std_train_mse: std_train,
            mean_test_mse: mean_test,
            std_test_mse: std_test,
            coverage,
            mean_seconds,
        });
    }
    let out = ExperimentOutput {
        scenario: cfg.scenario,
        replicates: cfg.replicates,
        seed: cfg.seed,
        rows,
        summary,
    };
    if let Some(prefix) = &cfg.output {
        write_metrics_csv(&out.rows, &prefixed(prefix, "_metrics.csv"))?;
        write_json(&out, &prefixed(prefix, "_summary.json"))?;
    }
    Ok(out)
}

/// One epoch of the convergence trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub epoch: usize,
    /// Full-data squared-error loss; epoch 0 is pre-training.
    pub loss: f64,
    /// `max_r ||w_r(t) - w_r(0)||`.
    pub weight_drift: f64,
}

/// Trace plus kernel diagnostics from [`emit_convergence`]. Serializing
/// yields the summary document; the per-epoch rows travel in the CSV.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub n: usize,
    pub width: usize,
    pub learning_rate: f64,
    pub epochs_run: usize,
    /// Least eigenvalue of the empirical tangent kernel at init.
    pub lambda0_emp: f64,
    /// Least eigenvalue of the closed-form infinite-width kernel.
    pub lambda0_inf: f64,
    /// Exponential-decay check of the loss trace against `lambda0_emp`.
    pub rate: RateReport,
    #[serde(skip)]
    pub rows: Vec<ConvergenceRow>,
}

/// Trace full-batch training of a frozen-output-layer network on the
/// `table1` design with unit-normalized control rows, and check the decay
/// rate that the tangent kernel's least eigenvalue predicts.
pub fn emit_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    cfg.validate()?;
    if cfg.scenario != Scenario::NtkFigure {
        return Err(Error::Config(format!(
            "scenario {} does not trace convergence; use ntk_figure",
            cfg.scenario
        )));
    }
    let n = cfg.scale.n.unwrap_or(100);
    let width = cfg.ntk.width.unwrap_or(5000);
    let epochs = cfg.ntk.epochs.unwrap_or(2000);
    let lr = cfg.ntk.learning_rate.unwrap_or(0.01);
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate {lr} must be positive")));
    }

    let ds = gen_table1(n, cfg.seed)?;
    let mut z = ds.z;
    for mut row in z.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let mut m_targets = Array2::zeros((n, 1 + ds.d.ncols()));
    m_targets.column_mut(0).assign(&ds.y);
    for (t, col) in ds.d.columns().into_iter().enumerate() {
        m_targets.column_mut(1 + t).assign(&col);
    }

    let net0 = init_network(z.ncols(), width, ds.d.ncols(), Activation::Relu, cfg.seed)?;
    let lambda0_emp = least_eigenvalue(&ntk_empirical(&net0, &z)?)?;
    let inf = ntk_infinite(&z, ds.d.ncols(), InfMethod::ClosedForm)?;
    let lambda0_inf = least_eigenvalue(&inf.h_inf_whole)?;

    let train_cfg = TrainConfig {
        optimizer: Optimizer::Gd,
        learning_rate: lr,
        max_epochs: epochs,
        loss: Loss::Mse,
        early_stop: None,
        freeze_second_layer: true,
        seed: cfg.seed,
    };
    let (_, trace) = train(&net0, &z, &m_targets, &train_cfg)?;
    let resid0: Vec<f64> = (&m_targets - &forward_batch(&net0, &z)?)
        .iter()
        .copied()
        .collect();
    let rate = verify_rate(&trace, lambda0_emp, lr, &resid0);

    let rows: Vec<ConvergenceRow> = trace
        .loss_per_epoch
        .iter()
        .zip(&trace.weight_drift_per_epoch)
        .enumerate()
        .map(|(epoch, (&loss, &weight_drift))| ConvergenceRow {
            epoch,
            loss,
            weight_drift,
        })
        .collect();
    let report = ConvergenceReport {
        n,
        width,
        learning_rate: lr,
        epochs_run: rows.len().saturating_sub(1),
        lambda0_emp,
        lambda0_inf,
        rate,
        rows,
    };
    if let Some(prefix) = &cfg.output {
        write_convergence_csv(&report.rows, &prefixed(prefix, "_convergence.csv"))?;
        write_json(&report, &prefixed(prefix, "_summary.json"))?;
    }
    Ok(report)
}

fn prefixed(prefix: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", prefix.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

/// Write per-replicate metrics rows as CSV.
pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Write the per-epoch convergence trace as CSV.
pub fn write_convergence_csv(rows: &[ConvergenceRow], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Write any summary document as pretty JSON.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text)?;
    Ok(())
}
