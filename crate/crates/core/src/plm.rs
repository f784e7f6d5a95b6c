//! Partialling-out estimators for the partially linear model
//! `y = D beta + f(Z) + eps`.
//!
//! All three fitters share one recipe: estimate the joint conditional mean
//! `M(Z) = E([y, D] | Z)` with some learner, subtract it to form the
//! residuals `Y = y - E(y|Z)` and `X = D - E(D|Z)`, then run ordinary
//! least squares of `Y` on `X` without intercept. They differ only in the
//! learner: one jointly trained over-parameterized network (no sample
//! splitting, early stopping instead), per-column kernel regressions, or
//! K-fold cross-fitted learners averaged in the double-ML style.
//!
//! The network learner predicts through its *delta from initialization*:
//! targets are standardized and the random initial output is added to the
//! training targets, so an untrained network predicts exactly the column
//! means and training only has to learn the centered signal. Inputs are
//! scaled by `1/sqrt(p_N)` to keep rows near the unit sphere where the
//! tangent-kernel regime is calibrated.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{nw_fit, nw_predict, NwModel};
use crate::selection::{lasso_fit, DEFAULT_MAX_SWEEPS, DEFAULT_TOL};
use crate::widenet::{forward_batch, init_network, train, Activation, TrainConfig, WideNet};

/// Condition-number ceiling checked before inverting the residual Gram.
pub const MAX_GRAM_CONDITION: f64 = 1e10;
/// Default fold count for cross-fitting.
pub const DEFAULT_DML_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerTag {
    Widenet,
    Nw,
    Lasso,
    Mean,
    Zero,
    CrossFit,
}

/// A fitted joint nuisance: evaluates `M(Z) = E([y, D] | Z)` rowwise,
/// first column the response mean, remaining columns the treatment means.
pub trait NuisanceFn: Send + Sync {
    fn predict_m(&self, z: &Array2<f64>) -> Result<Array2<f64>>;
    fn learner_tag(&self) -> LearnerTag;
    /// Row indices of the original sample this nuisance was fit on.
    fn fitted_on(&self) -> &[usize];
}

/// Network nuisance: standardization plus delta-from-init prediction.
pub struct WideNuisance {
    pub net0: WideNet,
    pub net: WideNet,
    pub mu: Array1<f64>,
    pub sd: Array1<f64>,
    pub input_scale: f64,
    fitted_on: Vec<usize>,
}

impl NuisanceFn for WideNuisance {
    fn predict_m(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        let zs = z * self.input_scale;
        let delta = forward_batch(&self.net, &zs)? - forward_batch(&self.net0, &zs)?;
        Ok(&(&delta * &self.sd) + &self.mu)
    }

    fn learner_tag(&self) -> LearnerTag {
        LearnerTag::Widenet
    }

    fn fitted_on(&self) -> &[usize] {
        &self.fitted_on
    }
}

/// Separate kernel regressions for the response and each treatment column.
pub struct NwNuisance {
    pub model_y: NwModel,
    pub model_d: NwModel,
    fitted_on: Vec<usize>,
}

impl NuisanceFn for NwNuisance {
    fn predict_m(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        let my = nw_predict(&self.model_y, z)?;
        let md = nw_predict(&self.model_d, z)?;
        Ok(concatenate(Axis(1), &[my.view(), md.view()]).expect("row counts match"))
    }

    fn learner_tag(&self) -> LearnerTag {
        LearnerTag::Nw
    }

    fn fitted_on(&self) -> &[usize] {
        &self.fitted_on
    }
}

/// Linear nuisance from per-column Lasso fits on centered targets:
/// `M(z) = intercept + z' coef`.
pub struct LassoNuisance {
    /// p_N x (1 + p_L) coefficients, response column first.
    pub coef: Array2<f64>,
    /// Training-sample mean of each target column.
    pub intercept: Array1<f64>,
    fitted_on: Vec<usize>,
}

impl NuisanceFn for LassoNuisance {
    fn predict_m(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.coef.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "query has {} columns but nuisance expects {}",
                z.ncols(),
                self.coef.nrows()
            )));
        }
        Ok(z.dot(&self.coef) + &self.intercept)
    }

    fn learner_tag(&self) -> LearnerTag {
        LearnerTag::Lasso
    }

    fn fitted_on(&self) -> &[usize] {
        &self.fitted_on
    }
}

/// Constant nuisance: the column means it was built from.
pub struct MeanNuisance {
    pub means: Array1<f64>,
    fitted_on: Vec<usize>,
}

impl NuisanceFn for MeanNuisance {
    fn predict_m(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        let n = z.nrows();
        let q = self.means.len();
        Ok(Array2::from_shape_fn((n, q), |(_, j)| self.means[j]))
    }

    fn learner_tag(&self) -> LearnerTag {
        LearnerTag::Mean
    }

    fn fitted_on(&self) -> &[usize] {
        &self.fitted_on
    }
}

/// The no-controls convention: `E([y, D] | nothing) := 0`, so residuals
/// are the raw data and the estimator degrades to plain OLS.
pub struct ZeroNuisance {
    pub out_dim: usize,
}

impl NuisanceFn for ZeroNuisance {
    fn predict_m(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(Array2::zeros((z.nrows(), self.out_dim)))
    }

    fn learner_tag(&self) -> LearnerTag {
        LearnerTag::Zero
    }

    fn fitted_on(&self) -> &[usize] {
        &[]
    }
}

/// Cross-fitted aggregate: the average of the per-fold nuisance models.
pub struct CrossFitNuisance {
    pub models: Vec<Box<dyn NuisanceFn>>,
    fitted_on: Vec<usize>,
}

impl NuisanceFn for CrossFitNuisance {
    fn predict_m(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        let mut acc: Option<Array2<f64>> = None;
        for model in &self.models {
            let pred = model.predict_m(z)?;
            acc = Some(match acc {
                Some(a) => a + &pred,
                None => pred,
            });
        }
        let total = acc.ok_or_else(|| Error::InvalidSize("no fold models".into()))?;
        Ok(total / self.models.len() as f64)
    }

    fn learner_tag(&self) -> LearnerTag {
        LearnerTag::CrossFit
    }

    fn fitted_on(&self) -> &[usize] {
        &self.fitted_on
    }
}

/// A fitted partialling-out estimate.
pub struct PlmEstimate {
    pub beta_hat: Array1<f64>,
    /// `X = D - E(D|Z)` on the training rows.
    pub x_resid: Array2<f64>,
    /// `Y = y - E(y|Z)` on the training rows.
    pub y_resid: Array1<f64>,
    pub sigma2_hat: f64,
    pub cov_beta: Array2<f64>,
    pub nuisance: Box<dyn NuisanceFn>,
}

impl std::fmt::Debug for PlmEstimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PlmEstimate")
            .field("beta_hat", &self.beta_hat)
            .field("sigma2_hat", &self.sigma2_hat)
            .field("learner", &self.nuisance.learner_tag())
            .finish()
    }
}

impl PlmEstimate {
    pub fn p_l(&self) -> usize {
        self.beta_hat.len()
    }
}

/// Network learner configuration: architecture plus training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnConfig {
    pub width: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub train: TrainConfig,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl NnConfig {
    /// Low-dimensional PLM preset: width 2048, SGD with batch 8 at lr 0.01,
    /// default early stopping.
    pub fn table1_default(seed: u64) -> Self {
        Self {
            width: 2048,
            activation: Activation::Relu,
            train: TrainConfig {
                optimizer: crate::widenet::Optimizer::Sgd { batch: 8 },
                learning_rate: 0.01,
                max_epochs: 200,
                loss: crate::widenet::Loss::Mse,
                early_stop: Some(crate::widenet::EarlyStop::default()),
                freeze_second_layer: false,
                seed,
            },
        }
    }

    /// Sparse-regression-scale preset: width 1000, full-batch Adam at 2e-4.
    pub fn table2_default(seed: u64) -> Self {
        Self {
            width: 1000,
            activation: Activation::Relu,
            train: TrainConfig::practical_default(400, seed),
        }
    }
}

/// Cross-fitting learner choice for [`dml_fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmlLearner {
    /// Per-column Lasso of each target on Z, penalty `0.01 * max|Z't|`.
    Lasso,
    /// Kernel regressions with fixed bandwidths for y and D.
    Nw { h_y: f64, h_d: f64 },
    /// The joint network learner.
    Widenet(NnConfig),
    /// Diagnostic constant learner. Predicts the column means of the
    /// *full* sample so the partialling-out reduction is exactly
    /// learner-independent, fold splits notwithstanding.
    Mean,
}

/// OLS of the residualized response on the residualized treatments,
/// no intercept. Returns `(beta_hat, sigma2_hat, cov_beta)`.
pub fn residual_ols(
    x_resid: &Array2<f64>,
    y_resid: &Array1<f64>,
) -> Result<(Array1<f64>, f64, Array2<f64>)> {
    let (n, p_l) = x_resid.dim();
    if y_resid.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "X has {n} rows but Y has {}",
            y_resid.len()
        )));
    }
    if p_l == 0 {
        return Err(Error::InvalidSize("no treatment columns".into()));
    }
    if n <= p_l {
        return Err(Error::OlsInfeasible { p_l, n });
    }
    let gram = x_resid.t().dot(x_resid);
    let sym = nalgebra::DMatrix::from_fn(p_l, p_l, |i, j| 0.5 * (gram[[i, j]] + gram[[j, i]]));
    let eig = sym.symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lam_min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if lam_min <= 0.0 || lam_max / lam_min > MAX_GRAM_CONDITION {
        let cond = if lam_min > 0.0 {
            lam_max / lam_min
        } else {
            f64::INFINITY
        };
        return Err(Error::SingularDesign(format!(
            "residual Gram condition number {cond:.3e} exceeds {MAX_GRAM_CONDITION:.0e}"
        )));
    }
    // beta = V diag(1/lambda) V' X'Y; the same factors give an exactly
    // symmetric PSD inverse for the covariance.
    let xty = x_resid.t().dot(y_resid);
    let xty_na = nalgebra::DVector::from_fn(p_l, |i, _| xty[i]);
    let vt_b = eig.eigenvectors.transpose() * &xty_na;
    let scaled = nalgebra::DVector::from_fn(p_l, |i, _| vt_b[i] / eig.eigenvalues[i]);
    let beta_na = &eig.eigenvectors * scaled;
    let beta = Array1::from_shape_fn(p_l, |i| beta_na[i]);
    let fitted = x_resid.dot(&beta);
    let resid = y_resid - &fitted;
    let sigma2 = resid.dot(&resid) / (n - p_l) as f64;
    let mut inv = Array2::zeros((p_l, p_l));
    for i in 0..p_l {
        for j in i..p_l {
            let mut acc = 0.0;
            for k in 0..p_l {
                acc += eig.eigenvectors[(i, k)] * eig.eigenvectors[(j, k)] / eig.eigenvalues[k];
            }
            inv[[i, j]] = acc;
            inv[[j, i]] = acc;
        }
    }
    Ok((beta, sigma2, inv * sigma2))
}

fn joint_targets(d: &Array2<f64>, y: &Array1<f64>) -> Array2<f64> {
    let y_col = y.view().insert_axis(Axis(1));
    concatenate(Axis(1), &[y_col, d.view()]).expect("row counts match")
}

fn check_plm_shapes(d: &Array2<f64>, z: &Array2<f64>, y: &Array1<f64>) -> Result<(usize, usize)> {
    let n = y.len();
    if d.nrows() != n || z.nrows() != n {
        return Err(Error::ShapeMismatch(format!(
            "row counts disagree: D {}, Z {}, y {}",
            d.nrows(),
            z.nrows(),
            n
        )));
    }
    let p_l = d.ncols();
    if p_l == 0 {
        return Err(Error::InvalidSize("D has no columns".into()));
    }
    if p_l >= n {
        return Err(Error::OlsInfeasible { p_l, n });
    }
    Ok((n, p_l))
}

fn estimate_from_nuisance(
    nuisance: Box<dyn NuisanceFn>,
    d: &Array2<f64>,
    z: &Array2<f64>,
    y: &Array1<f64>,
) -> Result<PlmEstimate> {
    let m_hat = nuisance.predict_m(z)?;
    let y_resid = y - &m_hat.column(0);
    let x_resid = d - &m_hat.slice(s![.., 1..]);
    let (beta_hat, sigma2_hat, cov_beta) = residual_ols(&x_resid, &y_resid)?;
    Ok(PlmEstimate {
        beta_hat,
        x_resid,
        y_resid,
        sigma2_hat,
        cov_beta,
        nuisance,
    })
}

/// Fit the joint nuisance `[y, D] ~ Z` with one over-parameterized network
/// (no sample splitting; early stopping per the config), then run the
/// residual OLS.
pub fn plm_nn_fit(
    d: &Array2<f64>,
    z: &Array2<f64>,
    y: &Array1<f64>,
    cfg: &NnConfig,
) -> Result<PlmEstimate> {
    let (n, _) = check_plm_shapes(d, z, y)?;
    let nuisance = fit_wide_nuisance(d, z, y, cfg, (0..n).collect())?;
    estimate_from_nuisance(Box::new(nuisance), d, z, y)
}

fn fit_wide_nuisance(
    d: &Array2<f64>,
    z: &Array2<f64>,
    y: &Array1<f64>,
    cfg: &NnConfig,
    fitted_on: Vec<usize>,
) -> Result<WideNuisance> {
    let m = joint_targets(d, y);
    let q = m.ncols();
    let n = m.nrows();
    let mu = Array1::from_shape_fn(q, |j| m.column(j).sum() / n as f64);
    let sd = Array1::from_shape_fn(q, |j| {
        let col = m.column(j);
        let var = col.iter().map(|v| (v - mu[j]).powi(2)).sum::<f64>() / n as f64;
        var.sqrt().max(1e-12)
    });
    let m_std = (&m - &mu) / &sd;
    let input_scale = 1.0 / (z.ncols() as f64).sqrt();
    let zs = z * input_scale;
    let net0 = init_network(z.ncols(), cfg.width, q - 1, cfg.activation, cfg.train.seed)?;
    // Train toward M_std + F_0 so the delta from initialization fits the
    // standardized targets and the zero-epoch network predicts the means.
    let f0 = forward_batch(&net0, &zs)?;
    let targets = &m_std + &f0;
    let (net, _trace) = train(&net0, &zs, &targets, &cfg.train)?;
    Ok(WideNuisance {
        net0,
        net,
        mu,
        sd,
        input_scale,
        fitted_on,
    })
}

/// Fit `y ~ Z` and `D ~ Z` by kernel regression at the given bandwidths,
/// then run the residual OLS.
pub fn plm_nw_fit(
    d: &Array2<f64>,
    z: &Array2<f64>,
    y: &Array1<f64>,
    h_y: f64,
    h_d: f64,
) -> Result<PlmEstimate> {
    let (n, _) = check_plm_shapes(d, z, y)?;
    let nuisance = fit_nw_nuisance(d, z, y, h_y, h_d, (0..n).collect())?;
    estimate_from_nuisance(Box::new(nuisance), d, z, y)
}

fn fit_nw_nuisance(
    d: &Array2<f64>,
    z: &Array2<f64>,
    y: &Array1<f64>,
    h_y: f64,
    h_d: f64,
    fitted_on: Vec<usize>,
) -> Result<NwNuisance> {
    let y_col = y.view().insert_axis(Axis(1)).to_owned();
    let model_y = nw_fit(z, &y_col, h_y)?;
    let model_d = nw_fit(z, d, h_d)?;
    Ok(NwNuisance {
        model_y,
        model_d,
        fitted_on,
    })
}

/// Constant-nuisance fit (column means): the learner-agnostic baseline.
pub fn plm_mean_fit(d: &Array2<f64>, z: &Array2<f64>, y: &Array1<f64>) -> Result<PlmEstimate> {
    let (n, _) = check_plm_shapes(d, z, y)?;
    let m = joint_targets(d, y);
    let means = Array1::from_shape_fn(m.ncols(), |j| m.column(j).sum() / n as f64);
    let nuisance = MeanNuisance {
        means,
        fitted_on: (0..n).collect(),
    };
    estimate_from_nuisance(Box::new(nuisance), d, z, y)
}

fn fit_lasso_nuisance(
    d: &Array2<f64>,
    z: &Array2<f64>,
    y: &Array1<f64>,
    fitted_on: Vec<usize>,
) -> Result<LassoNuisance> {
    let m = joint_targets(d, y);
    let p_n = z.ncols();
    let mut coef = Array2::zeros((p_n, m.ncols()));
    let mut intercept = Array1::zeros(m.ncols());
    for (t, target) in m.columns().into_iter().enumerate() {
        let target = target.to_owned();
        // The penalty level is set from the raw correlations, but the fit
        // runs on the centered target so large target means do not bias
        // every coefficient; the mean returns as an intercept.
        let lam_max = (0..p_n)
            .map(|j| z.column(j).dot(&target).abs())
            .fold(0.0f64, f64::max);
        let mean = target.mean().unwrap_or(0.0);
        let centered = &target - mean;
        let fit = lasso_fit(z, &centered, 0.01 * lam_max, DEFAULT_TOL, DEFAULT_MAX_SWEEPS)?;
        coef.column_mut(t).assign(&fit.theta);
        intercept[t] = mean;
    }
    Ok(LassoNuisance {
        coef,
        intercept,
        fitted_on,
    })
}

fn fit_fold_learner(
    learner: &DmlLearner,
    d: &Array2<f64>,
    z: &Array2<f64>,
    y: &Array1<f64>,
    rows: Vec<usize>,
    global_means: &Array1<f64>,
    fold_seed: u64,
) -> Result<Box<dyn NuisanceFn>> {
    let d_tr = d.select(Axis(0), &rows);
    let z_tr = z.select(Axis(0), &rows);
    let y_tr = y.select(Axis(0), &rows);
    match learner {
        DmlLearner::Lasso => Ok(Box::new(fit_lasso_nuisance(&d_tr, &z_tr, &y_tr, rows)?)),
        DmlLearner::Nw { h_y, h_d } => Ok(Box::new(fit_nw_nuisance(
            &d_tr, &z_tr, &y_tr, *h_y, *h_d, rows,
        )?)),
        DmlLearner::Widenet(cfg) => {
            let mut cfg = cfg.clone();
            cfg.train.seed = cfg.train.seed.wrapping_add(fold_seed);
            Ok(Box::new(fit_wide_nuisance(&d_tr, &z_tr, &y_tr, &cfg, rows)?))
        }
        DmlLearner::Mean => Ok(Box::new(MeanNuisance {
            means: global_means.clone(),
            fitted_on: rows,
        })),
    }
}

/// K-fold cross-fitted estimate: nuisances trained on each fold's
/// complement, per-fold residual OLS, and the arithmetic mean of the fold
/// coefficients as the final estimate. The stored residuals are the
/// pooled cross-fitted ones, and `sigma2_hat`/`cov_beta` are computed
/// from them at the averaged coefficient.
pub fn dml_fit(
    d: &Array2<f64>,
    z: &Array2<f64>,
    y: &Array1<f64>,
    learner: &DmlLearner,
    k: usize,
    seed: u64,
) -> Result<PlmEstimate> {
    let (n, _) = check_plm_shapes(d, z, y)?;
    if k < 2 {
        return Err(Error::InvalidParam(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(Error::InvalidSize(format!(
            "cannot split {n} rows into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut assignment = vec![0usize; n];
    for (pos, &row) in order.iter().enumerate() {
        assignment[row] = pos % k;
    }
    dml_fit_with_assignment(d, z, y, learner, k, &assignment)
}

fn dml_fit_with_assignment(
    d: &Array2<f64>,
    z: &Array2<f64>,
    y: &Array1<f64>,
    learner: &DmlLearner,
    k: usize,
    assignment: &[usize],
) -> Result<PlmEstimate> {
    let (n, p_l) = check_plm_shapes(d, z, y)?;
    let m = joint_targets(d, y);
    let global_means = Array1::from_shape_fn(m.ncols(), |j| m.column(j).sum() / n as f64);

    let mut x_resid = Array2::zeros((n, p_l));
    let mut y_resid = Array1::zeros(n);
    let mut beta_sum = Array1::<f64>::zeros(p_l);
    let mut models: Vec<Box<dyn NuisanceFn>> = Vec::with_capacity(k);

    for fold in 0..k {
        let test_rows: Vec<usize> = (0..n).filter(|&i| assignment[i] == fold).collect();
        let train_rows: Vec<usize> = (0..n).filter(|&i| assignment[i] != fold).collect();
        if test_rows.len() <= p_l {
            return Err(Error::FoldTooSmall {
                fold,
                rows: test_rows.len(),
                p_l,
            });
        }
        if train_rows.is_empty() {
            return Err(Error::FoldTooSmall { fold, rows: 0, p_l });
        }
        let model = fit_fold_learner(learner, d, z, y, train_rows, &global_means, fold as u64)?;
        let z_te = z.select(Axis(0), &test_rows);
        let m_hat = model.predict_m(&z_te)?;
        let d_te = d.select(Axis(0), &test_rows);
        let y_te = y.select(Axis(0), &test_rows);
        let fold_y = &y_te - &m_hat.column(0);
        let fold_x = &d_te - &m_hat.slice(s![.., 1..]);
        let (fold_beta, _, _) = residual_ols(&fold_x, &fold_y)?;
        beta_sum += &fold_beta;
        for (slot, &row) in test_rows.iter().enumerate() {
            y_resid[row] = fold_y[slot];
            x_resid.row_mut(row).assign(&fold_x.row(slot));
        }
        models.push(model);
    }

    let beta_hat = beta_sum / k as f64;
    let fitted = x_resid.dot(&beta_hat);
    let resid = &y_resid - &fitted;
    let sigma2_hat = resid.dot(&resid) / (n - p_l) as f64;
    let gram = x_resid.t().dot(&x_resid);
    let sym = nalgebra::DMatrix::from_fn(p_l, p_l, |i, j| 0.5 * (gram[[i, j]] + gram[[j, i]]));
    let eig = sym.symmetric_eigen();
    let lam_min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if lam_min <= 0.0 {
        return Err(Error::SingularDesign(
            "pooled cross-fitted residual Gram is singular".into(),
        ));
    }
    let mut inv = Array2::zeros((p_l, p_l));
    for i in 0..p_l {
        for j in i..p_l {
            let mut acc = 0.0;
            for kk in 0..p_l {
                acc += eig.eigenvectors[(i, kk)] * eig.eigenvectors[(j, kk)] / eig.eigenvalues[kk];
            }
            inv[[i, j]] = acc;
            inv[[j, i]] = acc;
        }
    }
    Ok(PlmEstimate {
        beta_hat,
        x_resid,
        y_resid,
        sigma2_hat,
        cov_beta: inv * sigma2_hat,
        nuisance: Box::new(CrossFitNuisance {
            models,
            fitted_on: (0..n).collect(),
        }),
    })
}

/// `y_hat = m_y(Z) + (D - m_D(Z)) beta_hat` at new rows.
pub fn plm_predict(
    est: &PlmEstimate,
    d_new: &Array2<f64>,
    z_new: &Array2<f64>,
) -> Result<Array1<f64>> {
    if d_new.nrows() != z_new.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "D has {} rows but Z has {}",
            d_new.nrows(),
            z_new.nrows()
        )));
    }
    if d_new.ncols() != est.p_l() {
        return Err(Error::ShapeMismatch(format!(
            "D has {} columns but the estimate expects p_L = {}",
            d_new.ncols(),
            est.p_l()
        )));
    }
    let m_hat = est.nuisance.predict_m(z_new)?;
    let x_new = d_new - &m_hat.slice(s![.., 1..]);
    Ok(&m_hat.column(0) + &x_new.dot(&est.beta_hat))
}

/// The non-parametric component `f_hat(Z) = m_y(Z) - m_D(Z) beta_hat`.
pub fn f_hat(est: &PlmEstimate, z_query: &Array2<f64>) -> Result<Array1<f64>> {
    let m_hat = est.nuisance.predict_m(z_query)?;
    let md_beta = m_hat.slice(s![.., 1..]).dot(&est.beta_hat);
    Ok(&m_hat.column(0) - &md_beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_complex, gen_table1};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand_distr::StandardNormal;

    fn centered_ols(d: &Array2<f64>, y: &Array1<f64>) -> Array1<f64> {
        let n = y.len() as f64;
        let d_mean = Array1::from_shape_fn(d.ncols(), |j| d.column(j).sum() / n);
        let y_mean = y.sum() / n;
        let dc = d - &d_mean;
        let yc = y.mapv(|v| v - y_mean);
        let (beta, _, _) = residual_ols(&dc, &yc).unwrap();
        beta
    }

    fn linear_plm(
        n: usize,
        p_n: usize,
        beta: f64,
        seed: u64,
    ) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        // y = D beta + Z gamma + eps with D = Z alpha + nu, all learnable
        // by a linear (lasso) nuisance.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Array2::from_shape_fn((n, p_n), |_| rng.sample::<f64, _>(StandardNormal));
        let alpha = Array1::from_shape_fn(p_n, |j| if j % 3 == 0 { 0.7 } else { -0.2 });
        let gamma = Array1::from_shape_fn(p_n, |j| if j % 2 == 0 { 0.5 } else { 0.3 });
        let d_col = z.dot(&alpha)
            + &Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal));
        let y = &d_col * beta
            + &z.dot(&gamma)
            + &Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal));
        (d_col.insert_axis(Axis(1)), z, y)
    }

    #[test]
    fn residual_ols_noiseless_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((30, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let beta = array![2.0, -1.0];
        let y = x.dot(&beta);
        let (b, s2, cov) = residual_ols(&x, &y).unwrap();
        assert_abs_diff_eq!(b[0], 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(b[1], -1.0, epsilon = 1e-10);
        assert!(s2 <= 1e-18);
        assert_eq!(cov.dim(), (2, 2));
    }

    #[test]
    fn residual_ols_proportionality() {
        let x = array![[1.0], [2.0], [3.0]];
        let y = array![2.0, 4.0, 6.0];
        let (b, _, _) = residual_ols(&x, &y).unwrap();
        assert_abs_diff_eq!(b[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn residual_ols_matches_independent_gram_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((50, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let y = Array1::from_shape_fn(50, |_| rng.sample::<f64, _>(StandardNormal) * 2.0);
        let (b, _, _) = residual_ols(&x, &y).unwrap();
        // Independent path: Gauss-Jordan on the 3x3 normal equations.
        let g = x.t().dot(&x);
        let r = x.t().dot(&y);
        let mut aug = [[0.0f64; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                aug[i][j] = g[[i, j]];
            }
            aug[i][3] = r[i];
        }
        for col in 0..3 {
            let pivot = (col..3).max_by(|&a, &b| aug[a][col].abs().total_cmp(&aug[b][col].abs()))
                .unwrap();
            aug.swap(col, pivot);
            let p = aug[col][col];
            for j in 0..4 {
                aug[col][j] /= p;
            }
            for i in 0..3 {
                if i != col {
                    let f = aug[i][col];
                    for j in 0..4 {
                        aug[i][j] -= f * aug[col][j];
                    }
                }
            }
        }
        for i in 0..3 {
            assert_abs_diff_eq!(b[i], aug[i][3], epsilon = 1e-8);
        }
    }

    #[test]
    fn residual_ols_normal_equations_and_psd_cov() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((40, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let y = Array1::from_shape_fn(40, |_| rng.sample::<f64, _>(StandardNormal) * 3.0);
        let (b, _, cov) = residual_ols(&x, &y).unwrap();
        let resid = &y - &x.dot(&b);
        let grad = x.t().dot(&resid);
        let xty = x.t().dot(&y);
        let scale = xty.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        for g in grad.iter() {
            assert!(g.abs() <= 1e-6 * scale);
        }
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!(cov[[i, j]], cov[[j, i]], epsilon = 1e-15);
            }
        }
        assert!(crate::ntk::least_eigenvalue(&cov).unwrap() >= -1e-12);
    }

    #[test]
    fn residual_ols_rejects_singular_and_tiny() {
        let x_dup = array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let y = array![1.0, 2.0, 3.0];
        assert!(matches!(
            residual_ols(&x_dup, &y),
            Err(Error::SingularDesign(_))
        ));
        let x = array![[1.0], [2.0]];
        let y1 = array![1.0];
        assert!(matches!(
            residual_ols(&x, &y1),
            Err(Error::ShapeMismatch(_))
        ));
        let x_fat = array![[1.0, 0.0]];
        let y_one = array![1.0];
        assert!(matches!(
            residual_ols(&x_fat, &y_one),
            Err(Error::OlsInfeasible { .. })
        ));
    }

    #[test]
    fn zero_epoch_network_reduces_to_centered_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 120;
        let z = Array2::from_shape_fn((n, 6), |_| rng.sample::<f64, _>(StandardNormal));
        let d = Array2::from_shape_fn((n, 1), |_| rng.sample::<f64, _>(StandardNormal) + 0.5);
        let y = &d.column(0) * 1.7
            + &Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal));
        let mut cfg = NnConfig::table2_default(5);
        cfg.width = 64;
        cfg.train.max_epochs = 0;
        cfg.train.early_stop = None;
        let est = plm_nn_fit(&d, &z, &y, &cfg).unwrap();
        let oracle = centered_ols(&d, &y);
        assert_abs_diff_eq!(est.beta_hat[0], oracle[0], epsilon = 1e-10);
    }

    #[test]
    fn duplicate_treatment_columns_error() {
        let ds = gen_table1(50, 6).unwrap();
        let d_dup = concatenate(Axis(1), &[ds.d.view(), ds.d.view()]).unwrap();
        let mut cfg = NnConfig::table2_default(0);
        cfg.width = 32;
        cfg.train.max_epochs = 0;
        cfg.train.early_stop = None;
        assert!(matches!(
            plm_nn_fit(&d_dup, &ds.z, &ds.y, &cfg),
            Err(Error::SingularDesign(_))
        ));
    }

    #[test]
    fn plm_nn_is_deterministic() {
        let ds = gen_complex(150, 7).unwrap();
        let mut cfg = NnConfig::table2_default(8);
        cfg.width = 128;
        cfg.train.max_epochs = 30;
        let a = plm_nn_fit(&ds.d, &ds.z, &ds.y, &cfg).unwrap();
        let b = plm_nn_fit(&ds.d, &ds.z, &ds.y, &cfg).unwrap();
        assert_eq!(a.beta_hat, b.beta_hat);
    }

    #[test]
    fn plm_nn_learns_on_complex_data() {
        // The trained network should estimate beta = 1 much better than
        // the constant-nuisance baseline on strongly confounded data.
        let ds = gen_complex(500, 9).unwrap();
        let mut cfg = NnConfig::table2_default(10);
        cfg.width = 256;
        cfg.train.learning_rate = 1e-3;
        cfg.train.max_epochs = 200;
        let est = plm_nn_fit(&ds.d, &ds.z, &ds.y, &cfg).unwrap();
        let baseline = plm_mean_fit(&ds.d, &ds.z, &ds.y).unwrap();
        let err_nn = (est.beta_hat[0] - 1.0).abs();
        let err_mean = (baseline.beta_hat[0] - 1.0).abs();
        assert!(
            err_nn < err_mean * 0.5,
            "nn error {err_nn} vs mean baseline {err_mean}"
        );
    }

    #[test]
    fn infinite_bandwidths_reduce_to_centered_ols() {
        let ds = gen_complex(100, 11).unwrap();
        let est = plm_nw_fit(&ds.d, &ds.z, &ds.y, f64::INFINITY, f64::INFINITY).unwrap();
        let oracle = centered_ols(&ds.d, &ds.y);
        assert_abs_diff_eq!(est.beta_hat[0], oracle[0], epsilon = 1e-10);
    }

    #[test]
    fn learner_agnostic_mean_reduction() {
        let ds = gen_complex(80, 12).unwrap();
        let nn = {
            let mut cfg = NnConfig::table2_default(13);
            cfg.width = 32;
            cfg.train.max_epochs = 0;
            cfg.train.early_stop = None;
            plm_nn_fit(&ds.d, &ds.z, &ds.y, &cfg).unwrap()
        };
        let nw = plm_nw_fit(&ds.d, &ds.z, &ds.y, f64::INFINITY, f64::INFINITY).unwrap();
        let mean = plm_mean_fit(&ds.d, &ds.z, &ds.y).unwrap();
        assert_abs_diff_eq!(nn.beta_hat[0], nw.beta_hat[0], epsilon = 1e-8);
        assert_abs_diff_eq!(nn.beta_hat[0], mean.beta_hat[0], epsilon = 1e-8);
        // Cross-fitting averages per-fold coefficients, so the global-mean
        // learner agrees statistically rather than to machine precision.
        let big = gen_complex(800, 12).unwrap();
        let pooled = plm_mean_fit(&big.d, &big.z, &big.y).unwrap();
        let dml = dml_fit(&big.d, &big.z, &big.y, &DmlLearner::Mean, 4, 14).unwrap();
        assert!(
            (dml.beta_hat[0] - pooled.beta_hat[0]).abs() < 0.05,
            "dml {} vs pooled {}",
            dml.beta_hat[0],
            pooled.beta_hat[0]
        );
    }

    #[test]
    fn plm_nw_single_point_errors() {
        let d = array![[1.0]];
        let z = array![[0.5, 0.5]];
        let y = array![2.0];
        assert!(plm_nw_fit(&d, &z, &y, 1.0, 1.0).is_err());
    }

    #[test]
    fn dml_mean_of_equal_folds_is_exact() {
        // Noiseless y = 2 D: every fold's residual OLS returns exactly 2.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let d = Array2::from_shape_fn((40, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let z = Array2::from_shape_fn((40, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let y = d.column(0).mapv(|v| 2.0 * v);
        let est = dml_fit(&d, &z, &y, &DmlLearner::Mean, 2, 16).unwrap();
        assert_abs_diff_eq!(est.beta_hat[0], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn dml_lasso_consistency_on_linear_truth() {
        let (d, z, y) = linear_plm(2000, 20, 1.5, 17);
        let est = dml_fit(&d, &z, &y, &DmlLearner::Lasso, DEFAULT_DML_FOLDS, 18).unwrap();
        let err = (est.beta_hat[0] - 1.5).powi(2);
        assert!(err <= 1e-2, "squared error {err}");
    }

    #[test]
    fn dml_is_deterministic_in_the_seed() {
        let (d, z, y) = linear_plm(300, 10, 1.0, 19);
        let a = dml_fit(&d, &z, &y, &DmlLearner::Lasso, 5, 20).unwrap();
        let b = dml_fit(&d, &z, &y, &DmlLearner::Lasso, 5, 20).unwrap();
        assert_eq!(a.beta_hat, b.beta_hat);
        let c = dml_fit(&d, &z, &y, &DmlLearner::Lasso, 5, 21).unwrap();
        assert_ne!(a.beta_hat, c.beta_hat);
    }

    #[test]
    fn dml_fold_assignment_is_row_order_invariant() {
        let (d, z, y) = linear_plm(120, 5, 1.0, 22);
        let assignment: Vec<usize> = (0..120).map(|i| i % 4).collect();
        let base = dml_fit_with_assignment(
            &d,
            &z,
            &y,
            &DmlLearner::Nw { h_y: 1.0, h_d: 1.0 },
            4,
            &assignment,
        )
        .unwrap();
        // Permute rows and carry the assignment along.
        let mut perm: Vec<usize> = (0..120).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for i in (1..120).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let d_p = d.select(Axis(0), &perm);
        let z_p = z.select(Axis(0), &perm);
        let y_p = y.select(Axis(0), &perm);
        let assignment_p: Vec<usize> = perm.iter().map(|&row| assignment[row]).collect();
        let permuted = dml_fit_with_assignment(
            &d_p,
            &z_p,
            &y_p,
            &DmlLearner::Nw { h_y: 1.0, h_d: 1.0 },
            4,
            &assignment_p,
        )
        .unwrap();
        assert_abs_diff_eq!(base.beta_hat[0], permuted.beta_hat[0], epsilon = 1e-10);
    }

    #[test]
    fn dml_rejects_bad_folds() {
        let (d, z, y) = linear_plm(20, 3, 1.0, 24);
        assert!(matches!(
            dml_fit(&d, &z, &y, &DmlLearner::Mean, 1, 0),
            Err(Error::InvalidParam(_))
        ));
        assert!(matches!(
            dml_fit(&d, &z, &y, &DmlLearner::Mean, 21, 0),
            Err(Error::InvalidSize(_))
        ));
        // 20 rows into 20 folds leaves single-row folds: too small for OLS.
        assert!(matches!(
            dml_fit(&d, &z, &y, &DmlLearner::Mean, 20, 0),
            Err(Error::FoldTooSmall { .. })
        ));
    }

    #[test]
    fn sqrt_n_consistency_across_sample_sizes() {
        let sizes = [500usize, 2000, 8000];
        let mut improved = 0;
        for seed in 0..20u64 {
            let mut errs = Vec::new();
            for (idx, &n) in sizes.iter().enumerate() {
                let (d, z, y) = linear_plm(n, 20, 1.5, 1000 + seed * 10 + idx as u64);
                let est = dml_fit(&d, &z, &y, &DmlLearner::Lasso, 5, seed).unwrap();
                errs.push((est.beta_hat[0] - 1.5).abs());
            }
            if errs[2] < errs[0] {
                improved += 1;
            }
        }
        assert!(improved >= 18, "error shrank from n=500 to n=8000 in {improved}/20 seeds");
    }

    #[test]
    fn predict_identity_on_training_rows() {
        let ds = gen_complex(100, 25).unwrap();
        let est = plm_nw_fit(&ds.d, &ds.z, &ds.y, 0.8, 0.8).unwrap();
        let pred = plm_predict(&est, &ds.d, &ds.z).unwrap();
        // y_hat = y - (Y_resid - X_resid beta) exactly.
        let recon = &ds.y - &(&est.y_resid - &est.x_resid.dot(&est.beta_hat));
        for (a, b) in pred.iter().zip(recon.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn predict_with_zero_beta_returns_m_y() {
        let ds = gen_complex(60, 26).unwrap();
        let mut est = plm_nw_fit(&ds.d, &ds.z, &ds.y, 1.0, 1.0).unwrap();
        est.beta_hat = array![0.0];
        let pred = plm_predict(&est, &ds.d, &ds.z).unwrap();
        let m_hat = est.nuisance.predict_m(&ds.z).unwrap();
        for (a, b) in pred.iter().zip(m_hat.column(0).iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let f = f_hat(&est, &ds.z).unwrap();
        for (a, b) in f.iter().zip(m_hat.column(0).iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn predict_at_nuisance_treatment_returns_m_y() {
        let ds = gen_complex(60, 27).unwrap();
        let est = plm_nw_fit(&ds.d, &ds.z, &ds.y, 1.0, 1.0).unwrap();
        let m_hat = est.nuisance.predict_m(&ds.z).unwrap();
        let d_at_mean = m_hat.slice(s![.., 1..]).to_owned();
        let pred = plm_predict(&est, &d_at_mean, &ds.z).unwrap();
        for (a, b) in pred.iter().zip(m_hat.column(0).iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn prediction_decomposes_into_f_hat_plus_treatment_effect() {
        let ds = gen_complex(80, 28).unwrap();
        let est = plm_nw_fit(&ds.d, &ds.z, &ds.y, 0.9, 0.9).unwrap();
        let pred = plm_predict(&est, &ds.d, &ds.z).unwrap();
        let f = f_hat(&est, &ds.z).unwrap();
        let direct = &f + &ds.d.dot(&est.beta_hat);
        for (a, b) in pred.iter().zip(direct.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn injected_perfect_nuisance_recovers_f_exactly() {
        struct PerfectNuisance {
            alpha: Array1<f64>,
            gamma: Array1<f64>,
            beta: f64,
        }
        impl NuisanceFn for PerfectNuisance {
            fn predict_m(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
                let m_d = z.dot(&self.alpha);
                let m_y = &z.dot(&self.gamma) + &(&m_d * self.beta);
                let mut out = Array2::zeros((z.nrows(), 2));
                out.column_mut(0).assign(&m_y);
                out.column_mut(1).assign(&m_d);
                Ok(out)
            }
            fn learner_tag(&self) -> LearnerTag {
                LearnerTag::Mean
            }
            fn fitted_on(&self) -> &[usize] {
                &[]
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let z = Array2::from_shape_fn((50, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let gamma = array![0.5, -0.2, 0.8, 0.1];
        let alpha = array![0.3, 0.3, -0.4, 0.0];
        let est = PlmEstimate {
            beta_hat: array![1.5],
            x_resid: Array2::zeros((50, 1)),
            y_resid: Array1::zeros(50),
            sigma2_hat: 0.0,
            cov_beta: Array2::zeros((1, 1)),
            nuisance: Box::new(PerfectNuisance {
                alpha,
                gamma: gamma.clone(),
                beta: 1.5,
            }),
        };
        let f = f_hat(&est, &z).unwrap();
        let truth = z.dot(&gamma);
        for (a, b) in f.iter().zip(truth.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn nuisance_bookkeeping_tags_and_rows() {
        let ds = gen_complex(40, 30).unwrap();
        let est = plm_nw_fit(&ds.d, &ds.z, &ds.y, 1.0, 1.0).unwrap();
        assert_eq!(est.nuisance.learner_tag(), LearnerTag::Nw);
        assert_eq!(est.nuisance.fitted_on().len(), 40);
        let dml = dml_fit(&ds.d, &ds.z, &ds.y, &DmlLearner::Mean, 4, 0).unwrap();
        assert_eq!(dml.nuisance.learner_tag(), LearnerTag::CrossFit);
    }
}
