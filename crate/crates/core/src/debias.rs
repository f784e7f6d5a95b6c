//! Debiasing after feature selection.
//!
//! The headline pipeline selects features with the Lasso, treats the
//! selected block as the parametric part of a partially linear model,
//! learns the de-selected block's influence with the over-parameterized
//! network, and reads inference off the residualized OLS. Baselines:
//! plain OLS on the selected columns, the nodewise-regression debiased
//! Lasso that corrects every coordinate, and a kernel-regression variant
//! of the pipeline. A separate correction handles measurement error in
//! the residualized design with known error variances.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plm::{
    plm_nn_fit, plm_nw_fit, residual_ols, NnConfig, PlmEstimate, ZeroNuisance,
};
use crate::selection::{
    lasso_fit, split_by_indices, LassoFit, Selector, DEFAULT_MAX_SWEEPS, DEFAULT_TOL,
};

/// Confidence level used by the fitters; custom levels go through
/// [`confidence_intervals`].
pub const DEFAULT_CI_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebiasMethod {
    Debinet,
    OlsPost,
    DebiasedLasso,
    NwPost,
}

impl std::fmt::Display for DebiasMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            DebiasMethod::Debinet => "debinet",
            DebiasMethod::OlsPost => "ols_post",
            DebiasMethod::DebiasedLasso => "debiased_lasso",
            DebiasMethod::NwPost => "nw_post",
        };
        f.write_str(name)
    }
}

/// Output of one debiasing method on one dataset.
#[derive(Debug, Clone, Serialize)]
pub struct DebiasResult {
    pub method: DebiasMethod,
    /// Coefficients scattered back into the original p coordinates.
    /// Active-set methods leave zeros off the active set; the debiased
    /// Lasso corrects every coordinate, so all p entries are populated.
    pub theta_full: Array1<f64>,
    /// Coefficients on the active set, in ascending index order.
    pub beta_hat: Array1<f64>,
    pub ci_low: Array1<f64>,
    pub ci_high: Array1<f64>,
    pub active_set: Vec<usize>,
}

fn scatter(p: usize, s: &[usize], beta: &Array1<f64>) -> Array1<f64> {
    let mut full = Array1::zeros(p);
    for (slot, &j) in s.iter().enumerate() {
        full[j] = beta[slot];
    }
    full
}

fn zero_nuisance_estimate(d: &Array2<f64>, y: &Array1<f64>) -> Result<PlmEstimate> {
    let (beta_hat, sigma2_hat, cov_beta) = residual_ols(d, y)?;
    Ok(PlmEstimate {
        beta_hat,
        x_resid: d.clone(),
        y_resid: y.clone(),
        sigma2_hat,
        cov_beta,
        nuisance: Box::new(ZeroNuisance {
            out_dim: 1 + d.ncols(),
        }),
    })
}

fn result_from_estimate(
    method: DebiasMethod,
    p: usize,
    s: Vec<usize>,
    est: &PlmEstimate,
) -> Result<DebiasResult> {
    let (ci_low, ci_high) = confidence_intervals(&est.beta_hat, &est.cov_beta, DEFAULT_CI_LEVEL)?;
    Ok(DebiasResult {
        method,
        theta_full: scatter(p, &s, &est.beta_hat),
        beta_hat: est.beta_hat.clone(),
        ci_low,
        ci_high,
        active_set: s,
    })
}

/// Select, partition, learn the de-selected block with the network
/// learner, and report the residualized OLS with its intervals. When the
/// selector keeps every column there is nothing left to learn and the
/// nuisance is zero by convention, collapsing the pipeline to plain OLS.
pub fn debinet_fit<S: Selector + ?Sized>(
    x: &Array2<f64>,
    y: &Array1<f64>,
    selector: &S,
    nn_cfg: &NnConfig,
) -> Result<DebiasResult> {
    Ok(debinet_fit_full(x, y, selector, nn_cfg)?.0)
}

/// [`debinet_fit`] plus the underlying estimate, for callers that need
/// to predict on held-out rows.
pub fn debinet_fit_full<S: Selector + ?Sized>(
    x: &Array2<f64>,
    y: &Array1<f64>,
    selector: &S,
    nn_cfg: &NnConfig,
) -> Result<(DebiasResult, PlmEstimate)> {
    let s = selector.select(x, y)?;
    let split = split_by_indices(x, &s)?;
    let est = if split.p_n == 0 {
        zero_nuisance_estimate(&split.d, y)?
    } else {
        plm_nn_fit(&split.d, &split.z, y, nn_cfg)?
    };
    let result = result_from_estimate(DebiasMethod::Debinet, x.ncols(), split.s, &est)?;
    Ok((result, est))
}

/// OLS of y on the selected columns, intercept excluded.
pub fn ols_post(x: &Array2<f64>, y: &Array1<f64>, s: &[usize]) -> Result<DebiasResult> {
    let split = split_by_indices(x, s)?;
    let est = zero_nuisance_estimate(&split.d, y)?;
    result_from_estimate(DebiasMethod::OlsPost, x.ncols(), split.s, &est)
}

/// The kernel-regression variant: partition, fit the de-selected block
/// by kernel regression at the given bandwidths, residualized OLS, CIs.
pub fn nw_post(
    x: &Array2<f64>,
    y: &Array1<f64>,
    s: &[usize],
    h_y: f64,
    h_d: f64,
) -> Result<DebiasResult> {
    Ok(nw_post_full(x, y, s, h_y, h_d)?.0)
}

/// [`nw_post`] plus the underlying estimate.
pub fn nw_post_full(
    x: &Array2<f64>,
    y: &Array1<f64>,
    s: &[usize],
    h_y: f64,
    h_d: f64,
) -> Result<(DebiasResult, PlmEstimate)> {
    let split = split_by_indices(x, s)?;
    let est = if split.p_n == 0 {
        zero_nuisance_estimate(&split.d, y)?
    } else {
        plm_nw_fit(&split.d, &split.z, y, h_y, h_d)?
    };
    let result = result_from_estimate(DebiasMethod::NwPost, x.ncols(), split.s, &est)?;
    Ok((result, est))
}

/// The conventional nodewise penalty: `sqrt(2 log p / n)` on the
/// per-sample objective scale.
pub fn default_nodewise_lambda(n: usize, p: usize) -> f64 {
    (2.0 * (p as f64).ln() / n as f64).sqrt()
}

/// Debias every coordinate of a Lasso fit via nodewise regressions.
///
/// Each column is regressed on the others with penalty
/// `lambda_node * n * (||X_j|| / sqrt(n))` on this crate's unnormalized
/// objective, i.e. `lambda_node` itself lives on the per-sample scale.
/// The relaxed-inverse rows are `1/tau_j^2` on the diagonal and
/// `-gamma_jk/tau_j^2` off it, with
/// `tau_j^2 = ||X_j - X_{-j} gamma_j||^2 / n + lambda_j ||gamma_j||_1 / n`.
/// The corrected vector is `theta + Theta X'(y - X theta)/n`, and interval
/// widths come from `sigma_eps^2 * (Theta Sigma Theta')_jj / n`.
pub fn debiased_lasso(
    x: &Array2<f64>,
    y: &Array1<f64>,
    fit: &LassoFit,
    lambda_node: f64,
) -> Result<DebiasResult> {
    let (n, p) = x.dim();
    if y.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "X has {n} rows but y has {}",
            y.len()
        )));
    }
    if fit.theta.len() != p {
        return Err(Error::ShapeMismatch(format!(
            "fit has {} coefficients but X has {p} columns",
            fit.theta.len()
        )));
    }
    if !(lambda_node > 0.0) || !lambda_node.is_finite() {
        return Err(Error::InvalidParam(format!(
            "lambda_node must be positive and finite, got {lambda_node}"
        )));
    }
    if n < 2 || p == 0 {
        return Err(Error::InvalidSize(format!("degenerate design {n}x{p}")));
    }

    let sigma = x.t().dot(x) / n as f64;
    let mut theta_rows = Array2::zeros((p, p));
    for j in 0..p {
        let target = x.column(j).to_owned();
        let norm_j = target.dot(&target).sqrt();
        if norm_j < 1e-12 {
            return Err(Error::Nodewise {
                col: j,
                source: Box::new(Error::SingularDesign("zero column".into())),
            });
        }
        let others: Vec<usize> = (0..p).filter(|&k| k != j).collect();
        let design = x.select(Axis(1), &others);
        let lambda_j = lambda_node * (n as f64).sqrt() * norm_j;
        let gamma = lasso_fit(&design, &target, lambda_j, DEFAULT_TOL, DEFAULT_MAX_SWEEPS)
            .map_err(|e| Error::Nodewise {
                col: j,
                source: Box::new(e),
            })?;
        let resid = &target - &design.dot(&gamma.theta);
        let l1 = gamma.theta.iter().map(|v| v.abs()).sum::<f64>();
        let tau2 = resid.dot(&resid) / n as f64 + lambda_j * l1 / n as f64;
        if tau2 <= 1e-12 {
            return Err(Error::Nodewise {
                col: j,
                source: Box::new(Error::SingularDesign(
                    "degenerate nodewise residual variance".into(),
                )),
            });
        }
        theta_rows[[j, j]] = 1.0 / tau2;
        for (slot, &k) in others.iter().enumerate() {
            theta_rows[[j, k]] = -gamma.theta[slot] / tau2;
        }
    }

    let resid = y - &x.dot(&fit.theta);
    let score = x.t().dot(&resid) / n as f64;
    let corrected = &fit.theta + &theta_rows.dot(&score);

    let dof = (n - fit.active_set.len().min(n - 1)).max(1);
    let sigma_eps2 = resid.dot(&resid) / dof as f64;
    let omega = theta_rows.dot(&sigma).dot(&theta_rows.t());

    let s = fit.active_set.clone();
    let beta_hat = Array1::from_iter(s.iter().map(|&j| corrected[j]));
    let z = normal_quantile((1.0 + DEFAULT_CI_LEVEL) / 2.0)?;
    let half: Array1<f64> = Array1::from_iter(
        s.iter()
            .map(|&j| z * (sigma_eps2 * omega[[j, j]].max(0.0) / n as f64).sqrt()),
    );
    Ok(DebiasResult {
        method: DebiasMethod::DebiasedLasso,
        theta_full: corrected,
        ci_low: &beta_hat - &half,
        ci_high: &beta_hat + &half,
        beta_hat,
        active_set: s,
    })
}

/// Inverse standard normal CDF (Acklam's rational approximation,
/// relative error below 1.2e-9).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParam(format!(
            "quantile probability must lie in (0, 1), got {p}"
        )));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    let tail = |p: f64| -> f64 {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < P_LOW {
        tail(p)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail(1.0 - p)
    };
    Ok(x)
}

/// Two-sided normal confidence intervals `beta_j ± z sqrt(cov_jj)`.
pub fn confidence_intervals(
    beta_hat: &Array1<f64>,
    cov_beta: &Array2<f64>,
    level: f64,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParam(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let p_l = beta_hat.len();
    if cov_beta.dim() != (p_l, p_l) {
        return Err(Error::ShapeMismatch(format!(
            "covariance is {:?} but beta has {p_l} entries",
            cov_beta.dim()
        )));
    }
    let z = normal_quantile((1.0 + level) / 2.0)?;
    let mut low = Array1::zeros(p_l);
    let mut high = Array1::zeros(p_l);
    for j in 0..p_l {
        let var = cov_beta[[j, j]];
        if var < -1e-12 {
            return Err(Error::InvalidMatrix(format!(
                "negative variance {var:.3e} at coordinate {j}"
            )));
        }
        let half = z * var.max(0.0).sqrt();
        low[j] = beta_hat[j] - half;
        high[j] = beta_hat[j] + half;
    }
    Ok((low, high))
}

/// Pooled fraction of (replicate, coordinate) pairs whose interval covers
/// the true coefficient. Each replicate supplies the truth restricted to
/// its own active set.
pub fn coverage(results: &[DebiasResult], beta_true: &[Array1<f64>]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyReplicates);
    }
    if results.len() != beta_true.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} results but {} truth vectors",
            results.len(),
            beta_true.len()
        )));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (res, truth) in results.iter().zip(beta_true) {
        if truth.len() != res.beta_hat.len() {
            return Err(Error::ShapeMismatch(format!(
                "replicate has {} active coordinates but truth has {}",
                res.beta_hat.len(),
                truth.len()
            )));
        }
        for (j, &t) in truth.iter().enumerate() {
            total += 1;
            if res.ci_low[j] <= t && t <= res.ci_high[j] {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyReplicates);
    }
    Ok(hits as f64 / total as f64)
}

/// Measurement-error correction report.
#[derive(Debug, Clone)]
pub struct CorrectionReport {
    pub sigma_x2: f64,
    pub sigma_y2: f64,
    pub sigma_eps2: f64,
    /// `R = sigma_X^2 (X~'X~/n)^{-1}`.
    pub r_mat: Array2<f64>,
    /// `(I - R)^{-1} beta_tilde`.
    pub beta_corrected: Array1<f64>,
    /// Estimate of the noiseless second-moment matrix: `X~'X~/n - sigma_X^2 I`.
    pub q_hat: Array2<f64>,
    /// `((sigma_eps^2 + sigma_Y^2)/sigma_X^2) R`; undefined when
    /// `sigma_X^2 = 0`.
    pub asym_cov: Option<Array2<f64>>,
}

impl CorrectionReport {
    pub fn asymptotic_covariance(&self) -> Result<&Array2<f64>> {
        self.asym_cov.as_ref().ok_or(Error::UndefinedVariance)
    }
}

fn symmetric_inverse(m: &Array2<f64>, context: &str, scale_floor: f64) -> Result<Array2<f64>> {
    let p = m.nrows();
    let sym = nalgebra::DMatrix::from_fn(p, p, |i, j| 0.5 * (m[[i, j]] + m[[j, i]]));
    let eig = sym.symmetric_eigen();
    let max_abs = eig
        .eigenvalues
        .iter()
        .map(|v| v.abs())
        .fold(0.0f64, f64::max);
    // The floor keeps matrices that are numerically zero on a known unit
    // scale (like I - R at R = I) from passing a purely relative test.
    let threshold = 1e-12 * max_abs.max(scale_floor);
    if max_abs == 0.0 || eig.eigenvalues.iter().any(|v| v.abs() <= threshold) {
        return Err(Error::SingularDesign(format!("{context} is singular")));
    }
    let mut inv = Array2::zeros((p, p));
    for i in 0..p {
        for j in i..p {
            let mut acc = 0.0;
            for k in 0..p {
                acc += eig.eigenvectors[(i, k)] * eig.eigenvectors[(j, k)] / eig.eigenvalues[k];
            }
            inv[[i, j]] = acc;
            inv[[j, i]] = acc;
        }
    }
    Ok(inv)
}

/// Correct a residualized estimate for additive measurement error with
/// known variances: `R = sigma_X^2 (X~'X~/n)^{-1}`, corrected estimator
/// `(I - R)^{-1} beta_tilde`, asymptotic covariance
/// `((sigma_eps^2 + sigma_Y^2)/sigma_X^2) R` when `sigma_X^2 > 0`.
pub fn measurement_correct(
    beta_tilde: &Array1<f64>,
    x_tilde_resid: &Array2<f64>,
    sigma_x2: f64,
    sigma_y2: f64,
    sigma_eps2: f64,
) -> Result<CorrectionReport> {
    let (n, p_l) = x_tilde_resid.dim();
    if beta_tilde.len() != p_l {
        return Err(Error::ShapeMismatch(format!(
            "beta has {} entries but X~ has {p_l} columns",
            beta_tilde.len()
        )));
    }
    if n == 0 || p_l == 0 {
        return Err(Error::InvalidSize(format!("degenerate design {n}x{p_l}")));
    }
    for (name, v) in [
        ("sigma_X^2", sigma_x2),
        ("sigma_Y^2", sigma_y2),
        ("sigma_eps^2", sigma_eps2),
    ] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::InvalidParam(format!(
                "{name} must be a finite nonnegative real, got {v}"
            )));
        }
    }
    let s_n = x_tilde_resid.t().dot(x_tilde_resid) / n as f64;
    let s_inv = symmetric_inverse(&s_n, "X~'X~/n", 0.0)?;
    let mut q_hat = s_n.clone();
    for j in 0..p_l {
        q_hat[[j, j]] -= sigma_x2;
    }
    if sigma_x2 == 0.0 {
        // Exactly no correction: R = 0 and the estimate passes through.
        return Ok(CorrectionReport {
            sigma_x2,
            sigma_y2,
            sigma_eps2,
            r_mat: Array2::zeros((p_l, p_l)),
            beta_corrected: beta_tilde.clone(),
            q_hat,
            asym_cov: None,
        });
    }
    let r_mat = &s_inv * sigma_x2;
    let mut i_minus_r = -&r_mat;
    for j in 0..p_l {
        i_minus_r[[j, j]] += 1.0;
    }
    let inv =
        symmetric_inverse(&i_minus_r, "I - R", 1.0).map_err(|_| Error::NonCorrectable)?;
    let beta_corrected = inv.dot(beta_tilde);
    let asym_cov = Some(&r_mat * ((sigma_eps2 + sigma_y2) / sigma_x2));
    Ok(CorrectionReport {
        sigma_x2,
        sigma_y2,
        sigma_eps2,
        r_mat,
        beta_corrected,
        q_hat,
        asym_cov,
    })
}
