//! Neural-tangent-kernel laboratory: empirical and infinite-width kernel
//! assembly, least-eigenvalue extraction, exponential-rate verification,
//! and lazy-training (weight drift) checks.
//!
//! For a ReLU network the empirical kernel between output s at row i and
//! output h at row j is
//! `(H_sh)_ij = (1/m) Z_i'Z_j sum_r A_rs A_rh I{Z_i'w_r >= 0, Z_j'w_r >= 0}`,
//! the Gram matrix of the per-output first-layer gradients. Its
//! infinite-width limit factorizes: diagonal blocks all equal
//! `H_inf_ij = Z_i'Z_j (pi - theta_ij) / (2 pi)` and off-diagonal blocks
//! vanish because the second-layer signs are independent across outputs.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::widenet::{forward_batch, Activation, TrainTrace, WideNet};

/// Densely solvable eigenproblem cap; larger matrices are rejected.
pub const MAX_EIGEN_SIZE: usize = 400;
/// Default decay-rate discount in [`verify_rate`].
pub const DEFAULT_RATE_RHO: f64 = 0.9;
/// Default multiplicative slack in [`verify_rate`].
pub const DEFAULT_RATE_SLACK: f64 = 1.5;
/// Default unspecified lemma constant in [`lazy_check`].
pub const DEFAULT_LEMMA_C: f64 = 1.0;
/// Default failure probability recorded in [`lazy_check`].
pub const DEFAULT_LEMMA_DELTA: f64 = 0.1;

/// Side-by-side empirical and limiting kernels with their summary gaps.
#[derive(Debug, Clone)]
pub struct NtkReport {
    /// Empirical kernel at the given network, n(1+p_L) square.
    pub h_whole: Array2<f64>,
    /// Block-diagonal infinite-width kernel, same shape.
    pub h_inf_whole: Array2<f64>,
    /// Least eigenvalue of the empirical kernel.
    pub lambda0_emp: f64,
    /// Least eigenvalue of the limiting kernel.
    pub lambda0_inf: f64,
    /// Frobenius gap between the two whole kernels.
    pub frob_gap: f64,
    /// Largest off-diagonal-block Frobenius norm of the empirical kernel.
    pub offdiag_norm: f64,
}

/// Weight-drift bound report.
#[derive(Debug, Clone)]
pub struct LazyReport {
    /// `sqrt(n)/(sqrt(m) lambda0) * sum_h ||M_h - u_h(0)||_2`.
    pub r_prime: f64,
    /// `c * delta * lambda0 / (n^2 (1+p_L)^2)`, informational only.
    pub r_lemma: f64,
    /// The unspecified constant used in `r_lemma`.
    pub c: f64,
    /// The failure probability used in `r_lemma`.
    pub delta: f64,
    /// Largest observed `max_r ||w_r(t) - w_r(0)||` over the trace.
    pub max_drift: f64,
    /// Whether `max_drift <= r_prime`.
    pub bound_satisfied: bool,
}

/// Exponential-rate verification outcome.
#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    pub rho: f64,
    pub slack: f64,
    /// Epochs where the bound `slack * exp(-rho lambda0 lr e) * loss0` failed.
    pub violations: usize,
    /// Largest violated epoch, if any.
    pub last_violation_epoch: Option<usize>,
    /// Fitted slope of log-loss against epoch.
    pub fitted_slope: f64,
    /// `fitted_slope / (-lambda0 * lr)`; 1 means the theoretical rate.
    pub slope_ratio: f64,
    /// True when no epoch violated the bound.
    pub passed: bool,
}

/// Infinite-width kernel plus hypothesis warnings.
#[derive(Debug, Clone)]
pub struct InfiniteKernel {
    pub h_inf_whole: Array2<f64>,
    /// Row pairs that are (anti-)parallel, violating the condition for a
    /// strictly positive least eigenvalue; a zero-norm row i appears as
    /// `(i, i)`.
    pub parallel_pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfMethod {
    ClosedForm,
    MonteCarlo { samples: usize, seed: u64 },
}

/// Per-width aggregate of the concentration sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub width: usize,
    pub mean_frob_gap: f64,
    pub mean_offdiag_norm: f64,
    pub mean_lambda0_emp: f64,
}

/// The empirical tangent kernel of `net` on `z`, assembled as the full
/// n(1+p_L) matrix of (1+p_L)^2 blocks.
pub fn ntk_empirical(net: &WideNet, z: &Array2<f64>) -> Result<Array2<f64>> {
    if net.activation != Activation::Relu {
        return Err(Error::UnsupportedKernel);
    }
    if z.ncols() != net.p_n() {
        return Err(Error::ShapeMismatch(format!(
            "Z has {} columns but the network expects p_N = {}",
            z.ncols(),
            net.p_n()
        )));
    }
    let n = z.nrows();
    let q = net.out_dim();
    let m = net.m as f64;
    let gram = z.dot(&z.t());
    let indicator = z.dot(&net.w).mapv(|v| if v >= 0.0 { 1.0 } else { 0.0 });
    let mut whole = Array2::zeros((n * q, n * q));
    for s_out in 0..q {
        let us = &indicator * &net.a.column(s_out);
        for h_out in s_out..q {
            let uh = &indicator * &net.a.column(h_out);
            let block = (&gram * &us.dot(&uh.t())) / m;
            whole
                .slice_mut(s![s_out * n..(s_out + 1) * n, h_out * n..(h_out + 1) * n])
                .assign(&block);
            if h_out != s_out {
                whole
                    .slice_mut(s![h_out * n..(h_out + 1) * n, s_out * n..(s_out + 1) * n])
                    .assign(&block.t());
            }
        }
    }
    Ok(whole)
}

/// One n x n infinite-width block, plus detection of (anti-)parallel rows.
fn infinite_block(z: &Array2<f64>, method: InfMethod) -> (Array2<f64>, Vec<(usize, usize)>) {
    let n = z.nrows();
    let gram = z.dot(&z.t());
    let norms: Vec<f64> = (0..n).map(|i| gram[[i, i]].sqrt()).collect();
    let mut parallel = Vec::new();
    for i in 0..n {
        if norms[i] == 0.0 {
            parallel.push((i, i));
        }
        for j in (i + 1)..n {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let cos = gram[[i, j]] / (norms[i] * norms[j]);
                if cos.abs() >= 1.0 - 1e-10 {
                    parallel.push((i, j));
                }
            }
        }
    }
    let block = match method {
        InfMethod::ClosedForm => {
            let mut h = Array2::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    if norms[i] == 0.0 || norms[j] == 0.0 {
                        continue;
                    }
                    let cos = (gram[[i, j]] / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                    let theta = cos.acos();
                    h[[i, j]] = gram[[i, j]] * (PI - theta) / (2.0 * PI);
                }
            }
            h
        }
        InfMethod::MonteCarlo { samples, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = z.ncols();
            let mut counts = Array2::<f64>::zeros((n, n));
            let mut w = vec![0.0f64; p];
            for _ in 0..samples {
                for v in w.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let active: Vec<usize> = (0..n)
                    .filter(|&i| {
                        z.row(i)
                            .iter()
                            .zip(&w)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            >= 0.0
                    })
                    .collect();
                for &i in &active {
                    for &j in &active {
                        counts[[i, j]] += 1.0;
                    }
                }
            }
            &gram * &(counts / samples as f64)
        }
    };
    (block, parallel)
}

/// The limiting kernel for `1 + p_l` outputs: identical diagonal blocks,
/// exactly zero off-diagonal blocks.
pub fn ntk_infinite(z: &Array2<f64>, p_l: usize, method: InfMethod) -> Result<InfiniteKernel> {
    let n = z.nrows();
    if n == 0 {
        return Err(Error::InvalidSize("Z has no rows".into()));
    }
    let (block, parallel_pairs) = infinite_block(z, method);
    let q = 1 + p_l;
    let mut whole = Array2::zeros((n * q, n * q));
    for b in 0..q {
        whole
            .slice_mut(s![b * n..(b + 1) * n, b * n..(b + 1) * n])
            .assign(&block);
    }
    Ok(InfiniteKernel {
        h_inf_whole: whole,
        parallel_pairs,
    })
}

/// Smallest eigenvalue of a symmetric matrix (dense solve, size-capped).
pub fn least_eigenvalue(h: &Array2<f64>) -> Result<f64> {
    let n = h.nrows();
    if h.ncols() != n {
        return Err(Error::InvalidMatrix(format!(
            "matrix is {}x{}, not square",
            n,
            h.ncols()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidMatrix("matrix is empty".into()));
    }
    if n > MAX_EIGEN_SIZE {
        return Err(Error::InvalidSize(format!(
            "matrix side {n} exceeds the dense-eigensolver cap {MAX_EIGEN_SIZE}"
        )));
    }
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((h[[i, j]] - h[[j, i]]).abs());
        }
    }
    if worst > 1e-8 {
        return Err(Error::InvalidMatrix(format!(
            "asymmetry {worst:.3e} exceeds 1e-8"
        )));
    }
    let sym = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (h[[i, j]] + h[[j, i]]));
    let eig = sym.symmetric_eigen();
    Ok(eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// Largest off-diagonal-block Frobenius norm of an n*q square kernel.
pub fn offdiag_block_norm(whole: &Array2<f64>, n: usize, q: usize) -> f64 {
    let mut worst = 0.0f64;
    for s_out in 0..q {
        for h_out in 0..q {
            if s_out == h_out {
                continue;
            }
            let block = whole.slice(s![
                s_out * n..(s_out + 1) * n,
                h_out * n..(h_out + 1) * n
            ]);
            worst = worst.max(block.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    worst
}

/// Assemble the full side-by-side report for one network and input set.
pub fn ntk_report(net: &WideNet, z: &Array2<f64>) -> Result<NtkReport> {
    let n = z.nrows();
    let q = net.out_dim();
    let h_whole = ntk_empirical(net, z)?;
    let inf = ntk_infinite(z, q - 1, InfMethod::ClosedForm)?;
    let lambda0_emp = least_eigenvalue(&h_whole)?;
    let lambda0_inf = least_eigenvalue(&inf.h_inf_whole.slice(s![..n, ..n]).to_owned())?;
    let diff = &h_whole - &inf.h_inf_whole;
    let frob_gap = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let offdiag_norm = offdiag_block_norm(&h_whole, n, q);
    Ok(NtkReport {
        h_whole,
        h_inf_whole: inf.h_inf_whole,
        lambda0_emp,
        lambda0_inf,
        frob_gap,
        offdiag_norm,
    })
}

/// Ordinary least-squares line through `points`; returns
/// `(slope, intercept, r_squared)`, or None with fewer than two points.
pub fn linear_fit(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in points {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res = syy - slope * sxy;
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Some((slope, intercept, r2))
}

/// Check a training trace against the exponential decay
/// `loss(e) <= slack * exp(-rho lambda0 lr e) * loss(0)` with the default
/// rho and slack, and fit the empirical log-loss slope.
pub fn verify_rate(
    trace: &TrainTrace,
    lambda0: f64,
    lr: f64,
    per_output_initial: &[f64],
) -> RateReport {
    verify_rate_with(
        trace,
        lambda0,
        lr,
        per_output_initial,
        DEFAULT_RATE_RHO,
        DEFAULT_RATE_SLACK,
    )
}

/// [`verify_rate`] with explicit discount and slack.
pub fn verify_rate_with(
    trace: &TrainTrace,
    lambda0: f64,
    lr: f64,
    per_output_initial: &[f64],
    rho: f64,
    slack: f64,
) -> RateReport {
    let losses = &trace.loss_per_epoch;
    // The theorem's right side sums the per-output initial residual norms;
    // fall back to the recorded initial loss when they are not supplied.
    let loss0 = if per_output_initial.is_empty() {
        losses[0]
    } else {
        0.5 * per_output_initial.iter().map(|v| v * v).sum::<f64>()
    };
    let mut violations = 0;
    let mut last_violation_epoch = None;
    for (epoch, &value) in losses.iter().enumerate().skip(1) {
        let bound = slack * (-rho * lambda0 * lr * epoch as f64).exp() * loss0;
        if value > bound {
            violations += 1;
            last_violation_epoch = Some(epoch);
        }
    }
    // Fit the decay slope over the decade below loss0/10, where the slowest
    // kernel mode dominates; fall back to the full positive trace.
    let window: Vec<(f64, f64)> = losses
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0 && v <= loss0 / 10.0 && v >= loss0 / 100.0)
        .map(|(e, &v)| (e as f64, v.ln()))
        .collect();
    let points = if window.len() >= 3 {
        window
    } else {
        losses
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(e, &v)| (e as f64, v.ln()))
            .collect()
    };
    let fitted_slope = linear_fit(&points).map(|(s, _, _)| s).unwrap_or(0.0);
    let slope_ratio = if lambda0 * lr != 0.0 {
        fitted_slope / (-lambda0 * lr)
    } else {
        f64::NAN
    };
    RateReport {
        rho,
        slack,
        violations,
        last_violation_epoch,
        fitted_slope,
        slope_ratio,
        passed: violations == 0,
    }
}

/// Compare the observed first-layer drift against the lazy-training radius
/// `R' = sqrt(n)/(sqrt(m) lambda0) * sum_h ||M_h - u_h(0)||_2`.
pub fn lazy_check(
    trace: &TrainTrace,
    net0: &WideNet,
    z: &Array2<f64>,
    m_targets: &Array2<f64>,
    lambda0: f64,
) -> Result<LazyReport> {
    lazy_check_with(
        trace,
        net0,
        z,
        m_targets,
        lambda0,
        DEFAULT_LEMMA_C,
        DEFAULT_LEMMA_DELTA,
    )
}

/// [`lazy_check`] with an explicit lemma constant and failure probability.
pub fn lazy_check_with(
    trace: &TrainTrace,
    net0: &WideNet,
    z: &Array2<f64>,
    m_targets: &Array2<f64>,
    lambda0: f64,
    c: f64,
    delta: f64,
) -> Result<LazyReport> {
    if !(lambda0 > 0.0) {
        return Err(Error::InvalidParam(format!(
            "lambda0 must be positive, got {lambda0}"
        )));
    }
    let n = z.nrows();
    let q = m_targets.ncols();
    let u0 = forward_batch(net0, z)?;
    if u0.dim() != m_targets.dim() {
        return Err(Error::ShapeMismatch(format!(
            "targets are {}x{} but the network emits {}x{}",
            m_targets.nrows(),
            q,
            u0.nrows(),
            u0.ncols()
        )));
    }
    let mut residual_norm_sum = 0.0;
    for h in 0..q {
        let diff = &m_targets.column(h) - &u0.column(h);
        residual_norm_sum += diff.dot(&diff).sqrt();
    }
    let r_prime = (n as f64).sqrt() / ((net0.m as f64).sqrt() * lambda0) * residual_norm_sum;
    let r_lemma = c * delta * lambda0 / ((n * n) as f64 * (q * q) as f64);
    let max_drift = trace
        .weight_drift_per_epoch
        .iter()
        .cloned()
        .fold(0.0, f64::max);
    Ok(LazyReport {
        r_prime,
        r_lemma,
        c,
        delta,
        max_drift,
        bound_satisfied: max_drift <= r_prime,
    })
}

/// For each width, average the kernel-gap diagnostics over fresh seeds.
/// The limiting kernel is computed once; networks use seeds
/// `base_seed + width_index * seeds_per_width + seed_index`.
pub fn concentration_sweep(
    z: &Array2<f64>,
    p_l: usize,
    widths: &[usize],
    seeds_per_width: usize,
    base_seed: u64,
) -> Result<Vec<SweepRow>> {
    if widths.is_empty() {
        return Err(Error::InvalidParam("widths list is empty".into()));
    }
    if widths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParam("widths must be strictly ascending".into()));
    }
    if seeds_per_width == 0 {
        return Err(Error::InvalidParam("seeds_per_width must be at least 1".into()));
    }
    let n = z.nrows();
    let q = 1 + p_l;
    let inf = ntk_infinite(z, p_l, InfMethod::ClosedForm)?;
    let mut rows = Vec::with_capacity(widths.len());
    for (w_idx, &width) in widths.iter().enumerate() {
        let mut gap_sum = 0.0;
        let mut offdiag_sum = 0.0;
        let mut lambda_sum = 0.0;
        for s_idx in 0..seeds_per_width {
            let seed = base_seed + (w_idx * seeds_per_width + s_idx) as u64;
            let net = crate::widenet::init_network(z.ncols(), width, p_l, Activation::Relu, seed)?;
            let h_whole = ntk_empirical(&net, z)?;
            let diff = &h_whole - &inf.h_inf_whole;
            gap_sum += diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            offdiag_sum += offdiag_block_norm(&h_whole, n, q);
            lambda_sum += least_eigenvalue(&h_whole)?;
        }
        let denom = seeds_per_width as f64;
        rows.push(SweepRow {
            width,
            mean_frob_gap: gap_sum / denom,
            mean_offdiag_norm: offdiag_sum / denom,
            mean_lambda0_emp: lambda_sum / denom,
        });
    }
    Ok(rows)
}
