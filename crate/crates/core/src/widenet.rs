//! Over-parameterized two-layer network with multivariate output, the
//! joint nuisance learner for the partially linear model.
//!
//! The network is `F(W, A, z) = (1/sqrt(m)) * sum_r A_r sigma(w_r' z)` with
//! first-layer weights drawn i.i.d. standard normal and second-layer signs
//! drawn uniformly from {-1, +1}. Training minimizes the summed per-row loss
//! `sum_i 0.5 * ||F(Z_i) - M_i||^2` (or its Huber variant) with one of four
//! optimizers, optional early stopping on a held-out slice, and an optional
//! frozen second layer. The trace records the full-data loss and the maximum
//! first-layer weight drift from initialization at every epoch, the two
//! quantities the tangent-kernel checks consume.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HUBER_DELTA: f64 = 1.0;
pub const DEFAULT_LEAKY_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { alpha: f64 },
    Tanh,
}

impl Activation {
    pub fn leaky_default() -> Self {
        Activation::LeakyRelu {
            alpha: DEFAULT_LEAKY_ALPHA,
        }
    }

    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { alpha } => {
                if x >= 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative, with the kink convention sigma'(0) = 1 for (leaky) ReLU.
    fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { alpha } => {
                if x >= 0.0 {
                    1.0
                } else {
                    *alpha
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Gd,
    Sgd { batch: usize },
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Nesterov { momentum: f64 },
}

impl Optimizer {
    pub fn adam_default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    Huber { delta: f64 },
}

impl Loss {
    pub fn huber_default() -> Self {
        Loss::Huber {
            delta: DEFAULT_HUBER_DELTA,
        }
    }

    /// Per-component loss contribution for residual `e`.
    fn value(&self, e: f64) -> f64 {
        match self {
            Loss::Mse => 0.5 * e * e,
            Loss::Huber { delta } => {
                if e.abs() <= *delta {
                    0.5 * e * e
                } else {
                    delta * (e.abs() - 0.5 * delta)
                }
            }
        }
    }

    /// d(loss)/de at residual `e`.
    fn grad(&self, e: f64) -> f64 {
        match self {
            Loss::Mse => e,
            Loss::Huber { delta } => e.clamp(-*delta, *delta),
        }
    }
}

/// Validation hold-out rule for early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    /// Fraction of rows held out, in (0, 0.5].
    pub val_fraction: f64,
    /// Epochs tolerated without sufficient improvement before stopping.
    pub patience: usize,
    /// Relative validation-loss improvement that counts as progress.
    pub min_rel_improve: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            patience: 20,
            min_rel_improve: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub loss: Loss,
    pub early_stop: Option<EarlyStop>,
    pub freeze_second_layer: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Practical joint-training default: full-batch Adam at lr 2e-4 with
    /// early stopping, both layers trained.
    pub fn practical_default(max_epochs: usize, seed: u64) -> Self {
        Self {
            optimizer: Optimizer::adam_default(),
            learning_rate: 2e-4,
            max_epochs,
            loss: Loss::Mse,
            early_stop: Some(EarlyStop::default()),
            freeze_second_layer: false,
            seed,
        }
    }

    /// Config for tangent-kernel verification runs: plain full-batch
    /// gradient descent at lr 0.01, second layer frozen, no early stop.
    pub fn ntk_verification(max_epochs: usize, seed: u64) -> Self {
        Self {
            optimizer: Optimizer::Gd,
            learning_rate: 0.01,
            max_epochs,
            loss: Loss::Mse,
            early_stop: None,
            freeze_second_layer: true,
            seed,
        }
    }
}

/// The two-layer network. `w` column r is the r-th hidden unit's weight
/// vector; `a` row r holds that unit's output signs.
#[derive(Debug, Clone)]
pub struct WideNet {
    /// p_N x m first-layer weights.
    pub w: Array2<f64>,
    /// m x (1 + p_L) second-layer signs, +-1 at initialization.
    pub a: Array2<f64>,
    pub m: usize,
    pub activation: Activation,
    pub train_second_layer: bool,
}

impl WideNet {
    pub fn p_n(&self) -> usize {
        self.w.nrows()
    }

    /// Output dimension 1 + p_L.
    pub fn out_dim(&self) -> usize {
        self.a.ncols()
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    /// Full-data loss; entry 0 is the pre-training loss.
    pub loss_per_epoch: Vec<f64>,
    /// `max_r ||w_r(t) - w_r(0)||_2`; entry 0 is 0.
    pub weight_drift_per_epoch: Vec<f64>,
    /// Epoch whose weights the returned network carries.
    pub best_epoch: usize,
}

/// Draw a fresh network: `w_r ~ N(0, I)`, `A_rs ~ unif{-1, +1}`,
/// output dimension `1 + p_l`.
pub fn init_network(
    p_n: usize,
    m: usize,
    p_l: usize,
    activation: Activation,
    seed: u64,
) -> Result<WideNet> {
    if m == 0 {
        return Err(Error::InvalidWidth);
    }
    if p_n == 0 {
        return Err(Error::InvalidSize("p_N must be at least 1".into()));
    }
    let mut w_rng = ChaCha8Rng::seed_from_u64(seed);
    w_rng.set_stream(0);
    let w = Array2::from_shape_fn((p_n, m), |_| w_rng.sample(StandardNormal));
    let mut a_rng = ChaCha8Rng::seed_from_u64(seed);
    a_rng.set_stream(1);
    let a = Array2::from_shape_fn((m, 1 + p_l), |_| {
        if a_rng.gen::<bool>() {
            1.0
        } else {
            -1.0
        }
    });
    Ok(WideNet {
        w,
        a,
        m,
        activation,
        train_second_layer: true,
    })
}

fn check_data_shapes(net: &WideNet, z: &Array2<f64>, m_targets: &Array2<f64>) -> Result<()> {
    if z.ncols() != net.p_n() {
        return Err(Error::ShapeMismatch(format!(
            "Z has {} columns but the network expects p_N = {}",
            z.ncols(),
            net.p_n()
        )));
    }
    if m_targets.nrows() != z.nrows() || m_targets.ncols() != net.out_dim() {
        return Err(Error::ShapeMismatch(format!(
            "targets are {}x{} but expected {}x{}",
            m_targets.nrows(),
            m_targets.ncols(),
            z.nrows(),
            net.out_dim()
        )));
    }
    Ok(())
}

/// Network output for a single input row.
pub fn forward(net: &WideNet, z: &Array1<f64>) -> Result<Array1<f64>> {
    if z.len() != net.p_n() {
        return Err(Error::ShapeMismatch(format!(
            "input has length {} but the network expects p_N = {}",
            z.len(),
            net.p_n()
        )));
    }
    let pre = net.w.t().dot(z);
    let act = pre.mapv(|x| net.activation.apply(x));
    Ok(net.a.t().dot(&act) / (net.m as f64).sqrt())
}

/// Network outputs for every row of `z`, shape n x (1 + p_L).
pub fn forward_batch(net: &WideNet, z: &Array2<f64>) -> Result<Array2<f64>> {
    if z.ncols() != net.p_n() {
        return Err(Error::ShapeMismatch(format!(
            "Z has {} columns but the network expects p_N = {}",
            z.ncols(),
            net.p_n()
        )));
    }
    let act = z.dot(&net.w).mapv(|x| net.activation.apply(x));
    Ok(act.dot(&net.a) / (net.m as f64).sqrt())
}

/// Summed squared-error objective `sum_i 0.5 * ||F(Z_i) - M_i||^2`.
pub fn loss(net: &WideNet, z: &Array2<f64>, m_targets: &Array2<f64>) -> Result<f64> {
    loss_with(net, z, m_targets, &Loss::Mse)
}

/// The training objective under an arbitrary per-component loss.
pub fn loss_with(
    net: &WideNet,
    z: &Array2<f64>,
    m_targets: &Array2<f64>,
    loss: &Loss,
) -> Result<f64> {
    check_data_shapes(net, z, m_targets)?;
    let pred = forward_batch(net, z)?;
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(m_targets.iter()) {
        total += loss.value(p - t);
    }
    Ok(total)
}

/// First-layer gradient dL/dW under squared error, shape p_N x m.
pub fn gradient(net: &WideNet, z: &Array2<f64>, m_targets: &Array2<f64>) -> Result<Array2<f64>> {
    gradient_with(net, z, m_targets, &Loss::Mse)
}

/// First-layer gradient under an arbitrary per-component loss.
pub fn gradient_with(
    net: &WideNet,
    z: &Array2<f64>,
    m_targets: &Array2<f64>,
    loss: &Loss,
) -> Result<Array2<f64>> {
    check_data_shapes(net, z, m_targets)?;
    Ok(gradients_unchecked(net, z, m_targets, loss).0)
}

/// (dL/dW, dL/dA) in one backward pass; shapes p_N x m and m x (1 + p_L).
fn gradients_unchecked(
    net: &WideNet,
    z: &Array2<f64>,
    m_targets: &Array2<f64>,
    loss: &Loss,
) -> (Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (net.m as f64).sqrt();
    let pre = z.dot(&net.w);
    let act = pre.mapv(|x| net.activation.apply(x));
    let pred = act.dot(&net.a) * scale;
    let g = ndarray::Zip::from(&pred)
        .and(m_targets)
        .map_collect(|p, t| loss.grad(p - t));
    let deriv = pre.mapv(|x| net.activation.derivative(x));
    let upstream = g.dot(&net.a.t()) * &deriv;
    let grad_w = z.t().dot(&upstream) * scale;
    let grad_a = act.t().dot(&g) * scale;
    (grad_w, grad_a)
}

fn max_column_drift(w: &Array2<f64>, w0: &Array2<f64>) -> f64 {
    let diff = w - w0;
    diff.axis_iter(Axis(1))
        .map(|col| col.dot(&col).sqrt())
        .fold(0.0, f64::max)
}

fn validate_config(cfg: &TrainConfig, n: usize) -> Result<()> {
    if !(cfg.learning_rate > 0.0) || !cfg.learning_rate.is_finite() {
        return Err(Error::InvalidParam(format!(
            "learning_rate must be positive and finite, got {}",
            cfg.learning_rate
        )));
    }
    if let Optimizer::Sgd { batch } = cfg.optimizer {
        if batch == 0 {
            return Err(Error::InvalidParam("sgd batch size must be at least 1".into()));
        }
    }
    if let Optimizer::Adam { beta1, beta2, eps } = cfg.optimizer {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::InvalidParam(
                "adam requires beta1, beta2 in [0, 1) and eps > 0".into(),
            ));
        }
    }
    if let Loss::Huber { delta } = cfg.loss {
        if !(delta > 0.0) {
            return Err(Error::InvalidParam(format!(
                "huber delta must be positive, got {delta}"
            )));
        }
    }
    if let Some(es) = &cfg.early_stop {
        if !(es.val_fraction > 0.0 && es.val_fraction <= 0.5) {
            return Err(Error::InvalidParam(format!(
                "val_fraction must lie in (0, 0.5], got {}",
                es.val_fraction
            )));
        }
        if es.patience == 0 {
            return Err(Error::InvalidParam("patience must be at least 1".into()));
        }
        if es.min_rel_improve < 0.0 {
            return Err(Error::InvalidParam(
                "min_rel_improve must be non-negative".into(),
            ));
        }
        let val_n = ((n as f64 * es.val_fraction) as usize).max(1);
        if val_n >= n {
            return Err(Error::InvalidSize(format!(
                "cannot hold out {val_n} validation rows from {n} total"
            )));
        }
    }
    Ok(())
}

/// Optimizer state shared by W and (when trained) A.
struct OptState {
    vel_w: Array2<f64>,
    vel_a: Array2<f64>,
    m_w: Array2<f64>,
    v_w: Array2<f64>,
    m_a: Array2<f64>,
    v_a: Array2<f64>,
    steps: u64,
}

impl OptState {
    fn new(net: &WideNet) -> Self {
        Self {
            vel_w: Array2::zeros(net.w.dim()),
            vel_a: Array2::zeros(net.a.dim()),
            m_w: Array2::zeros(net.w.dim()),
            v_w: Array2::zeros(net.w.dim()),
            m_a: Array2::zeros(net.a.dim()),
            v_a: Array2::zeros(net.a.dim()),
            steps: 0,
        }
    }
}

fn apply_step(
    net: &mut WideNet,
    grads: (Array2<f64>, Array2<f64>),
    cfg: &TrainConfig,
    state: &mut OptState,
) {
    let (gw, ga) = grads;
    let lr = cfg.learning_rate;
    let update_a = !cfg.freeze_second_layer;
    match cfg.optimizer {
        Optimizer::Gd | Optimizer::Sgd { .. } => {
            net.w.scaled_add(-lr, &gw);
            if update_a {
                net.a.scaled_add(-lr, &ga);
            }
        }
        Optimizer::Nesterov { momentum } => {
            state.vel_w = momentum * &state.vel_w + &gw;
            net.w.scaled_add(-lr, &(&gw + &(momentum * &state.vel_w)));
            if update_a {
                state.vel_a = momentum * &state.vel_a + &ga;
                net.a.scaled_add(-lr, &(&ga + &(momentum * &state.vel_a)));
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            state.steps += 1;
            let t = state.steps as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let adam = |param: &mut Array2<f64>, m: &mut Array2<f64>, v: &mut Array2<f64>, g: &Array2<f64>| {
                *m = beta1 * &*m + (1.0 - beta1) * g;
                *v = beta2 * &*v + (1.0 - beta2) * &g.mapv(|x| x * x);
                let step = (&*m / bc1) / ((&*v / bc2).mapv(f64::sqrt) + eps);
                param.scaled_add(-lr, &step);
            };
            adam(&mut net.w, &mut state.m_w, &mut state.v_w, &gw);
            if update_a {
                adam(&mut net.a, &mut state.m_a, &mut state.v_a, &ga);
            }
        }
    }
}

/// Train a copy of `net` on `(z, m_targets)` and return it with the
/// per-epoch trace. With early stopping the returned weights are the
/// best-validation snapshot; otherwise the final ones. The epoch trace is
/// always evaluated on the full data, validation rows included.
pub fn train(
    net: &WideNet,
    z: &Array2<f64>,
    m_targets: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<(WideNet, TrainTrace)> {
    check_data_shapes(net, z, m_targets)?;
    let n = z.nrows();
    if n == 0 {
        return Err(Error::InvalidSize("training data has no rows".into()));
    }
    validate_config(cfg, n)?;

    let mut net = net.clone();
    net.train_second_layer = !cfg.freeze_second_layer;
    let w0 = net.w.clone();

    // Stream 10 of the config seed picks validation rows; stream 11 drives
    // SGD reshuffles. Separate streams keep the two choices independent.
    let holdout = cfg.early_stop.as_ref().map(|es| {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(10);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let val_n = ((n as f64 * es.val_fraction) as usize).max(1);
        let (val_idx, train_idx) = order.split_at(val_n);
        (val_idx.to_vec(), train_idx.to_vec())
    });
    let (z_fit, t_fit, val_set) = match &holdout {
        Some((val_idx, train_idx)) => (
            z.select(Axis(0), train_idx),
            m_targets.select(Axis(0), train_idx),
            Some((
                z.select(Axis(0), val_idx),
                m_targets.select(Axis(0), val_idx),
            )),
        ),
        None => (z.clone(), m_targets.clone(), None),
    };

    let mut sgd_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sgd_rng.set_stream(11);

    let initial = loss_with(&net, z, m_targets, &cfg.loss)?;
    if !initial.is_finite() {
        return Err(Error::Divergence { epoch: 0 });
    }
    let mut losses = vec![initial];
    let mut drifts = vec![0.0];
    let mut best_epoch = 0usize;

    let mut es_state = val_set.as_ref().map(|(zv, tv)| {
        let val0 = loss_with(&net, zv, tv, &cfg.loss).expect("shapes already checked");
        // (best validation loss, snapshot, patience counter)
        (val0, (net.w.clone(), net.a.clone()), 0usize)
    });

    let mut opt = OptState::new(&net);
    let n_fit = z_fit.nrows();

    for epoch in 1..=cfg.max_epochs {
        match cfg.optimizer {
            Optimizer::Sgd { batch } => {
                let mut order: Vec<usize> = (0..n_fit).collect();
                for i in (1..n_fit).rev() {
                    let j = sgd_rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                for chunk in order.chunks(batch) {
                    let zb = z_fit.select(Axis(0), chunk);
                    let tb = t_fit.select(Axis(0), chunk);
                    let grads = gradients_unchecked(&net, &zb, &tb, &cfg.loss);
                    apply_step(&mut net, grads, cfg, &mut opt);
                }
            }
            _ => {
                let grads = gradients_unchecked(&net, &z_fit, &t_fit, &cfg.loss);
                apply_step(&mut net, grads, cfg, &mut opt);
            }
        }

        let full = loss_with(&net, z, m_targets, &cfg.loss)?;
        if !full.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        losses.push(full);
        drifts.push(max_column_drift(&net.w, &w0));

        if let (Some((zv, tv)), Some(es), Some(state)) =
            (&val_set, &cfg.early_stop, es_state.as_mut())
        {
            let val = loss_with(&net, zv, tv, &cfg.loss)?;
            if !val.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let (best_val, snapshot, patience_count) = state;
            if val < *best_val * (1.0 - es.min_rel_improve) {
                *best_val = val;
                *snapshot = (net.w.clone(), net.a.clone());
                *patience_count = 0;
                best_epoch = epoch;
            } else {
                *patience_count += 1;
                if *patience_count >= es.patience {
                    break;
                }
            }
        } else {
            best_epoch = epoch;
        }
    }

    if let Some((_, (w_best, a_best), _)) = es_state {
        net.w = w_best;
        net.a = a_best;
    }

    Ok((
        net,
        TrainTrace {
            loss_per_epoch: losses,
            weight_drift_per_epoch: drifts,
            best_epoch,
        },
    ))
}
