//! Nadaraya-Watson kernel regression with a Gaussian kernel.
//!
//! Predictions are locally weighted averages of (possibly multi-column)
//! training targets, with weights `exp(-||z - Z_i||^2 / (2 h^2))`. An
//! infinite bandwidth degrades exactly to the columnwise target mean,
//! which is also the convention for regressors declared independent of
//! the conditioning variables.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Raw kernel weight sums below this threshold mark a query as degenerate
/// (isolated from all training data) instead of silently returning NaN.
pub const DEGENERATE_WEIGHT_SUM: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Gaussian,
}

/// A fitted Nadaraya-Watson model; fitting just stores the data.
#[derive(Debug, Clone)]
pub struct NwModel {
    pub z_train: Array2<f64>,
    pub targets: Array2<f64>,
    pub bandwidth: f64,
    pub kernel: Kernel,
}

/// Store `(Z, targets)` for kernel-weighted prediction at `bandwidth`.
/// `bandwidth` may be `+inf`, which makes every prediction the target mean.
pub fn nw_fit(z_train: &Array2<f64>, targets: &Array2<f64>, bandwidth: f64) -> Result<NwModel> {
    let n = z_train.nrows();
    if n == 0 {
        return Err(Error::InvalidSize("need at least one training row".into()));
    }
    if targets.nrows() != n {
        return Err(Error::ShapeMismatch(format!(
            "Z has {n} rows but targets has {}",
            targets.nrows()
        )));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidParam(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    Ok(NwModel {
        z_train: z_train.clone(),
        targets: targets.clone(),
        bandwidth,
        kernel: Kernel::Gaussian,
    })
}

/// Normalized kernel weights for one query row, or `None` when the raw
/// weight sum is degenerate.
fn weights_at(model: &NwModel, query: &[f64]) -> Option<Array1<f64>> {
    let n = model.z_train.nrows();
    if model.bandwidth.is_infinite() {
        return Some(Array1::from_elem(n, 1.0 / n as f64));
    }
    let two_h2 = 2.0 * model.bandwidth * model.bandwidth;
    let mut w = Array1::zeros(n);
    let mut sum = 0.0;
    for (i, row) in model.z_train.rows().into_iter().enumerate() {
        let d2: f64 = row
            .iter()
            .zip(query)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let k = (-d2 / two_h2).exp();
        w[i] = k;
        sum += k;
    }
    if sum < DEGENERATE_WEIGHT_SUM {
        return None;
    }
    Some(w / sum)
}

/// Predict targets at each query row.
pub fn nw_predict(model: &NwModel, z_query: &Array2<f64>) -> Result<Array2<f64>> {
    let p = model.z_train.ncols();
    if z_query.ncols() != p {
        return Err(Error::ShapeMismatch(format!(
            "query has {} columns but model was fit with {p}",
            z_query.ncols()
        )));
    }
    let q = model.targets.ncols();
    let mut out = Array2::zeros((z_query.nrows(), q));
    for (row_idx, query) in z_query.rows().into_iter().enumerate() {
        let query: Vec<f64> = query.to_vec();
        let w = weights_at(model, &query).ok_or(Error::DegenerateQuery { row: row_idx })?;
        for c in 0..q {
            out[[row_idx, c]] = w.dot(&model.targets.column(c));
        }
    }
    Ok(out)
}

/// Total held-out squared error of bandwidth `h` under a deterministic
/// round-robin K-fold split; degenerate held-out queries price the
/// bandwidth at infinity rather than erroring.
fn cv_error(z: &Array2<f64>, targets: &Array2<f64>, h: f64, folds: usize) -> f64 {
    let n = z.nrows();
    let mut total = 0.0;
    for fold in 0..folds {
        let train_idx: Vec<usize> = (0..n).filter(|i| i % folds != fold).collect();
        let test_idx: Vec<usize> = (0..n).filter(|i| i % folds == fold).collect();
        let z_tr = z.select(Axis(0), &train_idx);
        let t_tr = targets.select(Axis(0), &train_idx);
        let z_te = z.select(Axis(0), &test_idx);
        let t_te = targets.select(Axis(0), &test_idx);
        let model = match nw_fit(&z_tr, &t_tr, h) {
            Ok(m) => m,
            Err(_) => return f64::INFINITY,
        };
        match nw_predict(&model, &z_te) {
            Ok(pred) => {
                let diff = &pred - &t_te;
                total += diff.iter().map(|v| v * v).sum::<f64>();
            }
            Err(_) => return f64::INFINITY,
        }
    }
    total
}

/// Pick the grid bandwidth with the smallest K-fold held-out squared
/// error; ties break toward the larger bandwidth.
pub fn nw_bandwidth_cv(
    z: &Array2<f64>,
    targets: &Array2<f64>,
    grid: &[f64],
    folds: usize,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidParam("bandwidth grid is empty".into()));
    }
    for &h in grid {
        if !(h > 0.0) {
            return Err(Error::InvalidParam(format!(
                "bandwidth grid entries must be positive, got {h}"
            )));
        }
    }
    if folds < 2 {
        return Err(Error::InvalidParam(format!("need at least 2 folds, got {folds}")));
    }
    let n = z.nrows();
    if n < folds {
        return Err(Error::InvalidSize(format!(
            "n = {n} rows cannot be split into {folds} folds"
        )));
    }
    if targets.nrows() != n {
        return Err(Error::ShapeMismatch(format!(
            "Z has {n} rows but targets has {}",
            targets.nrows()
        )));
    }
    // Scanning in descending bandwidth order makes "keep on strict
    // improvement" break ties toward the larger bandwidth.
    let mut order: Vec<f64> = grid.to_vec();
    order.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut best_h = order[0];
    let mut best_err = cv_error(z, targets, best_h, folds);
    for &h in &order[1..] {
        let err = cv_error(z, targets, h, folds);
        if err < best_err {
            best_err = err;
            best_h = h;
        }
    }
    Ok(best_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn single_point_predicts_its_target() {
        let z = array![[0.4, -1.2]];
        let t = array![[3.0, 7.0]];
        let model = nw_fit(&z, &t, 0.5).unwrap();
        let queries = array![[0.4, -1.2], [1.0, 1.0], [-2.0, 0.3]];
        let pred = nw_predict(&model, &queries).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(pred[[i, 0]], 3.0, epsilon = 1e-12);
            assert_abs_diff_eq!(pred[[i, 1]], 7.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn infinite_bandwidth_returns_column_means() {
        let z = array![[0.0], [1.0], [2.0], [5.0]];
        let t = array![[1.0, 10.0], [2.0, 20.0], [3.0, 30.0], [6.0, 0.0]];
        let model = nw_fit(&z, &t, f64::INFINITY).unwrap();
        let pred = nw_predict(&model, &array![[100.0], [-7.0]]).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(pred[[i, 0]], 3.0, epsilon = 1e-15);
            assert_abs_diff_eq!(pred[[i, 1]], 15.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn equidistant_query_averages_two_targets() {
        let z = array![[-1.0], [1.0]];
        let t = array![[4.0], [10.0]];
        let model = nw_fit(&z, &t, 0.7).unwrap();
        let pred = nw_predict(&model, &array![[0.0]]).unwrap();
        assert_abs_diff_eq!(pred[[0, 0]], 7.0, epsilon = 1e-12);
    }

    #[test]
    fn tiny_bandwidth_snaps_to_nearest_point() {
        let z = array![[0.0], [1.0], [2.0]];
        let t = array![[5.0], [-3.0], [8.0]];
        let model = nw_fit(&z, &t, 1e-3).unwrap();
        let pred = nw_predict(&model, &array![[1.0]]).unwrap();
        assert_abs_diff_eq!(pred[[0, 0]], -3.0, epsilon = 1e-6);
    }

    #[test]
    fn constant_targets_are_reproduced_anywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = Array2::from_shape_fn((20, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let t = Array2::from_elem((20, 2), 4.25);
        let model = nw_fit(&z, &t, 0.8).unwrap();
        let q = Array2::from_shape_fn((5, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let pred = nw_predict(&model, &q).unwrap();
        for v in pred.iter() {
            assert_abs_diff_eq!(*v, 4.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn three_point_weights_match_hand_arithmetic() {
        let z = array![[0.0], [1.0], [3.0]];
        let t = array![[2.0, -1.0], [5.0, 0.5], [-4.0, 3.0]];
        let h = 1.5;
        let model = nw_fit(&z, &t, h).unwrap();
        let query = 0.5;
        let pred = nw_predict(&model, &array![[query]]).unwrap();
        let w: Vec<f64> = [0.0, 1.0, 3.0]
            .iter()
            .map(|zi| (-(query - zi) * (query - zi) / (2.0 * h * h)).exp())
            .collect();
        let sum: f64 = w.iter().sum();
        for c in 0..2 {
            let expected =
                (w[0] * t[[0, c]] + w[1] * t[[1, c]] + w[2] * t[[2, c]]) / sum;
            assert_abs_diff_eq!(pred[[0, c]], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn isolated_query_names_the_offending_row() {
        let z = array![[0.0], [0.1]];
        let t = array![[1.0], [2.0]];
        let model = nw_fit(&z, &t, 0.01).unwrap();
        match nw_predict(&model, &array![[0.05], [1.0e6]]) {
            Err(Error::DegenerateQuery { row }) => assert_eq!(row, 1),
            other => panic!("expected DegenerateQuery, got {other:?}"),
        }
    }

    #[test]
    fn fit_rejects_bad_inputs() {
        let z = array![[0.0], [1.0]];
        let t = array![[1.0], [2.0]];
        assert!(matches!(nw_fit(&z, &t, 0.0), Err(Error::InvalidParam(_))));
        assert!(matches!(nw_fit(&z, &t, -1.0), Err(Error::InvalidParam(_))));
        assert!(matches!(nw_fit(&z, &t, f64::NAN), Err(Error::InvalidParam(_))));
        let t_short = array![[1.0]];
        assert!(matches!(
            nw_fit(&z, &t_short, 1.0),
            Err(Error::ShapeMismatch(_))
        ));
        let model = nw_fit(&z, &t, 1.0).unwrap();
        let bad_query = array![[0.0, 1.0]];
        assert!(matches!(
            nw_predict(&model, &bad_query),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn cv_single_grid_point_is_returned() {
        let z = array![[0.0], [1.0], [2.0], [3.0]];
        let t = array![[0.0], [1.0], [2.0], [3.0]];
        assert_eq!(nw_bandwidth_cv(&z, &t, &[0.37], 2).unwrap(), 0.37);
    }

    #[test]
    fn cv_rejects_bad_inputs() {
        let z = array![[0.0], [1.0], [2.0]];
        let t = array![[0.0], [1.0], [2.0]];
        assert!(matches!(
            nw_bandwidth_cv(&z, &t, &[], 2),
            Err(Error::InvalidParam(_))
        ));
        assert!(matches!(
            nw_bandwidth_cv(&z, &t, &[1.0], 1),
            Err(Error::InvalidParam(_))
        ));
        assert!(matches!(
            nw_bandwidth_cv(&z, &t, &[1.0], 4),
            Err(Error::InvalidSize(_))
        ));
        assert!(matches!(
            nw_bandwidth_cv(&z, &t, &[1.0, -2.0], 2),
            Err(Error::InvalidParam(_))
        ));
    }

    #[test]
    fn cv_oversmooths_constant_functions() {
        // Constant signal plus noise: the widest bandwidth should win almost
        // always because every narrower choice just chases noise.
        let grid = [0.05, 0.1, 0.3];
        let mut wins = 0;
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Array2::from_shape_fn((60, 1), |_| rng.sample::<f64, _>(StandardNormal));
            let t = Array2::from_shape_fn((60, 1), |_| {
                5.0 + 0.3 * rng.sample::<f64, _>(StandardNormal)
            });
            if nw_bandwidth_cv(&z, &t, &grid, 5).unwrap() == 0.3 {
                wins += 1;
            }
        }
        assert!(wins >= 45, "grid max chosen in {wins}/50 seeds");
    }

    #[test]
    fn cv_choice_minimizes_heldout_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let z = Array2::from_shape_fn((80, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let t = Array2::from_shape_fn((80, 1), |(i, _)| {
            (2.0 * z[[i, 0]]).sin() + 0.2 * rng.sample::<f64, _>(StandardNormal)
        });
        let grid = [0.05, 0.2, 0.8, 3.0];
        let chosen = nw_bandwidth_cv(&z, &t, &grid, 4).unwrap();
        let chosen_err = cv_error(&z, &t, chosen, 4);
        for &h in &grid {
            assert!(chosen_err <= cv_error(&z, &t, h, 4) + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn predictions_stay_in_target_hull(
            n in 2usize..7,
            p in 1usize..4,
            seed in 0u64..1000,
            h in 0.1f64..10.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Array2::from_shape_fn((n, p), |_| rng.sample::<f64, _>(StandardNormal));
            let t = Array2::from_shape_fn((n, 2), |_| {
                5.0 * rng.sample::<f64, _>(StandardNormal)
            });
            let model = nw_fit(&z, &t, h).unwrap();
            let pred = nw_predict(&model, &z).unwrap();
            for c in 0..2 {
                let lo = t.column(c).iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = t.column(c).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for v in pred.column(c).iter() {
                    prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn permuting_training_rows_changes_nothing(
            n in 2usize..7,
            p in 1usize..4,
            seed in 0u64..1000,
            h in 0.1f64..10.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Array2::from_shape_fn((n, p), |_| rng.sample::<f64, _>(StandardNormal));
            let t = Array2::from_shape_fn((n, 2), |_| {
                5.0 * rng.sample::<f64, _>(StandardNormal)
            });
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen::<usize>() % (i + 1);
                perm.swap(i, j);
            }
            let z_perm = z.select(Axis(0), &perm);
            let t_perm = t.select(Axis(0), &perm);
            let a = nw_predict(&nw_fit(&z, &t, h).unwrap(), &z).unwrap();
            let b = nw_predict(&nw_fit(&z_perm, &t_perm, h).unwrap(), &z).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
