//! Seeded synthetic data generators and CSV ingestion.
//!
//! Three regimes are shipped: `table1` (a 10-dimensional smooth partially
//! linear model), `table2` (sparse linear regression with a binary
//! coefficient vector), and `complex` (a 5-dimensional non-linear PLM).
//! Every generator is a pure function of its arguments including the seed;
//! each additive noise term draws from its own ChaCha stream derived from
//! the master seed, so suppressing or rescaling one term never shifts the
//! others.

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// A plain regression dataset: design matrix, response, and (for synthetic
/// regimes) the generating coefficients.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// n x p design.
    pub x: Array2<f64>,
    /// Response, length n.
    pub y: Array1<f64>,
    /// Generating coefficients when known (synthetic data only).
    pub beta_true: Option<Array1<f64>>,
    /// Standard deviation of the additive noise used at generation time.
    pub noise_sd: f64,
}

/// A dataset already split into the PLM blocks: treatment columns `D`,
/// controls `Z`, response `y`. Produced by the `table1` and `complex`
/// generators where the split is part of the design.
#[derive(Debug, Clone)]
pub struct PlmDataset {
    /// n x p_L treatment block.
    pub d: Array2<f64>,
    /// n x p_N control block.
    pub z: Array2<f64>,
    /// Response, length n.
    pub y: Array1<f64>,
    /// Standard deviation of the additive noise used at generation time.
    pub noise_sd: f64,
}

impl PlmDataset {
    /// Stack `[D | Z]` back into a single design matrix.
    pub fn to_dataset(&self) -> Dataset {
        let x = concatenate(Axis(1), &[self.d.view(), self.z.view()])
            .expect("D and Z share a row count by construction");
        Dataset {
            x,
            y: self.y.clone(),
            beta_true: None,
            noise_sd: self.noise_sd,
        }
    }
}

/// Declarative generator request, the JSON-config face of this module.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenSpec {
    pub regime: Regime,
    pub n: usize,
    /// Total feature count; `table2` only.
    #[serde(default)]
    pub p: Option<usize>,
    /// Sparsity (number of unit coefficients); `table2` only.
    #[serde(default)]
    pub k: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Table1,
    Table2,
    Complex,
}

impl GenSpec {
    /// Run the requested generator, flattening PLM regimes to `[D | Z]`.
    pub fn generate(&self) -> Result<Dataset> {
        match self.regime {
            Regime::Table1 => Ok(gen_table1(self.n, self.seed)?.to_dataset()),
            Regime::Complex => Ok(gen_complex(self.n, self.seed)?.to_dataset()),
            Regime::Table2 => {
                let p = self
                    .p
                    .ok_or_else(|| Error::Config("table2 regime requires p".into()))?;
                let k = self
                    .k
                    .ok_or_else(|| Error::Config("table2 regime requires k".into()))?;
                gen_table2(self.n, p, k, self.seed)
            }
        }
    }
}

/// Independent per-term noise streams. Stream 0 always carries the design
/// draws; later streams carry one additive noise term each.
fn stream(seed: u64, idx: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(idx);
    rng
}

fn standard_normal_mat(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, p), |_| rng.sample(StandardNormal))
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.sample(StandardNormal))
}

/// `Z ~ N(0, I_10)`, `D = 50 * sum_j sin(Z_j) + eps_D`, `y = D + sum_j cosh(Z_j) + eps_y`.
pub fn gen_table1(n: usize, seed: u64) -> Result<PlmDataset> {
    gen_table1_with(n, seed, 1.0)
}

/// [`gen_table1`] with the noise standard deviation overridden (0 disables noise).
pub fn gen_table1_with(n: usize, seed: u64, noise_sd: f64) -> Result<PlmDataset> {
    check_n(n)?;
    check_sd(noise_sd)?;
    let z = standard_normal_mat(&mut stream(seed, 0), n, 10);
    let mut d_noise = stream(seed, 1);
    let mut y_noise = stream(seed, 2);
    let mut d = Array2::zeros((n, 1));
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let row = z.row(i);
        let sin_sum: f64 = row.iter().map(|v| v.sin()).sum();
        let cosh_sum: f64 = row.iter().map(|v| v.cosh()).sum();
        let eps_d: f64 = d_noise.sample(StandardNormal);
        let eps_y: f64 = y_noise.sample(StandardNormal);
        d[[i, 0]] = 50.0 * sin_sum + noise_sd * eps_d;
        y[i] = d[[i, 0]] + cosh_sum + noise_sd * eps_y;
    }
    Ok(PlmDataset { d, z, y, noise_sd })
}

/// `X ~ N(0, I)`, `theta = [1,...,1,0,...,0]` with `k` ones, `y = X theta + eps`.
pub fn gen_table2(n: usize, p: usize, k: usize, seed: u64) -> Result<Dataset> {
    gen_table2_with(n, p, k, seed, 1.0)
}

/// [`gen_table2`] with the noise standard deviation overridden.
pub fn gen_table2_with(n: usize, p: usize, k: usize, seed: u64, noise_sd: f64) -> Result<Dataset> {
    check_n(n)?;
    check_sd(noise_sd)?;
    if p == 0 {
        return Err(Error::InvalidSize("p must be positive".into()));
    }
    if k > p {
        return Err(Error::InvalidParam(format!(
            "sparsity k = {k} exceeds feature count p = {p}"
        )));
    }
    let x = standard_normal_mat(&mut stream(seed, 0), n, p);
    let eps = standard_normal_vec(&mut stream(seed, 1), n);
    let mut beta = Array1::zeros(p);
    beta.slice_mut(ndarray::s![..k]).fill(1.0);
    let y = x.dot(&beta) + &(noise_sd * &eps);
    Ok(Dataset {
        x,
        y,
        beta_true: Some(beta),
        noise_sd,
    })
}

/// `T ~ N(0, I_5)` with `T_2` clamped above -0.999 so the log stays finite;
/// `D = sin T_1 + log(T_2 + 1) + 1/(1 + T_3) + max(0, T_4) + T_5^2 + eps_D`,
/// `y = D + cosh T_1 + T_2 + T_3 T_4 + eps_y`.
pub fn gen_complex(n: usize, seed: u64) -> Result<PlmDataset> {
    gen_complex_with(n, seed, 1.0)
}

/// [`gen_complex`] with the noise standard deviation overridden.
pub fn gen_complex_with(n: usize, seed: u64, noise_sd: f64) -> Result<PlmDataset> {
    check_n(n)?;
    check_sd(noise_sd)?;
    let mut t = standard_normal_mat(&mut stream(seed, 0), n, 5);
    // Keep log(T_2 + 1) defined without disturbing the distribution's bulk.
    for v in t.column_mut(1).iter_mut() {
        *v = v.max(-0.999);
    }
    let mut d_noise = stream(seed, 1);
    let mut y_noise = stream(seed, 2);
    let mut d = Array2::zeros((n, 1));
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let (t1, t2, t3, t4, t5) = (t[[i, 0]], t[[i, 1]], t[[i, 2]], t[[i, 3]], t[[i, 4]]);
        let eps_d: f64 = d_noise.sample(StandardNormal);
        let eps_y: f64 = y_noise.sample(StandardNormal);
        d[[i, 0]] = t1.sin() + (t2 + 1.0).ln() + 1.0 / (1.0 + t3) + t4.max(0.0) + t5 * t5
            + noise_sd * eps_d;
        y[i] = d[[i, 0]] + t1.cosh() + t2 + t3 * t4 + noise_sd * eps_y;
    }
    Ok(PlmDataset { z: t, d, y, noise_sd })
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::InvalidSize("n must be positive".into()))
    } else {
        Ok(())
    }
}

fn check_sd(sd: f64) -> Result<()> {
    if sd < 0.0 || !sd.is_finite() {
        Err(Error::InvalidParam(format!("noise_sd must be >= 0, got {sd}")))
    } else {
        Ok(())
    }
}

/// Read a headered numeric CSV, taking `target_column` as the response and
/// every other column, in file order, as the design.
pub fn load_csv(path: impl AsRef<Path>, target_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let target_idx = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::MissingTargetColumn {
            column: target_column.to_owned(),
            path: path.display().to_string(),
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut y = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(headers.len().saturating_sub(1));
        for (col_idx, cell) in record.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| Error::NonNumericCell {
                row: row_idx,
                column: headers.get(col_idx).cloned().unwrap_or_default(),
                value: cell.to_owned(),
            })?;
            if col_idx == target_idx {
                y.push(value);
            } else {
                row.push(value);
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::InvalidSize(format!(
            "{} has a header but no data rows",
            path.display()
        )));
    }
    let p = rows[0].len();
    let mut x = Array2::zeros((n, p));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != p {
            return Err(Error::ShapeMismatch(format!(
                "row {i} has {} cells, expected {p}",
                row.len()
            )));
        }
        for (j, v) in row.iter().enumerate() {
            x[[i, j]] = *v;
        }
    }
    Ok(Dataset {
        x,
        y: Array1::from_vec(y),
        beta_true: None,
        noise_sd: 0.0,
    })
}

/// Write a dataset as CSV with columns `x0..x{p-1}, y`; the round-trip
/// partner of [`load_csv`].
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let p = dataset.x.ncols();
    let mut header: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    writer.write_record(&header)?;
    for (row, yv) in dataset.x.rows().into_iter().zip(dataset.y.iter()) {
        let mut record: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        record.push(format!("{yv:.17e}"));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}
