//! CSV loading and writing for the CLI: named-column PLM ingestion and
//! residual/dataset export.

use std::path::Path;

use debinet_core::synth::PlmDataset;
use debinet_core::{Error, Result};
use ndarray::{Array1, Array2};

/// A design already split into treatment, controls, and response.
pub struct PlmData {
    pub d: Array2<f64>,
    pub z: Array2<f64>,
    pub y: Array1<f64>,
}

/// Read a headed CSV and split its columns into treatment block `d_cols`,
/// response `y_col`, and everything else as controls.
pub fn load_plm_csv(path: &Path, d_cols: &[String], y_col: &str) -> Result<PlmData> {
    if d_cols.is_empty() {
        return Err(Error::Config(
            "--d-cols must name at least one treatment column".into(),
        ));
    }
    if d_cols.iter().any(|c| c == y_col) {
        return Err(Error::Config(format!(
            "column {y_col:?} cannot be both treatment and response"
        )));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingTargetColumn {
                column: name.to_owned(),
                path: path.display().to_string(),
            })
    };
    let y_idx = col_index(y_col)?;
    let mut d_idx = Vec::with_capacity(d_cols.len());
    for name in d_cols {
        let idx = col_index(name)?;
        if d_idx.contains(&idx) {
            return Err(Error::Config(format!("duplicate treatment column {name:?}")));
        }
        d_idx.push(idx);
    }
    let z_idx: Vec<usize> = (0..headers.len())
        .filter(|j| *j != y_idx && !d_idx.contains(j))
        .collect();

    let mut d_rows: Vec<f64> = Vec::new();
    let mut z_rows: Vec<f64> = Vec::new();
    let mut y = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |idx: usize| -> Result<f64> {
            let cell = record.get(idx).unwrap_or("");
            cell.trim()
                .parse::<f64>()
                .map_err(|_| Error::NonNumericCell {
                    row,
                    column: headers[idx].clone(),
                    value: cell.to_owned(),
                })
        };
        for &idx in &d_idx {
            d_rows.push(parse(idx)?);
        }
        for &idx in &z_idx {
            z_rows.push(parse(idx)?);
        }
        y.push(parse(y_idx)?);
    }
    let n = y.len();
    if n == 0 {
        return Err(Error::InvalidSize(format!(
            "{} has no data rows",
            path.display()
        )));
    }
    let d = Array2::from_shape_vec((n, d_idx.len()), d_rows)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let z = Array2::from_shape_vec((n, z_idx.len()), z_rows)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok(PlmData {
        d,
        z,
        y: Array1::from_vec(y),
    })
}

/// Write a pre-split dataset with self-describing headers `d0.., z0.., y`.
pub fn write_plm_csv(ds: &PlmDataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..ds.d.ncols()).map(|j| format!("d{j}")).collect();
    header.extend((0..ds.z.ncols()).map(|j| format!("z{j}")));
    header.push("y".into());
    writer.write_record(&header)?;
    for i in 0..ds.y.len() {
        let mut record: Vec<String> = ds.d.row(i).iter().map(|v| format!("{v:.17e}")).collect();
        record.extend(ds.z.row(i).iter().map(|v| format!("{v:.17e}")));
        record.push(format!("{:.17e}", ds.y[i]));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Write partialling-out residuals, one `x_resid_*` column per treatment.
pub fn write_residuals_csv(x_resid: &Array2<f64>, y_resid: &Array1<f64>, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..x_resid.ncols())
        .map(|j| format!("x_resid_{j}"))
        .collect();
    header.push("y_resid".into());
    writer.write_record(&header)?;
    for i in 0..y_resid.len() {
        let mut record: Vec<String> = x_resid
            .row(i)
            .iter()
            .map(|v| format!("{v:.17e}"))
            .collect();
        record.push(format!("{:.17e}", y_resid[i]));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}
