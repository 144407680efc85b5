//! Dataset, result and table serialization.
//!
//! CSV files are comma-separated, UTF-8, `.` decimal point, Unix newlines.
//! History files use the schema `id,occ_1..occ_T,cov_1..cov_T` with `NA`
//! marking a missing covariate cell. Array data lives in a directory holding
//! `marray.csv` (`release,s_2..s_T,never`), `darray.csv` (`release,s_2..s_T`)
//! and optionally `covariate.csv` (`interval,w`, one row per survival
//! interval); the declared release column is cross-checked against the
//! combined row sums of both count files. JSON documents all carry a
//! `schema_version` field and are rejected on a version mismatch.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{ArrayData, Dataset, EncounterHistory, HistoryData, MDArrays};
use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::model::{ModelSpec, SCHEMA_VERSION};
use crate::simgen::IndividualTruth;
use crate::smoothing::{AicTable, CvTable};
use crate::uncertainty::{Band, BootstrapRun, SimultaneousBand};

/// File names expected inside an array-data directory.
pub const M_ARRAY_FILE: &str = "marray.csv";
pub const D_ARRAY_FILE: &str = "darray.csv";
pub const COVARIATE_FILE: &str = "covariate.csv";

/// A fit result bundled with the specification that produced it, so a saved
/// fit is self-contained input for bootstrap and curve export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDocument {
    pub schema_version: u32,
    pub spec: ModelSpec,
    pub h: Vec<f64>,
    pub fit: FitResult,
}

impl FitDocument {
    pub fn new(spec: ModelSpec, h: Vec<f64>, fit: FitResult) -> Self {
        FitDocument {
            schema_version: SCHEMA_VERSION,
            spec,
            h,
            fit,
        }
    }
}

/// The winning smoothing-parameter vector of a selection run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestHDocument {
    pub schema_version: u32,
    /// Selection route, e.g. "kfold" or "aic".
    pub method: String,
    pub h: Vec<f64>,
    /// Mean CV score (or AIC value) of the winner, when available.
    pub score: Option<f64>,
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_error(path: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn row_error(path: &Path, line: u64, reason: impl Into<String>) -> Error {
    Error::ParseRow {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

// ---------------------------------------------------------------------------
// JSON documents
// ---------------------------------------------------------------------------

/// Writes a pretty-printed JSON document with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Reads a JSON document, checking its `schema_version` before decoding.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(found) if found == u64::from(SCHEMA_VERSION) => {}
        Some(found) => {
            return Err(Error::SchemaVersion {
                path: path.display().to_string(),
                found: found as u32,
                supported: SCHEMA_VERSION,
            })
        }
        None => {
            return Err(Error::InvalidData {
                reason: format!("{} lacks a schema_version field", path.display()),
            })
        }
    }
    serde_json::from_value(value).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// History CSV
// ---------------------------------------------------------------------------

/// Writes encounter histories as `id,occ_1..occ_T,cov_1..cov_T`.
pub fn write_history_csv(path: &Path, data: &HistoryData) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let t = data.t;
    let mut header = vec!["id".to_string()];
    header.extend((1..=t).map(|s| format!("occ_{s}")));
    header.extend((1..=t).map(|s| format!("cov_{s}")));
    wtr.write_record(&header).map_err(|e| csv_error(path, e))?;
    for h in &data.histories {
        let mut row = vec![h.id.clone()];
        row.extend(h.codes.iter().map(|c| c.to_string()));
        row.extend(h.covariates.iter().map(|w| match w {
            Some(v) => format!("{v}"),
            None => "NA".to_string(),
        }));
        wtr.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| io_error(path, e))
}

/// Reads encounter histories written by [`write_history_csv`].
pub fn read_history_csv(path: &Path) -> Result<HistoryData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let n_cols = header.len();
    if n_cols < 3 || (n_cols - 1) % 2 != 0 {
        return Err(row_error(
            path,
            1,
            format!("expected 'id,occ_1..occ_T,cov_1..cov_T', got {n_cols} columns"),
        ));
    }
    let t = (n_cols - 1) / 2;
    for (i, name) in header.iter().enumerate() {
        let expected = if i == 0 {
            "id".to_string()
        } else if i <= t {
            format!("occ_{i}")
        } else {
            format!("cov_{}", i - t)
        };
        if name != expected {
            return Err(row_error(
                path,
                1,
                format!("column {} is named {name:?}, expected {expected:?}", i + 1),
            ));
        }
    }

    let mut histories = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != n_cols {
            return Err(row_error(
                path,
                line,
                format!("expected {n_cols} cells, got {}", record.len()),
            ));
        }
        let id = record[0].to_string();
        let mut codes = Vec::with_capacity(t);
        for s in 1..=t {
            let cell = record[s].trim();
            let code: u8 = cell.parse().ok().filter(|c| *c <= 2).ok_or_else(|| {
                row_error(path, line, format!("occ_{s} holds {cell:?}, expected 0, 1 or 2"))
            })?;
            codes.push(code);
        }
        let mut covariates = Vec::with_capacity(t);
        for s in 1..=t {
            let cell = record[t + s].trim();
            if cell == "NA" {
                covariates.push(None);
            } else {
                let w: f64 = cell.parse().map_err(|_| {
                    row_error(path, line, format!("cov_{s} holds {cell:?}, expected a number or NA"))
                })?;
                covariates.push(Some(w));
            }
        }
        let history = EncounterHistory::new(id, codes, covariates)
            .map_err(|e| row_error(path, line, e.to_string()))?;
        histories.push(history);
    }
    HistoryData::new(histories)
}

/// Writes the hidden truth of a simulated study: header
/// `id,first,death,recovered,w_1..w_T`. The covariate path occupies the
/// columns of the occasions at which the individual was alive; `death`
/// holds the occasion `s` with death in `(s-1, s]`, or `NA` for survivors.
pub fn write_truth_csv(path: &Path, t: usize, truths: &[IndividualTruth]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec![
        "id".to_string(),
        "first".to_string(),
        "death".to_string(),
        "recovered".to_string(),
    ];
    header.extend((1..=t).map(|s| format!("w_{s}")));
    wtr.write_record(&header).map_err(|e| csv_error(path, e))?;
    for truth in truths {
        let mut row = vec![
            truth.id.clone(),
            truth.first.to_string(),
            truth.death.map_or("NA".to_string(), |s| s.to_string()),
            truth.recovered.to_string(),
        ];
        let mut path_vals = vec!["NA".to_string(); t];
        for (k, w) in truth.path.iter().enumerate() {
            let occ = truth.first + k;
            if occ <= t {
                path_vals[occ - 1] = format!("{w}");
            }
        }
        row.extend(path_vals);
        wtr.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| io_error(path, e))
}

// ---------------------------------------------------------------------------
// Array CSVs
// ---------------------------------------------------------------------------

fn write_count_csv(
    path: &Path,
    counts: &Array2<f64>,
    releases: &[f64],
    never_column: bool,
) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let t = counts.nrows() + 1;
    let mut header = vec!["release".to_string()];
    header.extend((2..=t).map(|s| format!("s_{s}")));
    if never_column {
        header.push("never".to_string());
    }
    wtr.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (r, row) in counts.rows().into_iter().enumerate() {
        let mut cells = vec![format!("{}", releases[r])];
        cells.extend(row.iter().map(|v| format!("{v}")));
        wtr.write_record(&cells).map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| io_error(path, e))
}

/// Reads one count CSV; returns the cell matrix and the declared releases.
fn read_count_csv(path: &Path, never_column: bool) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let n_cols = header.len();
    let extra = if never_column { 2 } else { 1 }; // release column + never column
    if n_cols < extra + 1 {
        return Err(row_error(path, 1, format!("only {n_cols} columns")));
    }
    let t = n_cols - extra + 1;
    let mut expected = vec!["release".to_string()];
    expected.extend((2..=t).map(|s| format!("s_{s}")));
    if never_column {
        expected.push("never".to_string());
    }
    for (i, (name, want)) in header.iter().zip(&expected).enumerate() {
        if name != want {
            return Err(row_error(
                path,
                1,
                format!("column {} is named {name:?}, expected {want:?}", i + 1),
            ));
        }
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut releases = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != n_cols {
            return Err(row_error(
                path,
                line,
                format!("expected {n_cols} cells, got {}", record.len()),
            ));
        }
        let mut cells = Vec::with_capacity(n_cols);
        for (i, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                row_error(
                    path,
                    line,
                    format!("{} holds {cell:?}, expected a number", expected[i]),
                )
            })?;
            cells.push(v);
        }
        releases.push(cells[0]);
        rows.push(cells[1..].to_vec());
    }
    if rows.len() != t - 1 {
        return Err(row_error(
            path,
            0,
            format!("{} data rows for {} columns; expected {}", rows.len(), n_cols, t - 1),
        ));
    }
    let n_cells = n_cols - 1;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let counts = Array2::from_shape_vec((t - 1, n_cells), flat)
        .expect("row lengths were checked above");
    Ok((counts, releases))
}

fn write_covariate_csv(path: &Path, w: &[f64]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    wtr.write_record(["interval", "w"]).map_err(|e| csv_error(path, e))?;
    for (i, v) in w.iter().enumerate() {
        wtr.write_record([format!("{}", i + 1), format!("{v}")])
            .map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| io_error(path, e))
}

fn read_covariate_csv(path: &Path) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut w = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 2 {
            return Err(row_error(path, line, "expected 'interval,w' cells"));
        }
        let interval: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| row_error(path, line, format!("interval holds {:?}", &record[0])))?;
        if interval != w.len() + 1 {
            return Err(row_error(
                path,
                line,
                format!("interval {interval} out of order, expected {}", w.len() + 1),
            ));
        }
        let v: f64 = record[1]
            .trim()
            .parse()
            .map_err(|_| row_error(path, line, format!("w holds {:?}", &record[1])))?;
        w.push(v);
    }
    Ok(w)
}

/// Writes array data as `marray.csv` + `darray.csv` (+ `covariate.csv`)
/// inside `dir`, creating the directory if needed.
pub fn write_array_dir(dir: &Path, data: &ArrayData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let arrays = &data.arrays;
    write_count_csv(
        &dir.join(M_ARRAY_FILE),
        &arrays.m_counts,
        &arrays.releases,
        true,
    )?;
    write_count_csv(
        &dir.join(D_ARRAY_FILE),
        &arrays.d_counts,
        &arrays.releases,
        false,
    )?;
    if let Some(w) = &data.covariate {
        write_covariate_csv(&dir.join(COVARIATE_FILE), w)?;
    }
    Ok(())
}

/// Reads an array-data directory written by [`write_array_dir`], cross-checking
/// the declared release counts against the combined m/d row sums.
pub fn read_array_dir(dir: &Path) -> Result<ArrayData> {
    let m_path = dir.join(M_ARRAY_FILE);
    let d_path = dir.join(D_ARRAY_FILE);
    let (m_counts, m_releases) = read_count_csv(&m_path, true)?;
    let (d_counts, d_releases) = read_count_csv(&d_path, false)?;
    if m_counts.nrows() != d_counts.nrows() {
        return Err(Error::InvalidData {
            reason: format!(
                "m-array has {} rows but d-array has {}",
                m_counts.nrows(),
                d_counts.nrows()
            ),
        });
    }
    let arrays = MDArrays::new(m_counts.nrows() + 1, m_counts, d_counts)?;
    for (r, (&declared_m, &declared_d)) in m_releases.iter().zip(&d_releases).enumerate() {
        let actual = arrays.releases[r];
        let tol = 1e-6 * actual.max(1.0);
        if (declared_m - actual).abs() > tol || (declared_d - actual).abs() > tol {
            return Err(Error::InvalidData {
                reason: format!(
                    "release row {}: declared {declared_m} (m-array) / {declared_d} (d-array), \
                     but the cells sum to {actual}",
                    r + 1
                ),
            });
        }
    }
    let cov_path = dir.join(COVARIATE_FILE);
    let covariate = if cov_path.exists() {
        Some(read_covariate_csv(&cov_path)?)
    } else {
        None
    };
    ArrayData::new(arrays, covariate)
}

/// Loads either dataset kind: a directory is array data, a file is a history
/// CSV.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        Ok(Dataset::Arrays(read_array_dir(path)?))
    } else {
        Ok(Dataset::Histories(read_history_csv(path)?))
    }
}

// ---------------------------------------------------------------------------
// Table CSVs
// ---------------------------------------------------------------------------

fn score_header(n_smooths: usize) -> Vec<String> {
    let mut header: Vec<String> = (1..=n_smooths).map(|i| format!("h_{i}")).collect();
    header.extend(["fold", "score", "converged"].map(String::from));
    header
}

fn write_score_rows(
    path: &Path,
    rows: impl Iterator<Item = (Vec<f64>, usize, Option<f64>, bool)>,
) -> Result<()> {
    let mut wtr: Option<csv::Writer<fs::File>> = None;
    for (h, fold, score, converged) in rows {
        let wtr = match &mut wtr {
            Some(w) => w,
            None => {
                let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
                w.write_record(score_header(h.len()))
                    .map_err(|e| csv_error(path, e))?;
                wtr.insert(w)
            }
        };
        let mut cells: Vec<String> = h.iter().map(|v| format!("{v}")).collect();
        cells.push(fold.to_string());
        cells.push(score.map_or("NA".to_string(), |s| format!("{s}")));
        cells.push(converged.to_string());
        wtr.write_record(&cells).map_err(|e| csv_error(path, e))?;
    }
    match wtr {
        Some(mut w) => w.flush().map_err(|e| io_error(path, e)),
        None => Err(Error::InvalidData {
            reason: "score table has no rows".into(),
        }),
    }
}

/// Writes a CV score table: one row per (candidate, fold).
pub fn write_cv_score_csv(path: &Path, table: &CvTable) -> Result<()> {
    write_score_rows(
        path,
        table
            .records
            .iter()
            .map(|r| (r.h.clone(), r.fold, r.score, r.converged)),
    )
}

/// Writes an AIC score table in the same shape (fold column fixed at 0).
pub fn write_aic_score_csv(path: &Path, table: &AicTable) -> Result<()> {
    write_score_rows(
        path,
        table
            .records
            .iter()
            .map(|r| (r.h.clone(), 0, r.aic_p, r.converged)),
    )
}

/// Writes a fitted-curve CSV with columns `w,estimate`.
pub fn write_curve_csv(path: &Path, w: &[f64], estimate: &[f64]) -> Result<()> {
    if w.len() != estimate.len() {
        return Err(Error::DimensionMismatch {
            what: "curve estimate".into(),
            expected: w.len(),
            got: estimate.len(),
        });
    }
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    wtr.write_record(["w", "estimate"]).map_err(|e| csv_error(path, e))?;
    for (x, y) in w.iter().zip(estimate) {
        wtr.write_record([format!("{x}"), format!("{y}")])
            .map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| io_error(path, e))
}

/// Writes a band CSV. With a simultaneous band the columns are
/// `w,estimate,lo_pointwise,hi_pointwise,lo_simultaneous,hi_simultaneous`;
/// without one the two simultaneous columns are omitted.
pub fn write_band_csv(
    path: &Path,
    pointwise: &Band,
    simultaneous: Option<&SimultaneousBand>,
) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["w", "estimate", "lo_pointwise", "hi_pointwise"];
    if simultaneous.is_some() {
        header.extend(["lo_simultaneous", "hi_simultaneous"]);
    }
    wtr.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..pointwise.w.len() {
        let mut cells = vec![
            format!("{}", pointwise.w[i]),
            format!("{}", pointwise.estimate[i]),
            format!("{}", pointwise.lower[i]),
            format!("{}", pointwise.upper[i]),
        ];
        if let Some(sim) = simultaneous {
            cells.push(format!("{}", sim.band.lower[i]));
            cells.push(format!("{}", sim.band.upper[i]));
        }
        wtr.write_record(&cells).map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| io_error(path, e))
}

/// Writes a per-replicate bootstrap summary:
/// `replicate,loglik,penalized_loglik,converged,iterations`.
pub fn write_replicate_csv(path: &Path, run: &BootstrapRun) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    wtr.write_record(["replicate", "loglik", "penalized_loglik", "converged", "iterations"])
        .map_err(|e| csv_error(path, e))?;
    for (i, fit) in run.fits.iter().enumerate() {
        wtr.write_record([
            (i + 1).to_string(),
            format!("{}", fit.loglik),
            format!("{}", fit.penalized_loglik),
            fit.converged.to_string(),
            fit.iterations.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| io_error(path, e))
}
