//! CSV ingestion, z-score standardization and train/validation/conditioning/
//! prediction windowing.

use std::io::Read;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aligned covariates and targets.
///
/// `x` may run past the end of `y`: those trailing rows carry covariates for
/// steps whose targets are still unknown.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    pub target_name: String,
    pub covariate_names: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub timestamps: Option<Vec<String>>,
}

impl SeriesDataset {
    pub fn new(target_name: impl Into<String>, covariate_names: Vec<String>, x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        let n = covariate_names.len();
        if n == 0 {
            return Err(Error::Schema("at least one covariate column is required".into()));
        }
        if let Some((i, row)) = x.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::Schema(format!("row {i} has {} covariates, expected {n}", row.len())));
        }
        if y.len() > x.len() {
            return Err(Error::Schema(format!("{} targets but only {} covariate rows", y.len(), x.len())));
        }
        Ok(SeriesDataset {
            target_name: target_name.into(),
            covariate_names,
            x,
            y,
            timestamps: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.x.len()
    }

    pub fn n_targets(&self) -> usize {
        self.y.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "NaN" | "nan" | "null")
}

/// Reads a header-row CSV. Missing covariate cells are forward-filled; missing
/// target cells are forward-filled unless they trail the last observed target,
/// in which case those rows become covariate-only future rows.
pub fn load_csv(path: impl AsRef<Path>, target: &str, covariates: &[String], timestamp: Option<&str>) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, target, covariates, timestamp)
}

pub fn read_csv<R: Read>(reader: R, target: &str, covariates: &[String], timestamp: Option<&str>) -> Result<SeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
    };
    if covariates.is_empty() {
        return Err(Error::Schema("at least one covariate column is required".into()));
    }
    let target_idx = find(target)?;
    let cov_idx = covariates.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let ts_idx = timestamp.map(find).transpose()?;

    let mut x: Vec<Vec<f64>> = Vec::new();
    let mut y: Vec<Option<f64>> = Vec::new();
    let mut stamps = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let parse = |idx: usize, name: &str| -> Result<Option<f64>> {
            let cell = record.get(idx).unwrap_or("");
            if is_missing(cell) {
                return Ok(None);
            }
            cell.trim().parse::<f64>().map(Some).map_err(|_| Error::Parse {
                row: row + 1,
                column: name.to_string(),
                detail: format!("`{cell}` is not numeric"),
            })
        };
        let mut xs = Vec::with_capacity(cov_idx.len());
        for (k, &ci) in cov_idx.iter().enumerate() {
            let v = match parse(ci, &covariates[k])? {
                Some(v) => v,
                None => match x.last() {
                    Some(prev) => prev[k],
                    None => {
                        return Err(Error::Schema(format!(
                            "first row is missing covariate `{}`; cannot forward-fill",
                            covariates[k]
                        )))
                    }
                },
            };
            xs.push(v);
        }
        let yv = parse(target_idx, target)?;
        if row == 0 && yv.is_none() {
            return Err(Error::Schema(format!("first row is missing target `{target}`; cannot forward-fill")));
        }
        x.push(xs);
        y.push(yv);
        if let Some(ti) = ts_idx {
            stamps.push(record.get(ti).unwrap_or("").to_string());
        }
    }
    if x.is_empty() {
        return Err(Error::Schema("file has no data rows".into()));
    }

    let observed = y.iter().rposition(|v| v.is_some()).map_or(0, |i| i + 1);
    let mut targets = Vec::with_capacity(observed);
    for v in &y[..observed] {
        let filled = v.unwrap_or_else(|| *targets.last().expect("first target is present"));
        targets.push(filled);
    }

    let mut ds = SeriesDataset::new(target, covariates.to_vec(), x, targets)?;
    ds.timestamps = ts_idx.map(|_| stamps);
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

impl ColumnStats {
    fn fit(name: &str, values: impl Iterator<Item = f64> + Clone) -> Result<Self> {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::Config(format!(
                "column `{name}` has zero variance over the training span; exclude it from the covariates"
            )));
        }
        Ok(ColumnStats {
            name: name.to_string(),
            mean,
            std,
        })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Per-column training-span statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub covariates: Vec<ColumnStats>,
    pub target: ColumnStats,
}

impl Scaler {
    pub fn fit(ds: &SeriesDataset, train: Range<usize>) -> Result<Self> {
        if train.is_empty() || train.end > ds.n_targets() {
            return Err(Error::Config(format!(
                "training span {}..{} is empty or exceeds the {} observed targets",
                train.start,
                train.end,
                ds.n_targets()
            )));
        }
        let covariates = ds
            .covariate_names
            .iter()
            .enumerate()
            .map(|(k, name)| ColumnStats::fit(name, ds.x[train.clone()].iter().map(move |r| r[k])))
            .collect::<Result<Vec<_>>>()?;
        let target = ColumnStats::fit(&ds.target_name, ds.y[train].iter().copied())?;
        Ok(Scaler { covariates, target })
    }

    pub fn transform(&self, ds: &SeriesDataset) -> Result<SeriesDataset> {
        if ds.n_covariates() != self.covariates.len() {
            return Err(Error::Schema(format!(
                "scaler has {} covariates, dataset has {}",
                self.covariates.len(),
                ds.n_covariates()
            )));
        }
        let x = ds
            .x
            .iter()
            .map(|row| row.iter().zip(&self.covariates).map(|(v, s)| s.apply(*v)).collect())
            .collect();
        let y = ds.y.iter().map(|v| self.target.apply(*v)).collect();
        Ok(SeriesDataset {
            target_name: ds.target_name.clone(),
            covariate_names: ds.covariate_names.clone(),
            x,
            y,
            timestamps: ds.timestamps.clone(),
        })
    }

    pub fn inverse_target(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| self.target.invert(*v)).collect()
    }

    pub fn inverse_covariates(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.covariates).map(|(v, s)| s.invert(*v)).collect()
    }
}

/// Fits a scaler on `train` rows only and applies it to the whole dataset.
pub fn standardize(ds: &SeriesDataset, train: Range<usize>) -> Result<(SeriesDataset, Scaler)> {
    let scaler = Scaler::fit(ds, train)?;
    Ok((scaler.transform(ds)?, scaler))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: usize,
    pub val: usize,
    pub cond: usize,
    pub seq_len: usize,
    pub pred: usize,
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("train", self.train),
            ("val", self.val),
            ("cond", self.cond),
            ("seq_len", self.seq_len),
            ("pred", self.pred),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("split.{name} must be positive")));
            }
        }
        if self.seq_len > self.train {
            return Err(Error::Config(format!(
                "split.seq_len ({}) exceeds split.train ({})",
                self.seq_len, self.train
            )));
        }
        Ok(())
    }

    pub fn n_subsequences(&self) -> usize {
        self.train / self.seq_len
    }

    /// Rows of the training span that are actually cut into subsequences.
    pub fn used_train(&self) -> Range<usize> {
        0..self.n_subsequences() * self.seq_len
    }

    pub fn total_rows(&self) -> usize {
        self.train + self.val + self.cond + self.pred
    }

    pub fn val_range(&self) -> Range<usize> {
        self.train..self.train + self.val
    }

    pub fn cond_range(&self) -> Range<usize> {
        let s = self.train + self.val;
        s..s + self.cond
    }

    pub fn pred_range(&self) -> Range<usize> {
        let s = self.train + self.val + self.cond;
        s..s + self.pred
    }
}

/// Contiguous rows of a dataset. `y` may be shorter than `x` (prediction span).
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Segment {
    fn cut(ds: &SeriesDataset, rows: Range<usize>) -> Segment {
        let y_end = rows.end.min(ds.n_targets()).max(rows.start);
        Segment {
            start: rows.start,
            x: ds.x[rows.clone()].to_vec(),
            y: ds.y[rows.start..y_end].to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Windows {
    pub train: Vec<Segment>,
    pub dropped: Range<usize>,
    pub val: Segment,
    pub cond: Segment,
    pub pred: Segment,
}

impl Windows {
    /// Observed targets of the prediction span, when all of them are known.
    pub fn pred_truth(&self) -> Option<&[f64]> {
        (self.pred.y.len() == self.pred.len()).then_some(self.pred.y.as_slice())
    }
}

/// Splits a dataset per `plan`: non-overlapping training subsequences (tail
/// remainder dropped), then validation, conditioning and prediction spans.
pub fn window(ds: &SeriesDataset, plan: &SplitPlan) -> Result<Windows> {
    plan.validate()?;
    if plan.total_rows() > ds.rows() {
        return Err(Error::Sizing {
            required: plan.total_rows(),
            available: ds.rows(),
        });
    }
    let observed_needed = plan.train + plan.val + plan.cond;
    if observed_needed > ds.n_targets() {
        return Err(Error::Sizing {
            required: observed_needed,
            available: ds.n_targets(),
        });
    }
    let train = (0..plan.n_subsequences())
        .map(|i| Segment::cut(ds, i * plan.seq_len..(i + 1) * plan.seq_len))
        .collect();
    Ok(Windows {
        train,
        dropped: plan.used_train().end..plan.train,
        val: Segment::cut(ds, plan.val_range()),
        cond: Segment::cut(ds, plan.cond_range()),
        pred: Segment::cut(ds, plan.pred_range()),
    })
}
