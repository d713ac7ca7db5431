//! Forecast error metrics.

use std::io::Write;

use crate::error::{Error, Result};

/// Step cutoffs reported by the benchmark tables.
pub const DEFAULT_CUTOFFS: [usize; 6] = [5, 10, 15, 20, 25, 30];

fn check_lengths(y_true: &[f64], y_pred: &[f64]) -> Result<()> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::shape(
            "nrmse",
            format!("y_true has {} values, y_pred has {}", y_true.len(), y_pred.len()),
        ));
    }
    Ok(())
}

pub fn rmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_lengths(y_true, y_pred)?;
    let sse: f64 = y_true.iter().zip(y_pred).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y_true.len() as f64).sqrt())
}

/// Root-mean-squared error divided by the mean of `y_true`.
pub fn nrmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    let r = rmse(y_true, y_pred)?;
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    if mean == 0.0 {
        return Err(Error::ZeroMean { rmse: r });
    }
    Ok(r / mean)
}

/// Cumulative nrmse over steps `1..=k` for each cutoff `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub cutoffs: Vec<usize>,
    pub nrmse: Vec<f64>,
}

impl EvalReport {
    /// Cutoffs beyond the forecast length are skipped.
    pub fn new(label: impl Into<String>, y_true: &[f64], y_pred: &[f64], cutoffs: &[usize]) -> Result<Self> {
        check_lengths(y_true, y_pred)?;
        let cutoffs: Vec<usize> = cutoffs.iter().copied().filter(|&k| k >= 1 && k <= y_true.len()).collect();
        let nrmse = cutoffs
            .iter()
            .map(|&k| nrmse(&y_true[..k], &y_pred[..k]))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport {
            label: label.into(),
            cutoffs,
            nrmse,
        })
    }

    pub fn at(&self, cutoff: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&k| k == cutoff).map(|i| self.nrmse[i])
    }

    pub fn last(&self) -> Option<f64> {
        self.nrmse.last().copied()
    }
}

/// Writes reports as a table: one row per model, one column per cutoff.
pub fn write_table<W: Write>(reports: &[EvalReport], out: W) -> Result<()> {
    let Some(first) = reports.first() else {
        return Err(Error::Contract("no reports to write".into()));
    };
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["model".to_string()];
    header.extend(first.cutoffs.iter().map(|k| k.to_string()));
    w.write_record(&header)?;
    for r in reports {
        if r.cutoffs != first.cutoffs {
            return Err(Error::Contract(format!("report `{}` uses different cutoffs", r.label)));
        }
        let mut row = vec![r.label.clone()];
        row.extend(r.nrmse.iter().map(|v| format!("{v:.6}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<table>", e))?;
    Ok(())
}
