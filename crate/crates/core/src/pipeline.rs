//! End-to-end runs shared by the CLI, the Python module and the tests.

use std::path::Path;

use crate::baselines::{
    ar1_forecast, fit_lstm_forecaster, fit_mlp_regressor, lstm_forecast, LstmConfig, LstmState, MlpRegressorConfig,
};
use crate::config::RunConfig;
use crate::data::{read_csv, window, Scaler, SeriesDataset, Windows};
use crate::error::{Error, Result};
use crate::forecast::{condition, predict, ForecastResult};
use crate::metrics::EvalReport;
use crate::model::RngNoise;
use crate::trainer::{stream_rng, train, Checkpoint, TrainReport};

const STREAM_COND: u64 = 3;

pub fn load_dataset(cfg: &RunConfig) -> Result<SeriesDataset> {
    let d = &cfg.data;
    match &d.path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let body = skip_data_rows(&text, d.skip_rows);
            read_csv(body.as_bytes(), &d.target, &d.covariates, d.timestamp.as_deref())
        }
        None => {
            let s = d
                .synthetic
                .as_ref()
                .ok_or_else(|| Error::Config("data.path is required unless data.synthetic is set".into()))?;
            crate::synthetic::generate(s, cfg.split.total_rows(), &d.covariates, cfg.seed)
        }
    }
}

fn skip_data_rows(text: &str, n: usize) -> String {
    if n == 0 {
        return text.to_string();
    }
    let mut lines = text.lines();
    let mut out = String::with_capacity(text.len());
    if let Some(header) = lines.next() {
        out.push_str(header);
        out.push('\n');
    }
    for line in lines.skip(n) {
        out.push_str(line);
        out.push('\n');
    }
    out
}

/// Dataset in both unit systems, with windows over the standardized copy.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub raw: SeriesDataset,
    pub scaled: SeriesDataset,
    pub scaler: Scaler,
    pub windows: Windows,
    pub raw_windows: Windows,
}

impl Prepared {
    /// Targets of the prediction span in original units, when observed.
    pub fn truth(&self) -> Option<&[f64]> {
        self.raw_windows.pred_truth()
    }
}

/// Loads, checks sizing, and fits the scaler on the rows used for training.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let raw = load_dataset(cfg)?;
    let raw_windows = window(&raw, &cfg.split)?;
    let scaler = Scaler::fit(&raw, cfg.split.used_train())?;
    finish(raw, raw_windows, scaler, cfg)
}

/// As [`prepare`] but with a scaler restored from a checkpoint.
pub fn prepare_with(cfg: &RunConfig, scaler: Scaler) -> Result<Prepared> {
    let raw = load_dataset(cfg)?;
    let raw_windows = window(&raw, &cfg.split)?;
    finish(raw, raw_windows, scaler, cfg)
}

fn finish(raw: SeriesDataset, raw_windows: Windows, scaler: Scaler, cfg: &RunConfig) -> Result<Prepared> {
    let scaled = scaler.transform(&raw)?;
    let windows = window(&scaled, &cfg.split)?;
    Ok(Prepared {
        raw,
        scaled,
        scaler,
        windows,
        raw_windows,
    })
}

pub fn train_model(cfg: &RunConfig, prepared: &Prepared) -> Result<(Checkpoint, TrainReport)> {
    let (model, report) = train(&prepared.windows, &cfg.train_config())?;
    Ok((
        Checkpoint {
            model,
            config: cfg.clone(),
            scaler: prepared.scaler.clone(),
        },
        report,
    ))
}

/// Conditions on the conditioning span from zero states, then simulates the
/// prediction span. Results are in original units.
pub fn forecast(cfg: &RunConfig, checkpoint: &Checkpoint, prepared: &Prepared) -> Result<ForecastResult> {
    cfg.check_compatible(&checkpoint.config)?;
    let dims = checkpoint.model.dims();
    let w = &prepared.windows;
    let mut noise = RngNoise(stream_rng(cfg.seed, STREAM_COND));
    let state = condition(
        &checkpoint.model,
        &w.cond.y,
        &w.cond.x,
        &vec![0.0; dims.hidden],
        &vec![0.0; dims.inference_hidden],
        cfg.forecast.cond_latent,
        &mut noise,
    )?;
    predict(
        &checkpoint.model.generative,
        &state.h,
        &w.pred.x,
        cfg.forecast.n_sims,
        cfg.seed,
        &cfg.forecast.quantiles,
        Some(&checkpoint.scaler.target),
    )
}

/// Cumulative nrmse of the model's mean path and of persistence.
pub fn evaluate(cfg: &RunConfig, prepared: &Prepared, result: &ForecastResult) -> Result<Vec<EvalReport>> {
    let truth = prepared
        .truth()
        .ok_or_else(|| Error::Config("the prediction span has no observed targets to evaluate against".into()))?;
    let cutoffs = &cfg.forecast.cutoffs;
    let last = *prepared.raw_windows.cond.y.last().expect("conditioning span is non-empty");
    Ok(vec![
        EvalReport::new("Ours", truth, &result.mean, cutoffs)?,
        EvalReport::new("AR(1)", truth, &ar1_forecast(last, truth.len())?, cutoffs)?,
    ])
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub reports: Vec<EvalReport>,
    pub ours: ForecastResult,
    /// Mean paths of the comparison models in original units.
    pub baselines: Vec<(String, Vec<f64>)>,
    pub train_report: TrainReport,
    pub checkpoint: Checkpoint,
}

impl Benchmark {
    pub fn report(&self, label: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.label == label)
    }
}

/// Trains every enabled model on identical splits and scores them.
pub fn benchmark(cfg: &RunConfig) -> Result<Benchmark> {
    let prepared = prepare(cfg)?;
    let truth = prepared
        .truth()
        .ok_or_else(|| Error::Config("benchmark needs observed targets over the prediction span".into()))?
        .to_vec();
    let (checkpoint, train_report) = train_model(cfg, &prepared)?;
    let ours = forecast(cfg, &checkpoint, &prepared)?;
    let target = &prepared.scaler.target;
    let w = &prepared.windows;
    let horizon = truth.len();

    let mut baselines = Vec::new();
    let last = *prepared.raw_windows.cond.y.last().expect("conditioning span is non-empty");
    baselines.push(("AR(1)".to_string(), ar1_forecast(last, horizon)?));
    let b = &cfg.baselines;
    if b.lstm {
        let lcfg = LstmConfig {
            hidden: b.lstm_hidden,
            epochs: b.lstm_epochs,
            patience: b.lstm_patience,
            adam: cfg.adam(),
            clip_norm: cfg.train_config().clip_norm,
            seed: cfg.seed,
        };
        let (model, _) = fit_lstm_forecaster(w, &lcfg)?;
        let (_, state) = model.run(&LstmState::zeros(b.lstm_hidden), &w.cond.x)?;
        let path = lstm_forecast(&model, &state, &w.pred.x)?;
        baselines.push(("LSTM".to_string(), path.iter().map(|v| target.invert(*v)).collect()));
    }
    if b.mlp {
        let used = cfg.split.used_train();
        let mcfg = MlpRegressorConfig {
            layers: b.mlp_layers,
            width: b.mlp_width,
            epochs: b.mlp_epochs,
            learning_rate: b.mlp_learning_rate,
            seed: cfg.seed,
        };
        let s = &prepared.scaled;
        let model = fit_mlp_regressor(
            &s.x[used.clone()],
            &s.y[used],
            Some((&w.val.x, &w.val.y)),
            &mcfg,
        )?;
        let path = model.predict(&w.pred.x)?;
        baselines.push(("MLP".to_string(), path.iter().map(|v| target.invert(*v)).collect()));
    }

    let cutoffs = &cfg.forecast.cutoffs;
    let mut reports = vec![EvalReport::new("Ours", &truth, &ours.mean, cutoffs)?];
    for (label, path) in &baselines {
        reports.push(EvalReport::new(label.clone(), &truth, path, cutoffs)?);
    }
    Ok(Benchmark {
        reports,
        ours,
        baselines,
        train_report,
        checkpoint,
    })
}

/// Writes `contents` to `dir/name`, creating `dir` as needed.
pub fn write_output(dir: &Path, name: &str, contents: &[u8]) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
