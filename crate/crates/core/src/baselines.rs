//! Comparison models: persistence, covariate regression and a deterministic LSTM.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{Segment, Windows};
use crate::error::{Error, Result};
use crate::layers::{bind, bind_frozen, vars, Activation, Head, Linear, LstmCell, Mlp, MlpSpec, ParamTree};
use crate::trainer::{clip_global_norm, AdamConfig, AdamState};

/// Repeats the last observed value `tau` times.
pub fn ar1_forecast(y_last: f64, tau: usize) -> Result<Vec<f64>> {
    if tau == 0 {
        return Err(Error::Contract("forecast horizon must be at least one step".into()));
    }
    if !y_last.is_finite() {
        return Err(Error::Numeric(format!("last observation {y_last} is not finite")));
    }
    Ok(vec![y_last; tau])
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpRegressorConfig {
    /// Weight layers, output layer included.
    pub layers: usize,
    pub width: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MlpRegressorConfig {
    fn default() -> Self {
        MlpRegressorConfig {
            layers: 3,
            width: 5,
            epochs: 2000,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

/// Pointwise map from covariates to target.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpRegressor {
    pub mlp: Mlp,
}

fn batch_matrix(x: &[Vec<f64>], dim: usize) -> Result<Tensor> {
    if let Some(bad) = x.iter().find(|r| r.len() != dim) {
        return Err(Error::shape("mlp_regressor", format!("row has {} covariates, expected {dim}", bad.len())));
    }
    Ok(Tensor::from_fn(dim, x.len(), |r, c| x[c][r]))
}

fn mse_node(g: &mut Graph, pred: Var, target: &[f64]) -> Result<Var> {
    let t = g.constant(Tensor::new(1, target.len(), target.to_vec())?);
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / target.len() as f64))
}

/// Full-batch Adam on mean squared error. With a validation set the
/// parameters of the lowest validation error are kept.
pub fn fit_mlp_regressor(
    x: &[Vec<f64>],
    y: &[f64],
    val: Option<(&[Vec<f64>], &[f64])>,
    cfg: &MlpRegressorConfig,
) -> Result<MlpRegressor> {
    if x.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    if x.len() != y.len() {
        return Err(Error::shape("mlp_regressor", format!("{} rows vs {} targets", x.len(), y.len())));
    }
    if cfg.layers == 0 || cfg.width == 0 || cfg.epochs == 0 {
        return Err(Error::Config("baselines.mlp_layers, mlp_width and mlp_epochs must be positive".into()));
    }
    let dim = x[0].len();
    let xs = batch_matrix(x, dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spec = MlpSpec::new(cfg.layers - 1, cfg.width);
    let mut model = MlpRegressor {
        mlp: Mlp::new(dim, spec, 1, Activation::Relu, Head::Identity, &mut rng)?,
    };
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(&model.mlp, adam_cfg);
    let mut best: Option<(f64, Mlp)> = None;
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let m = bind(&model.mlp, &mut g);
        let input = g.constant(xs.clone());
        let pred = m.forward_batch(&mut g, input)?;
        let loss = mse_node(&mut g, pred, y)?;
        let grads = g.backward(loss)?;
        let list: Vec<Tensor> = vars(&m).into_iter().map(|v| grads.wrt(v)).collect();
        adam.update(&mut model.mlp, &list)?;
        if let Some((vx, vy)) = val {
            let e = crate::metrics::rmse(vy, &model.predict(vx)?)?;
            if best.as_ref().is_none_or(|(b, _)| e < *b) {
                best = Some((e, model.mlp.clone()));
            }
        }
    }
    if let Some((_, mlp)) = best {
        model.mlp = mlp;
    }
    Ok(model)
}

impl MlpRegressor {
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let xs = batch_matrix(x, self.mlp.input_dim())?;
        let mut g = Graph::new();
        let m = bind_frozen(&self.mlp, &mut g);
        let input = g.constant(xs);
        let out = m.forward_batch(&mut g, input)?;
        Ok(g.value(out).data().to_vec())
    }
}

pub fn mlp_predict(model: &MlpRegressor, x_future: &[Vec<f64>]) -> Result<Vec<f64>> {
    model.predict(x_future)
}

/// LSTM cell with a linear read-out of the hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmForecaster<P = Tensor> {
    pub cell: LstmCell<P>,
    pub head: Linear<P>,
}

impl<P> ParamTree<P> for LstmForecaster<P> {
    type Mapped<Q> = LstmForecaster<Q>;

    fn map_params<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> LstmForecaster<Q> {
        LstmForecaster {
            cell: self.cell.map_params(f),
            head: self.head.map_params(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        self.cell.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        self.cell.visit_mut(f);
        self.head.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

impl LstmForecaster {
    pub fn new(input: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LstmForecaster {
            cell: LstmCell::new(input, hidden, &mut rng),
            head: Linear::new(hidden, 1, &mut rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmForecaster {
            cell: LstmCell::zeros(input, hidden),
            head: Linear::zeros(hidden, 1),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.cell.hidden_dim()
    }

    /// Predictions for every row of `x` and the state after the last one.
    pub fn run(&self, state: &LstmState, x: &[Vec<f64>]) -> Result<(Vec<f64>, LstmState)> {
        let mut g = Graph::new();
        let m = bind_frozen(self, &mut g);
        let (preds, h, c) = m.unroll(&mut g, state, x)?;
        let preds = preds.iter().map(|&p| g.scalar(p)).collect();
        Ok((
            preds,
            LstmState {
                h: g.value(h).data().to_vec(),
                c: g.value(c).data().to_vec(),
            },
        ))
    }
}

impl LstmForecaster<Var> {
    fn unroll(&self, g: &mut Graph, state: &LstmState, x: &[Vec<f64>]) -> Result<(Vec<Var>, Var, Var)> {
        let mut h = g.constant(Tensor::vector(&state.h));
        let mut c = g.constant(Tensor::vector(&state.c));
        let mut preds = Vec::with_capacity(x.len());
        for row in x {
            let xv = g.constant(Tensor::vector(row));
            (h, c) = self.cell.step(g, (h, c), xv)?;
            preds.push(self.head.forward(g, h)?);
        }
        Ok((preds, h, c))
    }
}

pub fn lstm_forecast(model: &LstmForecaster, state: &LstmState, x_future: &[Vec<f64>]) -> Result<Vec<f64>> {
    if x_future.is_empty() {
        return Err(Error::Contract("forecast horizon must be at least one step".into()));
    }
    Ok(model.run(state, x_future)?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmReport {
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub best_epoch: usize,
}

fn squared_error(g: &mut Graph, preds: &[Var], y: &[f64]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&p, &t) in preds.iter().zip(y) {
        let d = g.offset(p, -t);
        let sq = g.mul(d, d)?;
        total = Some(match total {
            Some(acc) => g.add(acc, sq)?,
            None => sq,
        });
    }
    total.ok_or_else(|| Error::Contract("empty subsequence".into()))
}

fn sse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum()
}

/// Squared-error training over the same subsequences and carried-state
/// schedule as the stochastic model.
pub fn fit_lstm_forecaster(windows: &Windows, cfg: &LstmConfig) -> Result<(LstmForecaster, LstmReport)> {
    if windows.train.is_empty() {
        return Err(Error::Config("training span is empty".into()));
    }
    if cfg.hidden == 0 || cfg.epochs == 0 || cfg.patience == 0 {
        return Err(Error::Config("baselines.lstm_hidden, lstm_epochs and lstm_patience must be positive".into()));
    }
    let input = windows.train[0].x[0].len();
    let mut model = LstmForecaster::new(input, cfg.hidden, cfg.seed);
    let mut adam = AdamState::new(&model, cfg.adam);
    let train_steps: usize = windows.train.iter().map(Segment::len).sum();

    let validate = |model: &LstmForecaster| -> Result<f64> {
        let mut state = LstmState::zeros(cfg.hidden);
        for seg in &windows.train {
            state = model.run(&state, &seg.x)?.1;
        }
        let (pred, _) = model.run(&state, &windows.val.x)?;
        Ok(sse(&pred, &windows.val.y) / windows.val.len() as f64)
    };

    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut report = LstmReport {
        train_mse: Vec::new(),
        val_mse: Vec::new(),
        best_epoch: 0,
    };
    for epoch in 0..cfg.epochs {
        let mut state = LstmState::zeros(cfg.hidden);
        let mut total = 0.0;
        for seg in &windows.train {
            let mut g = Graph::new();
            let m = bind(&model, &mut g);
            let (preds, h, c) = m.unroll(&mut g, &state, &seg.x)?;
            let loss = squared_error(&mut g, &preds, &seg.y)?;
            let l = g.scalar(loss);
            if !l.is_finite() {
                return Err(Error::Numeric(format!("LSTM loss is {l} at epoch {epoch}")));
            }
            total += l;
            let grads = g.backward(loss)?;
            let mut list: Vec<Tensor> = vars(&m).into_iter().map(|v| grads.wrt(v)).collect();
            if let Some(cn) = cfg.clip_norm {
                clip_global_norm(&mut list, cn);
            }
            state = LstmState {
                h: g.value(h).data().to_vec(),
                c: g.value(c).data().to_vec(),
            };
            adam.update(&mut model, &list)?;
        }
        report.train_mse.push(total / train_steps as f64);
        let v = validate(&model)?;
        report.val_mse.push(v);
        if v < best.0 {
            best = (v, epoch, model.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    report.best_epoch = best.1;
    Ok((best.2, report))
}
