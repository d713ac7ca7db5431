//! Conditioning on recent history and Monte-Carlo multistep prediction.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::config::CondLatent;
use crate::data::ColumnStats;
use crate::error::{Error, Result};
use crate::gaussian;
use crate::layers::bind_frozen;
use crate::model::{GenerativeParams, Noise, RngNoise, StochasticRnn};

pub const DEFAULT_N_SIMS: usize = 500;
pub const DEFAULT_LEVELS: [f64; 3] = [0.05, 0.5, 0.95];

/// Generator and inference states at the end of the conditioning window.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioned {
    pub h: Vec<f64>,
    pub g: Vec<f64>,
}

/// Rolls the model over observed history without updating parameters.
pub fn condition(
    model: &StochasticRnn,
    y_cond: &[f64],
    x_cond: &[Vec<f64>],
    h_init: &[f64],
    g_init: &[f64],
    latent: CondLatent,
    noise: &mut dyn Noise,
) -> Result<Conditioned> {
    if y_cond.is_empty() {
        return Err(Error::Contract("conditioning window is empty".into()));
    }
    if y_cond.len() != x_cond.len() {
        return Err(Error::shape(
            "condition",
            format!("{} targets vs {} covariate rows", y_cond.len(), x_cond.len()),
        ));
    }
    let mut g = Graph::new();
    let m = bind_frozen(model, &mut g);
    let mut h = g.constant(Tensor::vector(h_init));
    let mut gs = g.constant(Tensor::vector(g_init));
    for (&y, x) in y_cond.iter().zip(x_cond) {
        gs = m.inference.inference_step(&mut g, gs, y)?;
        let dist = match latent {
            CondLatent::Posterior => m.inference.posterior_z(&mut g, gs)?,
            CondLatent::Prior => m.generative.prior_z(&mut g, h)?,
        };
        let eps = noise.standard_normal(dist.dim(&g));
        let z = gaussian::reparameterize(&mut g, &dist, &eps)?;
        let xv = g.constant(Tensor::vector(x));
        h = m.generative.transition(&mut g, h, xv, z)?;
    }
    let h = g.value(h).data().to_vec();
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite hidden state after conditioning".into()));
    }
    Ok(Conditioned {
        h,
        g: g.value(gs).data().to_vec(),
    })
}

/// One simulated trajectory in model (standardized) units.
#[derive(Clone, Debug, PartialEq)]
pub struct SimPath {
    pub y: Vec<f64>,
    pub h: Vec<Vec<f64>>,
}

/// Generative parameters bound once for repeated rollouts.
pub struct Simulator {
    graph: Graph,
    params: GenerativeParams<Var>,
    covariates: usize,
    base: usize,
}

impl Simulator {
    pub fn new(params: &GenerativeParams) -> Self {
        let mut graph = Graph::new();
        let bound = bind_frozen(params, &mut graph);
        let base = graph.mark();
        Simulator {
            graph,
            params: bound,
            covariates: params.transition.input_dim(),
            base,
        }
    }

    /// Samples `z_t` from the prior, steps the state, samples `y_t` from the
    /// emission. The sampled `y_t` is never fed back into the state.
    pub fn simulate(
        &mut self,
        h_last: &[f64],
        x_future: &[Vec<f64>],
        latent: &mut dyn Noise,
        emission: &mut dyn Noise,
    ) -> Result<SimPath> {
        let covariates = self.covariates;
        if let Some(bad) = x_future.iter().find(|x| x.len() != covariates) {
            return Err(Error::shape(
                "predict",
                format!("future covariate row has {} values, model expects {covariates}", bad.len()),
            ));
        }
        let mut y = Vec::with_capacity(x_future.len());
        let mut hs = Vec::with_capacity(x_future.len());
        let mut h_prev = h_last.to_vec();
        for x in x_future {
            let g = &mut self.graph;
            g.rewind(self.base);
            let h = g.constant(Tensor::vector(&h_prev));
            let prior = self.params.prior_z(g, h)?;
            let eps = latent.standard_normal(prior.dim(g));
            let z = gaussian::reparameterize(g, &prior, &eps)?;
            let xv = g.constant(Tensor::vector(x));
            let h_next = self.params.transition(g, h, xv, z)?;
            let emit = self.params.emission(g, h_next)?;
            let e = emission.standard_normal(1);
            let sample = gaussian::reparameterize(g, &emit, &e)?;
            let yt = g.scalar(sample);
            h_prev = g.value(h_next).data().to_vec();
            if !yt.is_finite() || h_prev.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite value in simulated path".into()));
            }
            y.push(yt);
            hs.push(h_prev.clone());
        }
        Ok(SimPath { y, h: hs })
    }
}

// Simulation i reads latent noise from stream 2i and emission noise from 2i+1,
// so changing emission draws leaves state trajectories untouched.
const SIM_STREAM_BASE: u64 = 1 << 32;

pub fn latent_rng(seed: u64, sim: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SIM_STREAM_BASE + 2 * sim as u64);
    rng
}

pub fn emission_rng(seed: u64, sim: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SIM_STREAM_BASE + 2 * sim as u64 + 1);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastResult {
    /// `n_sims` rows of `horizon` values, original units.
    pub paths: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub levels: Vec<f64>,
    /// One path per level.
    pub quantiles: Vec<Vec<f64>>,
    pub n_sims: usize,
    pub horizon: usize,
}

impl ForecastResult {
    pub fn from_paths(paths: Vec<Vec<f64>>, levels: &[f64]) -> Result<Self> {
        let (mean, quantiles) = summarize(&paths, levels)?;
        Ok(ForecastResult {
            n_sims: paths.len(),
            horizon: mean.len(),
            paths,
            mean,
            levels: levels.to_vec(),
            quantiles,
        })
    }

    pub fn quantile(&self, level: f64) -> Option<&[f64]> {
        self.levels.iter().position(|&l| l == level).map(|i| self.quantiles[i].as_slice())
    }

    /// `step,mean,q05,...` rows; steps count from 1.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string(), "mean".to_string()];
        header.extend(self.levels.iter().map(|&l| level_column(l)));
        w.write_record(&header)?;
        for t in 0..self.horizon {
            let mut row = vec![(t + 1).to_string(), self.mean[t].to_string()];
            row.extend(self.quantiles.iter().map(|q| q[t].to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<forecast>", e))?;
        Ok(())
    }

    /// Wide layout: `step,path_0,path_1,...`.
    pub fn write_paths_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string()];
        header.extend((0..self.n_sims).map(|i| format!("path_{i}")));
        w.write_record(&header)?;
        for t in 0..self.horizon {
            let mut row = vec![(t + 1).to_string()];
            row.extend(self.paths.iter().map(|p| p[t].to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<paths>", e))?;
        Ok(())
    }
}

/// `0.05` becomes `q05`, `0.5` becomes `q50`, `0.025` becomes `q2.5`.
pub fn level_column(level: f64) -> String {
    let pct = level * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("q{:02}", pct.round() as i64)
    } else {
        format!("q{}", (pct * 1e6).round() / 1e6)
    }
}

/// Point forecast without quantiles, in the same layout.
pub fn write_mean_csv<W: Write>(mean: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "mean"])?;
    for (t, v) in mean.iter().enumerate() {
        w.write_record(&[(t + 1).to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<forecast>", e))?;
    Ok(())
}

/// Per-step mean and nearest-rank empirical quantiles.
pub fn summarize(paths: &[Vec<f64>], levels: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let Some(first) = paths.first() else {
        return Err(Error::Contract("no paths to summarize".into()));
    };
    let horizon = first.len();
    if let Some(bad) = paths.iter().find(|p| p.len() != horizon) {
        return Err(Error::shape(
            "summarize",
            format!("ragged paths: {} and {} steps", horizon, bad.len()),
        ));
    }
    if let Some(l) = levels.iter().find(|l| !(**l > 0.0 && **l <= 1.0)) {
        return Err(Error::Contract(format!("quantile level {l} outside (0, 1]")));
    }
    let n = paths.len();
    let mut mean = Vec::with_capacity(horizon);
    let mut quantiles = vec![Vec::with_capacity(horizon); levels.len()];
    let mut column = vec![0.0; n];
    for t in 0..horizon {
        for (c, p) in column.iter_mut().zip(paths) {
            *c = p[t];
        }
        mean.push(column.iter().sum::<f64>() / n as f64);
        column.sort_by(f64::total_cmp);
        for (q, &l) in quantiles.iter_mut().zip(levels) {
            let rank = ((l * n as f64).ceil() as usize).clamp(1, n);
            q.push(column[rank - 1]);
        }
    }
    Ok((mean, quantiles))
}

/// Monte-Carlo forecast from `h_last`, mapped back through `target` when given.
pub fn predict(
    params: &GenerativeParams,
    h_last: &[f64],
    x_future: &[Vec<f64>],
    n_sims: usize,
    seed: u64,
    levels: &[f64],
    target: Option<&ColumnStats>,
) -> Result<ForecastResult> {
    if x_future.is_empty() {
        return Err(Error::Contract("forecast horizon must be at least one step".into()));
    }
    if n_sims == 0 {
        return Err(Error::Contract("n_sims must be positive".into()));
    }
    let mut sim = Simulator::new(params);
    let mut paths = Vec::with_capacity(n_sims);
    for i in 0..n_sims {
        let mut latent = RngNoise(latent_rng(seed, i));
        let mut emission = RngNoise(emission_rng(seed, i));
        let path = sim.simulate(h_last, x_future, &mut latent, &mut emission)?;
        paths.push(match target {
            Some(s) => path.y.iter().map(|v| s.invert(*v)).collect(),
            None => path.y,
        });
    }
    ForecastResult::from_paths(paths, levels)
}
