//! Joint maximization of the ELBO with Adam, plus the checkpoint format.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::config::RunConfig;
use crate::data::{Scaler, Segment, Windows};
use crate::error::{Error, Result};
use crate::layers::{bind, bind_frozen, tensors, vars, ParamTree};
use crate::model::{elbo, ModelDims, Noise, RngNoise, StochasticRnn};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one parameter set.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new<T: ParamTree<Tensor>>(params: &T, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = tensors(params).iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        AdamState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// One update in the descent direction of `grads`.
    pub fn update<T: ParamTree<Tensor>>(&mut self, params: &mut T, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.first.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), self.first.len()),
            ));
        }
        for (i, (g, m)) in grads.iter().zip(&self.first).enumerate() {
            if g.shape() != m.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient {i} is {:?}, parameter is {:?}", g.shape(), m.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("gradient {i} is not finite")));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut idx = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        params.visit_mut(&mut |p| {
            let g = grads[idx].data();
            let m = first[idx].data_mut();
            let v = second[idx].data_mut();
            for k in 0..g.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p.data_mut()[k] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dims: ModelDims,
    pub epochs: usize,
    pub patience: usize,
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("training.epochs must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("training.patience must be positive".into()));
        }
        if !(self.adam.learning_rate >= 0.0) {
            return Err(Error::Config("training.learning_rate must be non-negative".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("training.clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Per-epoch bounds, averaged per time step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub initial_val_elbo: f64,
    pub train_elbo: Vec<f64>,
    pub val_elbo: Vec<f64>,
    pub best_epoch: usize,
    pub wall_time: Duration,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.train_elbo.len()
    }

    pub fn best_val_elbo(&self) -> f64 {
        self.val_elbo[self.best_epoch]
    }

    /// `epoch,train_elbo,val_elbo` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_elbo", "val_elbo"])?;
        for (i, (t, v)) in self.train_elbo.iter().zip(&self.val_elbo).enumerate() {
            w.write_record(&[i.to_string(), t.to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<train log>", e))?;
        Ok(())
    }
}

// Fixed stream ids keep initialization, training noise and validation noise independent.
const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// ELBO of `seg` without recording gradients; returns the bound and final states.
pub fn evaluate_elbo(
    model: &StochasticRnn,
    seg: &Segment,
    h_init: &[f64],
    g_init: &[f64],
    noise: &mut dyn Noise,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let bound = bind_frozen(model, &mut g);
    let pass = elbo(&bound, &mut g, &seg.y, &seg.x, h_init, g_init, noise)?;
    Ok((pass.breakdown.total, pass.h_last, pass.g_last))
}

/// One optimizer step on `-ELBO` of a subsequence. Returns the ELBO and final states.
pub fn sgvb_step(
    model: &mut StochasticRnn,
    adam: &mut AdamState,
    seg: &Segment,
    h_init: &[f64],
    g_init: &[f64],
    clip_norm: Option<f64>,
    noise: &mut dyn Noise,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let bound = bind(model, &mut g);
    let pass = elbo(&bound, &mut g, &seg.y, &seg.x, h_init, g_init, noise)?;
    let loss = g.neg(pass.total);
    let grads = g.backward(loss)?;
    let mut grad_list: Vec<Tensor> = vars(&bound).into_iter().map(|v| grads.wrt(v)).collect();
    if let Some(c) = clip_norm {
        clip_global_norm(&mut grad_list, c);
    }
    adam.update(model, &grad_list)?;
    Ok((pass.breakdown.total, pass.h_last, pass.g_last))
}

fn check_windows(windows: &Windows) -> Result<()> {
    if windows.train.is_empty() || windows.train.iter().all(|s| s.y.is_empty()) {
        return Err(Error::Config("training span is empty".into()));
    }
    if windows.val.y.len() != windows.val.len() {
        return Err(Error::Config("validation span lacks observed targets".into()));
    }
    Ok(())
}

/// Runs the epoch loop and returns the parameters of the best validation epoch.
pub fn train(windows: &Windows, cfg: &TrainConfig) -> Result<(StochasticRnn, TrainReport)> {
    cfg.validate()?;
    check_windows(windows)?;
    let started = Instant::now();
    let covariates = windows.train[0].x[0].len();
    if covariates != cfg.dims.covariates {
        return Err(Error::Compatibility {
            checkpoint: format!("covariates={}", cfg.dims.covariates),
            config: format!("covariates={covariates}"),
        });
    }

    let mut model = StochasticRnn::new(&cfg.dims, &mut stream_rng(cfg.seed, STREAM_INIT))?;
    let mut adam = AdamState::new(&model, cfg.adam);
    let mut train_noise = RngNoise(stream_rng(cfg.seed, STREAM_TRAIN));
    let train_steps: usize = windows.train.iter().map(|s| s.len()).sum();
    let val_steps = windows.val.len() as f64;
    let zero_h = vec![0.0; cfg.dims.hidden];
    let zero_g = vec![0.0; cfg.dims.inference_hidden];

    let validate = |model: &StochasticRnn| -> Result<f64> {
        // carried state from a no-update sweep over the training span
        let mut noise = RngNoise(stream_rng(cfg.seed, STREAM_VAL));
        let (mut h, mut gs) = (zero_h.clone(), zero_g.clone());
        for seg in &windows.train {
            let (_, h2, g2) = evaluate_elbo(model, seg, &h, &gs, &mut noise)?;
            h = h2;
            gs = g2;
        }
        let (v, _, _) = evaluate_elbo(model, &windows.val, &h, &gs, &mut noise)?;
        Ok(v / val_steps)
    };

    let initial_val_elbo = validate(&model)?;
    let mut best = (f64::NEG_INFINITY, 0usize, model.clone());
    let mut train_elbo = Vec::new();
    let mut val_elbo = Vec::new();
    for epoch in 0..cfg.epochs {
        let (mut h, mut gs) = (zero_h.clone(), zero_g.clone());
        let mut total = 0.0;
        for (s, seg) in windows.train.iter().enumerate() {
            let (e, h2, g2) = sgvb_step(&mut model, &mut adam, seg, &h, &gs, cfg.clip_norm, &mut train_noise)
                .map_err(|err| Error::Numeric(format!("epoch {epoch}, subsequence {s}: {err}")))?;
            if !e.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}, subsequence {s}: ELBO is {e}")));
            }
            total += e;
            h = h2;
            gs = g2;
        }
        train_elbo.push(total / train_steps as f64);
        let v = validate(&model).map_err(|err| Error::Numeric(format!("epoch {epoch}, validation: {err}")))?;
        val_elbo.push(v);
        if v > best.0 {
            best = (v, epoch, model.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }

    let (_, best_epoch, best_model) = best;
    Ok((
        best_model,
        TrainReport {
            initial_val_elbo,
            train_elbo,
            val_elbo,
            best_epoch,
            wall_time: started.elapsed(),
        },
    ))
}

const MAGIC: &[u8; 8] = b"SRNNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    dims: ModelDims,
    config: RunConfig,
    scaler: Scaler,
    shapes: Vec<(usize, usize)>,
}

/// Trained parameters with the configuration and scaler they were fit under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: StochasticRnn,
    pub config: RunConfig,
    pub scaler: Scaler,
}

impl Checkpoint {
    /// Layout: magic, u32 version, u64 header length, JSON header, then every
    /// parameter as little-endian f64 in parameter order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = tensors(&self.model);
        let header = Header {
            dims: self.model.dims(),
            config: self.config.clone(),
            scaler: self.scaler.clone(),
            shapes: params.iter().map(|t| t.shape()).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Corrupt(format!("header encoding: {e}")))?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * params.iter().map(|t| t.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Corrupt("missing checkpoint signature".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Corrupt("header extends past end of file".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..body_start]).map_err(|e| Error::Corrupt(format!("header: {e}")))?;

        let mut model = StochasticRnn::zeros(&header.dims)?;
        let expected: Vec<(usize, usize)> = tensors(&model).iter().map(|t| t.shape()).collect();
        if expected != header.shapes {
            return Err(Error::Corrupt("parameter shapes do not match the recorded dimensions".into()));
        }
        let n_values: usize = expected.iter().map(|(r, c)| r * c).sum();
        let body = &bytes[body_start..];
        if body.len() != 8 * n_values {
            return Err(Error::Corrupt(format!(
                "expected {} parameter bytes, found {}",
                8 * n_values,
                body.len()
            )));
        }
        let mut chunks = body.chunks_exact(8);
        model.visit_mut(&mut |t| {
            for v in t.data_mut() {
                *v = f64::from_le_bytes(chunks.next().expect("length checked").try_into().expect("8 bytes"));
            }
        });
        Ok(Checkpoint {
            model,
            config: header.config,
            scaler: header.scaler,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::MlpSpec;

    #[test]
    fn zero_gradient_leaves_parameters_and_moments() {
        let mut p = crate::layers::Linear::new(3, 2, &mut stream_rng(1, 0));
        let before = p.clone();
        let mut adam = AdamState::new(&p, AdamConfig::default());
        let grads = vec![Tensor::zeros(2, 3), Tensor::zeros(2, 1)];
        adam.update(&mut p, &grads).unwrap();
        assert_eq!(p, before);
        assert!(adam.first_moments().iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
        assert!(adam.second_moments().iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_has_learning_rate_magnitude() {
        let mut p = crate::layers::Linear {
            weight: Tensor::scalar(0.0),
            bias: Tensor::scalar(0.0),
        };
        let mut adam = AdamState::new(&p, AdamConfig::default());
        adam.update(&mut p, &[Tensor::scalar(1.0), Tensor::scalar(-1.0)]).unwrap();
        let want = -0.001 * (1.0 / (1.0 + 1e-8));
        assert!((p.weight.data()[0] - want).abs() < 1e-18);
        assert!((p.weight.data()[0] + 0.000_999_999_990).abs() < 1e-15);
        assert_eq!(p.bias.data()[0], -p.weight.data()[0]);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = crate::layers::Linear::new(2, 2, &mut stream_rng(3, 0));
        let before = p.clone();
        let cfg = AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(&p, cfg);
        adam.update(&mut p, &[Tensor::from_fn(2, 2, |r, c| (r + c) as f64 + 0.5), Tensor::vector(&[1.0, 2.0])])
            .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_rejects_bad_gradients() {
        let mut p = crate::layers::Linear::zeros(2, 2);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        assert!(matches!(adam.update(&mut p, &[Tensor::zeros(2, 2)]), Err(Error::Shape { .. })));
        assert!(matches!(
            adam.update(&mut p, &[Tensor::zeros(2, 1), Tensor::zeros(2, 1)]),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            adam.update(&mut p, &[Tensor::zeros(2, 2), Tensor::vector(&[f64::NAN, 0.0])]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![Tensor::vector(&[3.0, 0.0]), Tensor::vector(&[4.0])];
        let norm = clip_global_norm(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-15);
        let mut small = vec![Tensor::vector(&[0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.1]);
    }

    #[test]
    fn checkpoint_rejects_damage() {
        let dims = ModelDims {
            covariates: 1,
            latent: 1,
            hidden: 2,
            inference_hidden: 2,
            prior_mlp: MlpSpec::new(1, 2),
            posterior_mlp: MlpSpec::new(1, 2),
            emission_mlp: MlpSpec::new(1, 2),
        };
        let ck = Checkpoint {
            model: StochasticRnn::new(&dims, &mut stream_rng(0, 0)).unwrap(),
            config: RunConfig::profile("synthetic").unwrap(),
            scaler: Scaler {
                covariates: vec![],
                target: crate::data::ColumnStats {
                    name: "y".into(),
                    mean: 0.0,
                    std: 1.0,
                },
            },
        };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Corrupt(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..30]), Err(Error::Corrupt(_))));
        assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(Error::Corrupt(_))));
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Version { found: 9, .. })));
    }
}
