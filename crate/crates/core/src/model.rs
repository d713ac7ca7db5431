//! Generative and inference networks of the stochastic GRU, and the
//! per-sequence evidence lower bound.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::gaussian::{self, GaussianNode};
use crate::layers::{Activation, DeterministicGruCell, Head, Mlp, MlpSpec, ParamTree, StochasticGruCell};

/// Lower bound added to every softplus scale output.
pub const SCALE_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub covariates: usize,
    pub latent: usize,
    pub hidden: usize,
    pub inference_hidden: usize,
    pub prior_mlp: MlpSpec,
    pub posterior_mlp: MlpSpec,
    pub emission_mlp: MlpSpec,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("covariates", self.covariates),
            ("latent", self.latent),
            ("hidden", self.hidden),
            ("inference_hidden", self.inference_hidden),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        for (name, spec) in [
            ("prior_mlp", self.prior_mlp),
            ("posterior_mlp", self.posterior_mlp),
            ("emission_mlp", self.emission_mlp),
        ] {
            if spec.layers > 0 && spec.width == 0 {
                return Err(Error::Config(format!("model.{name} width must be positive")));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for ModelDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "covariates={} z={} h={} g={} prior=({},{}) posterior=({},{}) emission=({},{})",
            self.covariates,
            self.latent,
            self.hidden,
            self.inference_hidden,
            self.prior_mlp.layers,
            self.prior_mlp.width,
            self.posterior_mlp.layers,
            self.posterior_mlp.width,
            self.emission_mlp.layers,
            self.emission_mlp.width
        )
    }
}

/// Source of standard-normal noise for the reparameterized samples.
pub trait Noise {
    fn standard_normal(&mut self, n: usize) -> Vec<f64>;
}

/// Draws from a random number generator.
#[derive(Clone, Debug)]
pub struct RngNoise<R>(pub R);

impl<R: Rng> Noise for RngNoise<R> {
    fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.0.sample(StandardNormal)).collect()
    }
}

/// Always zero: every sample collapses onto its mean.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl Noise for ZeroNoise {
    fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        vec![0.0; n]
    }
}

/// Replays a fixed pool of draws in order, wrapping around when exhausted.
#[derive(Clone, Debug)]
pub struct FrozenNoise {
    pool: Vec<f64>,
    cursor: usize,
}

impl FrozenNoise {
    pub fn new(pool: Vec<f64>) -> Self {
        assert!(!pool.is_empty(), "noise pool must be non-empty");
        FrozenNoise { pool, cursor: 0 }
    }

    pub fn from_rng<R: Rng>(rng: &mut R, n: usize) -> Self {
        FrozenNoise::new((0..n).map(|_| rng.sample(StandardNormal)).collect())
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }
}

impl Noise for FrozenNoise {
    fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let v = self.pool[self.cursor % self.pool.len()];
                self.cursor += 1;
                v
            })
            .collect()
    }
}

/// Generative parameters: latent prior MLP, stochastic GRU transition and
/// emission MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeParams<P = Tensor> {
    pub prior: Mlp<P>,
    pub transition: StochasticGruCell<P>,
    pub emission: Mlp<P>,
}

impl<P> ParamTree<P> for GenerativeParams<P> {
    type Mapped<Q> = GenerativeParams<Q>;

    fn map_params<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> GenerativeParams<Q> {
        GenerativeParams {
            prior: self.prior.map_params(f),
            transition: self.transition.map_params(f),
            emission: self.emission.map_params(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        self.prior.visit(f);
        self.transition.visit(f);
        self.emission.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        self.prior.visit_mut(f);
        self.transition.visit_mut(f);
        self.emission.visit_mut(f);
    }
}

/// Inference parameters: GRU over observed targets and posterior MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceParams<P = Tensor> {
    pub gru: DeterministicGruCell<P>,
    pub posterior: Mlp<P>,
}

impl<P> ParamTree<P> for InferenceParams<P> {
    type Mapped<Q> = InferenceParams<Q>;

    fn map_params<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> InferenceParams<Q> {
        InferenceParams {
            gru: self.gru.map_params(f),
            posterior: self.posterior.map_params(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        self.gru.visit(f);
        self.posterior.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        self.gru.visit_mut(f);
        self.posterior.visit_mut(f);
    }
}

/// Full model. Parameter order: generative, then inference.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticRnn<P = Tensor> {
    pub generative: GenerativeParams<P>,
    pub inference: InferenceParams<P>,
}

impl<P> ParamTree<P> for StochasticRnn<P> {
    type Mapped<Q> = StochasticRnn<Q>;

    fn map_params<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> StochasticRnn<Q> {
        StochasticRnn {
            generative: self.generative.map_params(f),
            inference: self.inference.map_params(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        self.generative.visit(f);
        self.inference.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        self.generative.visit_mut(f);
        self.inference.visit_mut(f);
    }
}

const HIDDEN_ACTIVATION: Activation = Activation::Tanh;

impl StochasticRnn<Tensor> {
    pub fn new<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        Ok(StochasticRnn {
            generative: GenerativeParams {
                prior: Mlp::new(dims.hidden, dims.prior_mlp, 2 * dims.latent, HIDDEN_ACTIVATION, Head::MeanScale, rng)?,
                transition: StochasticGruCell::new(dims.covariates, dims.latent, dims.hidden, rng),
                emission: Mlp::new(dims.hidden, dims.emission_mlp, 2, HIDDEN_ACTIVATION, Head::MeanScale, rng)?,
            },
            inference: InferenceParams {
                gru: DeterministicGruCell::new(1, dims.inference_hidden, rng),
                posterior: Mlp::new(
                    dims.inference_hidden,
                    dims.posterior_mlp,
                    2 * dims.latent,
                    HIDDEN_ACTIVATION,
                    Head::MeanScale,
                    rng,
                )?,
            },
        })
    }

    /// All weights and biases zero.
    pub fn zeros(dims: &ModelDims) -> Result<Self> {
        dims.validate()?;
        Ok(StochasticRnn {
            generative: GenerativeParams {
                prior: Mlp::zeros(dims.hidden, dims.prior_mlp, 2 * dims.latent, HIDDEN_ACTIVATION, Head::MeanScale)?,
                transition: StochasticGruCell::zeros(dims.covariates, dims.latent, dims.hidden),
                emission: Mlp::zeros(dims.hidden, dims.emission_mlp, 2, HIDDEN_ACTIVATION, Head::MeanScale)?,
            },
            inference: InferenceParams {
                gru: DeterministicGruCell::zeros(1, dims.inference_hidden),
                posterior: Mlp::zeros(
                    dims.inference_hidden,
                    dims.posterior_mlp,
                    2 * dims.latent,
                    HIDDEN_ACTIVATION,
                    Head::MeanScale,
                )?,
            },
        })
    }

    /// Dimensions recovered from the parameter shapes.
    pub fn dims(&self) -> ModelDims {
        let spec = |m: &Mlp| {
            let hidden = m.layers.len() - 1;
            MlpSpec::new(hidden, if hidden > 0 { m.layers[0].output_dim() } else { 0 })
        };
        ModelDims {
            covariates: self.generative.transition.input_dim(),
            latent: self.generative.transition.latent_dim(),
            hidden: self.generative.transition.hidden_dim(),
            inference_hidden: self.inference.gru.hidden_dim(),
            prior_mlp: spec(&self.generative.prior),
            posterior_mlp: spec(&self.inference.posterior),
            emission_mlp: spec(&self.generative.emission),
        }
    }
}

// [mean; softplus(raw)] from a MeanScale head, plus the scale floor
fn split_gaussian(g: &mut Graph, out: Var) -> Result<GaussianNode> {
    let half = g.value(out).rows() / 2;
    let mean = g.slice(out, 0, half)?;
    let raw_scale = g.slice(out, half, half)?;
    let scale = g.offset(raw_scale, SCALE_FLOOR);
    GaussianNode::new(g, mean, scale)
}

impl GenerativeParams<Var> {
    /// Latent prior given the previous hidden state.
    pub fn prior_z(&self, g: &mut Graph, h_prev: Var) -> Result<GaussianNode> {
        let out = self.prior.forward(g, h_prev)?;
        split_gaussian(g, out)
    }

    pub fn transition(&self, g: &mut Graph, h_prev: Var, x: Var, z: Var) -> Result<Var> {
        self.transition.step(g, h_prev, x, z)
    }

    /// Scalar Gaussian over the target given the hidden state.
    pub fn emission(&self, g: &mut Graph, h: Var) -> Result<GaussianNode> {
        let out = self.emission.forward(g, h)?;
        split_gaussian(g, out)
    }
}

impl InferenceParams<Var> {
    pub fn inference_step(&self, g: &mut Graph, g_prev: Var, y: f64) -> Result<Var> {
        if !y.is_finite() {
            return Err(Error::Numeric(format!("observed target {y} is not finite")));
        }
        let yv = g.constant(Tensor::scalar(y));
        self.gru.step(g, g_prev, yv)
    }

    /// Filtering posterior over the latent given the inference state.
    pub fn posterior_z(&self, g: &mut Graph, g_t: Var) -> Result<GaussianNode> {
        let out = self.posterior.forward(g, g_t)?;
        split_gaussian(g, out)
    }
}

/// Per-sequence bound with its per-step terms.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboBreakdown {
    pub total: f64,
    pub recon: Vec<f64>,
    pub kl: Vec<f64>,
}

/// Result of one ELBO pass: the differentiable total plus detached final states.
#[derive(Clone, Debug)]
pub struct ElboPass {
    pub total: Var,
    pub breakdown: ElboBreakdown,
    pub h_last: Vec<f64>,
    pub g_last: Vec<f64>,
}

fn ensure_finite(g: &Graph, v: Var, step: usize, what: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what} at step {step}")))
    }
}

/// Single-sample SGVB estimate of the ELBO over one subsequence.
///
/// Initial states enter as constants, so gradients stop at the sequence boundary.
pub fn elbo(
    model: &StochasticRnn<Var>,
    g: &mut Graph,
    y_seq: &[f64],
    x_seq: &[Vec<f64>],
    h_init: &[f64],
    g_init: &[f64],
    noise: &mut dyn Noise,
) -> Result<ElboPass> {
    if y_seq.is_empty() {
        return Err(Error::Contract("elbo requires at least one step".into()));
    }
    if y_seq.len() != x_seq.len() {
        return Err(Error::shape(
            "elbo",
            format!("{} targets vs {} covariate rows", y_seq.len(), x_seq.len()),
        ));
    }
    let gen = &model.generative;
    let inf = &model.inference;
    let mut h = g.constant(Tensor::vector(h_init));
    let mut gs = g.constant(Tensor::vector(g_init));

    let mut recon_nodes = Vec::with_capacity(y_seq.len());
    let mut kl_nodes = Vec::with_capacity(y_seq.len());
    for (t, (&y, x)) in y_seq.iter().zip(x_seq).enumerate() {
        gs = inf.inference_step(g, gs, y)?;
        let q = inf.posterior_z(g, gs)?;
        let p = gen.prior_z(g, h)?;
        let eps = noise.standard_normal(q.dim(g));
        let z = gaussian::reparameterize(g, &q, &eps)?;
        let xv = g.constant(Tensor::vector(x));
        h = gen.transition(g, h, xv, z)?;
        ensure_finite(g, h, t, "hidden state")?;
        let emit = gen.emission(g, h)?;
        let yv = g.constant(Tensor::scalar(y));
        let recon = gaussian::log_density(g, &emit, yv)?;
        let kl = gaussian::kl_diag(g, &q, &p)?;
        ensure_finite(g, recon, t, "log-likelihood")?;
        ensure_finite(g, kl, t, "KL term")?;
        recon_nodes.push(recon);
        kl_nodes.push(kl);
    }

    let mut recon_sum = recon_nodes[0];
    for &r in &recon_nodes[1..] {
        recon_sum = g.add(recon_sum, r)?;
    }
    let mut kl_sum = kl_nodes[0];
    for &k in &kl_nodes[1..] {
        kl_sum = g.add(kl_sum, k)?;
    }
    let total = g.sub(recon_sum, kl_sum)?;

    let breakdown = ElboBreakdown {
        total: g.scalar(total),
        recon: recon_nodes.iter().map(|&v| g.scalar(v)).collect(),
        kl: kl_nodes.iter().map(|&v| g.scalar(v)).collect(),
    };
    Ok(ElboPass {
        total,
        breakdown,
        h_last: g.value(h).data().to_vec(),
        g_last: g.value(gs).data().to_vec(),
    })
}
