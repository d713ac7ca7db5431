//! Recurrent cells and perceptrons built on the autodiff tape.
//!
//! Every layer is generic over its parameter slot `P`. With `P = Tensor` the
//! layer owns weights; binding it to a [`Graph`] yields the same layer with
//! `P = Var`, which is what the forward functions operate on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Uniform traversal over the parameter slots of a layer or model.
///
/// `visit` and `visit_mut` walk slots in the same fixed order, which is the
/// order used by optimizers and the checkpoint format.
pub trait ParamTree<P> {
    type Mapped<Q>;

    fn map_params<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Self::Mapped<Q>;
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P));
}

/// Registers every tensor as a trainable leaf of `g`.
pub fn bind<T: ParamTree<Tensor>>(params: &T, g: &mut Graph) -> T::Mapped<Var> {
    params.map_params(&mut |t| g.leaf(t.clone()))
}

/// Registers every tensor as a constant of `g`.
pub fn bind_frozen<T: ParamTree<Tensor>>(params: &T, g: &mut Graph) -> T::Mapped<Var> {
    params.map_params(&mut |t| g.constant(t.clone()))
}

pub fn vars<T: ParamTree<Var>>(bound: &T) -> Vec<Var> {
    let mut out = Vec::new();
    bound.visit(&mut |v| out.push(*v));
    out
}

pub fn tensors<T: ParamTree<Tensor>>(params: &T) -> Vec<&Tensor> {
    let mut out = Vec::new();
    params.visit(&mut |t| out.push(t));
    out
}

pub fn param_count<T: ParamTree<Tensor>>(params: &T) -> usize {
    let mut n = 0;
    params.visit(&mut |t| n += t.len());
    n
}

/// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
pub fn init_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

fn check_vec(g: &Graph, op: &'static str, what: &str, v: Var, expected: usize) -> Result<()> {
    let shape = g.value(v).shape();
    if shape != (expected, 1) {
        return Err(Error::shape(
            op,
            format!("{what} has shape {}x{}, expected {expected}x1", shape.0, shape.1),
        ));
    }
    Ok(())
}

fn one_minus(g: &mut Graph, v: Var) -> Var {
    let n = g.neg(v);
    g.offset(n, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Output map of the final affine layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Identity,
    Softplus,
    /// First half identity (means), second half softplus (scales).
    MeanScale,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P = Tensor> {
    pub weight: P,
    pub bias: P,
}

impl<P> ParamTree<P> for Linear<P> {
    type Mapped<Q> = Linear<Q>;

    fn map_params<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl Linear<Tensor> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            weight: init_uniform(output, input, input, rng),
            bias: init_uniform(output, 1, input, rng),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(output, input),
            bias: Tensor::zeros(output, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

impl Linear<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.affine(self.weight, x, self.bias)
    }
}

/// Hidden-layer shape as `(layers, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct MlpSpec {
    pub layers: usize,
    pub width: usize,
}

impl From<(usize, usize)> for MlpSpec {
    fn from((layers, width): (usize, usize)) -> Self {
        MlpSpec { layers, width }
    }
}

impl From<MlpSpec> for (usize, usize) {
    fn from(s: MlpSpec) -> Self {
        (s.layers, s.width)
    }
}

impl MlpSpec {
    pub fn new(layers: usize, width: usize) -> Self {
        MlpSpec { layers, width }
    }
}

/// Feed-forward network: `spec.layers` hidden layers followed by an output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<P = Tensor> {
    pub layers: Vec<Linear<P>>,
    pub activation: Activation,
    pub head: Head,
}

impl<P> ParamTree<P> for Mlp<P> {
    type Mapped<Q> = Mlp<Q>;

    fn map_params<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Mlp<Q> {
        Mlp {
            layers: self.layers.iter().map(|l| l.map_params(f)).collect(),
            activation: self.activation,
            head: self.head,
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        for l in &self.layers {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

impl Mlp<Tensor> {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: MlpSpec,
        output: usize,
        activation: Activation,
        head: Head,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(input, hidden, output, activation, head, |i, o| Linear::new(i, o, rng))
    }

    pub fn zeros(input: usize, hidden: MlpSpec, output: usize, activation: Activation, head: Head) -> Result<Self> {
        Self::build(input, hidden, output, activation, head, Linear::zeros)
    }

    fn build(
        input: usize,
        hidden: MlpSpec,
        output: usize,
        activation: Activation,
        head: Head,
        mut make: impl FnMut(usize, usize) -> Linear,
    ) -> Result<Self> {
        if input == 0 || output == 0 || (hidden.layers > 0 && hidden.width == 0) {
            return Err(Error::shape(
                "mlp",
                format!("input {input}, output {output}, hidden {hidden:?} must be positive"),
            ));
        }
        if head == Head::MeanScale && output % 2 != 0 {
            return Err(Error::shape("mlp", format!("mean/scale head needs an even output, got {output}")));
        }
        let mut layers = Vec::with_capacity(hidden.layers + 1);
        let mut prev = input;
        for _ in 0..hidden.layers {
            layers.push(make(prev, hidden.width));
            prev = hidden.width;
        }
        layers.push(make(prev, output));
        Ok(Mlp {
            layers,
            activation,
            head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward_values(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = bind_frozen(self, &mut g);
        let x = g.constant(Tensor::vector(input));
        let out = bound.forward(&mut g, x)?;
        Ok(g.value(out).data().to_vec())
    }
}

impl Mlp<Var> {
    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let in_dim = g.value(self.layers[0].weight).cols();
        check_vec(g, "mlp_forward", "input", input, in_dim)?;
        self.apply(g, input)
    }

    /// Forward pass over a matrix whose columns are independent inputs.
    pub fn forward_batch(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let in_dim = g.value(self.layers[0].weight).cols();
        let rows = g.value(input).rows();
        if rows != in_dim {
            return Err(Error::shape(
                "mlp_forward",
                format!("batch has {rows} rows, expected {in_dim}"),
            ));
        }
        self.apply(g, input)
    }

    fn apply(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i < last {
                x = match self.activation {
                    Activation::Tanh => g.tanh(x),
                    Activation::Relu => g.relu(x),
                };
            }
        }
        Ok(match self.head {
            Head::Identity => x,
            Head::Softplus => g.softplus(x),
            Head::MeanScale => {
                let half = g.value(x).rows() / 2;
                let mean = g.slice(x, 0, half)?;
                let raw = g.slice(x, half, half)?;
                let scale = g.softplus(raw);
                g.concat(&[mean, scale])?
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruGate<P = Tensor> {
    /// input weights (hidden x input)
    pub w: P,
    /// recurrent weights (hidden x hidden)
    pub m: P,
    pub b: P,
}

impl<P> ParamTree<P> for GruGate<P> {
    type Mapped<Q> = GruGate<Q>;

    fn map_params<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> GruGate<Q> {
        GruGate {
            w: f(&self.w),
            m: f(&self.m),
            b: f(&self.b),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        f(&self.w);
        f(&self.m);
        f(&self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        f(&mut self.w);
        f(&mut self.m);
        f(&mut self.b);
    }
}

/// Regular GRU cell.
#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicGruCell<P = Tensor> {
    pub update: GruGate<P>,
    pub reset: GruGate<P>,
    pub candidate: GruGate<P>,
}

impl<P> ParamTree<P> for DeterministicGruCell<P> {
    type Mapped<Q> = DeterministicGruCell<Q>;

    fn map_params<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> DeterministicGruCell<Q> {
        DeterministicGruCell {
            update: self.update.map_params(f),
            reset: self.reset.map_params(f),
            candidate: self.candidate.map_params(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        self.update.visit(f);
        self.reset.visit(f);
        self.candidate.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        self.update.visit_mut(f);
        self.reset.visit_mut(f);
        self.candidate.visit_mut(f);
    }
}

impl DeterministicGruCell<Tensor> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut gate = || GruGate {
            w: init_uniform(hidden, input, input, rng),
            m: init_uniform(hidden, hidden, hidden, rng),
            b: init_uniform(hidden, 1, hidden, rng),
        };
        DeterministicGruCell {
            update: gate(),
            reset: gate(),
            candidate: gate(),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        let gate = || GruGate {
            w: Tensor::zeros(hidden, input),
            m: Tensor::zeros(hidden, hidden),
            b: Tensor::zeros(hidden, 1),
        };
        DeterministicGruCell {
            update: gate(),
            reset: gate(),
            candidate: gate(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.update.w.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.update.b.rows()
    }

    pub fn step_values(&self, h_prev: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let cell = bind_frozen(self, &mut g);
        let h = g.constant(Tensor::vector(h_prev));
        let xv = g.constant(Tensor::vector(x));
        let out = cell.step(&mut g, h, xv)?;
        Ok(g.value(out).data().to_vec())
    }
}

impl DeterministicGruCell<Var> {
    pub fn step(&self, g: &mut Graph, h_prev: Var, x: Var) -> Result<Var> {
        let hidden = g.value(self.update.b).rows();
        let input = g.value(self.update.w).cols();
        check_vec(g, "gru_step", "h_prev", h_prev, hidden)?;
        check_vec(g, "gru_step", "x", x, input)?;

        let u_in = g.affine(self.update.w, x, self.update.b)?;
        let u_rec = g.matmul(self.update.m, h_prev)?;
        let u_pre = g.add(u_in, u_rec)?;
        let u = g.sigmoid(u_pre);

        let r_in = g.affine(self.reset.w, x, self.reset.b)?;
        let r_rec = g.matmul(self.reset.m, h_prev)?;
        let r_pre = g.add(r_in, r_rec)?;
        let r = g.sigmoid(r_pre);

        let c_in = g.affine(self.candidate.w, x, self.candidate.b)?;
        let c_rec = g.matmul(self.candidate.m, h_prev)?;
        let c_gated = g.mul(r, c_rec)?;
        let c_pre = g.add(c_in, c_gated)?;
        let cand = g.tanh(c_pre);

        blend(g, u, h_prev, cand)
    }
}

// u * h_prev + (1 - u) * cand
fn blend(g: &mut Graph, u: Var, h_prev: Var, cand: Var) -> Result<Var> {
    let keep = g.mul(u, h_prev)?;
    let one_minus_u = one_minus(g, u);
    let fresh = g.mul(one_minus_u, cand)?;
    g.add(keep, fresh)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StochasticGate<P = Tensor> {
    /// input weights (hidden x input)
    pub w: P,
    /// latent weights (hidden x latent)
    pub c: P,
    /// recurrent weights (hidden x hidden)
    pub m: P,
    pub b: P,
}

impl<P> ParamTree<P> for StochasticGate<P> {
    type Mapped<Q> = StochasticGate<Q>;

    fn map_params<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> StochasticGate<Q> {
        StochasticGate {
            w: f(&self.w),
            c: f(&self.c),
            m: f(&self.m),
            b: f(&self.b),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        f(&self.w);
        f(&self.c);
        f(&self.m);
        f(&self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        f(&mut self.w);
        f(&mut self.c);
        f(&mut self.m);
        f(&mut self.b);
    }
}

/// GRU cell whose gates also receive a latent sample `z_t`.
///
/// ```text
/// u_t = sigmoid(W_u x_t + C_u z_t + M_u h_{t-1} + b_u)
/// r_t = sigmoid(W_r x_t + C_r z_t + M_r h_{t-1} + b_r)
/// c_t = tanh(W_h x_t + C_h z_t + r_t * (M_h h_{t-1}) + b_h)
/// h_t = u_t * h_{t-1} + (1 - u_t) * c_t
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticGruCell<P = Tensor> {
    pub update: StochasticGate<P>,
    pub reset: StochasticGate<P>,
    pub candidate: StochasticGate<P>,
}

impl<P> ParamTree<P> for StochasticGruCell<P> {
    type Mapped<Q> = StochasticGruCell<Q>;

    fn map_params<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> StochasticGruCell<Q> {
        StochasticGruCell {
            update: self.update.map_params(f),
            reset: self.reset.map_params(f),
            candidate: self.candidate.map_params(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        self.update.visit(f);
        self.reset.visit(f);
        self.candidate.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        self.update.visit_mut(f);
        self.reset.visit_mut(f);
        self.candidate.visit_mut(f);
    }
}

impl StochasticGruCell<Tensor> {
    pub fn new<R: Rng + ?Sized>(input: usize, latent: usize, hidden: usize, rng: &mut R) -> Self {
        let mut gate = || StochasticGate {
            w: init_uniform(hidden, input, input, rng),
            c: init_uniform(hidden, latent, latent, rng),
            m: init_uniform(hidden, hidden, hidden, rng),
            b: init_uniform(hidden, 1, hidden, rng),
        };
        StochasticGruCell {
            update: gate(),
            reset: gate(),
            candidate: gate(),
        }
    }

    pub fn zeros(input: usize, latent: usize, hidden: usize) -> Self {
        let gate = || StochasticGate {
            w: Tensor::zeros(hidden, input),
            c: Tensor::zeros(hidden, latent),
            m: Tensor::zeros(hidden, hidden),
            b: Tensor::zeros(hidden, 1),
        };
        StochasticGruCell {
            update: gate(),
            reset: gate(),
            candidate: gate(),
        }
    }

    /// Cell with the same `W`, `M`, `b` and `C = 0`; it ignores `z`.
    pub fn from_deterministic(cell: &DeterministicGruCell, latent: usize) -> Self {
        let hidden = cell.hidden_dim();
        let gate = |g: &GruGate| StochasticGate {
            w: g.w.clone(),
            c: Tensor::zeros(hidden, latent),
            m: g.m.clone(),
            b: g.b.clone(),
        };
        StochasticGruCell {
            update: gate(&cell.update),
            reset: gate(&cell.reset),
            candidate: gate(&cell.candidate),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.update.w.cols()
    }

    pub fn latent_dim(&self) -> usize {
        self.update.c.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.update.b.rows()
    }

    pub fn step_values(&self, h_prev: &[f64], x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let cell = bind_frozen(self, &mut g);
        let h = g.constant(Tensor::vector(h_prev));
        let xv = g.constant(Tensor::vector(x));
        let zv = g.constant(Tensor::vector(z));
        let out = cell.step(&mut g, h, xv, zv)?;
        Ok(g.value(out).data().to_vec())
    }
}

impl StochasticGruCell<Var> {
    fn pre_activation(
        &self,
        g: &mut Graph,
        gate: &StochasticGate<Var>,
        x: Var,
        z: Var,
    ) -> Result<Var> {
        let wx = g.affine(gate.w, x, gate.b)?;
        let cz = g.matmul(gate.c, z)?;
        g.add(wx, cz)
    }

    pub fn step(&self, g: &mut Graph, h_prev: Var, x: Var, z: Var) -> Result<Var> {
        let hidden = g.value(self.update.b).rows();
        let input = g.value(self.update.w).cols();
        let latent = g.value(self.update.c).cols();
        check_vec(g, "sgru_step", "h_prev", h_prev, hidden)?;
        check_vec(g, "sgru_step", "x", x, input)?;
        check_vec(g, "sgru_step", "z", z, latent)?;

        let u_in = self.pre_activation(g, &self.update, x, z)?;
        let u_rec = g.matmul(self.update.m, h_prev)?;
        let u_pre = g.add(u_in, u_rec)?;
        let u = g.sigmoid(u_pre);

        let r_in = self.pre_activation(g, &self.reset, x, z)?;
        let r_rec = g.matmul(self.reset.m, h_prev)?;
        let r_pre = g.add(r_in, r_rec)?;
        let r = g.sigmoid(r_pre);

        // reset applies after the recurrent projection
        let c_in = self.pre_activation(g, &self.candidate, x, z)?;
        let c_rec = g.matmul(self.candidate.m, h_prev)?;
        let c_gated = g.mul(r, c_rec)?;
        let c_pre = g.add(c_in, c_gated)?;
        let cand = g.tanh(c_pre);

        blend(g, u, h_prev, cand)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmGate<P = Tensor> {
    pub w: P,
    pub u: P,
    pub b: P,
}

impl<P> ParamTree<P> for LstmGate<P> {
    type Mapped<Q> = LstmGate<Q>;

    fn map_params<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> LstmGate<Q> {
        LstmGate {
            w: f(&self.w),
            u: f(&self.u),
            b: f(&self.b),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        f(&self.w);
        f(&self.u);
        f(&self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        f(&mut self.w);
        f(&mut self.u);
        f(&mut self.b);
    }
}

/// LSTM cell without peepholes (input, forget, output, candidate gates).
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell<P = Tensor> {
    pub input: LstmGate<P>,
    pub forget: LstmGate<P>,
    pub output: LstmGate<P>,
    pub candidate: LstmGate<P>,
}

impl<P> ParamTree<P> for LstmCell<P> {
    type Mapped<Q> = LstmCell<Q>;

    fn map_params<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> LstmCell<Q> {
        LstmCell {
            input: self.input.map_params(f),
            forget: self.forget.map_params(f),
            output: self.output.map_params(f),
            candidate: self.candidate.map_params(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        self.input.visit(f);
        self.forget.visit(f);
        self.output.visit(f);
        self.candidate.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        self.input.visit_mut(f);
        self.forget.visit_mut(f);
        self.output.visit_mut(f);
        self.candidate.visit_mut(f);
    }
}

impl LstmCell<Tensor> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut gate = || LstmGate {
            w: init_uniform(hidden, input, input, rng),
            u: init_uniform(hidden, hidden, hidden, rng),
            b: init_uniform(hidden, 1, hidden, rng),
        };
        LstmCell {
            input: gate(),
            forget: gate(),
            output: gate(),
            candidate: gate(),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        let gate = || LstmGate {
            w: Tensor::zeros(hidden, input),
            u: Tensor::zeros(hidden, hidden),
            b: Tensor::zeros(hidden, 1),
        };
        LstmCell {
            input: gate(),
            forget: gate(),
            output: gate(),
            candidate: gate(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input.w.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.input.b.rows()
    }

    /// Returns `(hidden, cell)` after one step.
    pub fn step_values(&self, hidden: &[f64], cell: &[f64], x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let lstm = bind_frozen(self, &mut g);
        let h = g.constant(Tensor::vector(hidden));
        let c = g.constant(Tensor::vector(cell));
        let xv = g.constant(Tensor::vector(x));
        let (h2, c2) = lstm.step(&mut g, (h, c), xv)?;
        Ok((g.value(h2).data().to_vec(), g.value(c2).data().to_vec()))
    }
}

impl LstmCell<Var> {
    fn gate(&self, g: &mut Graph, gate: &LstmGate<Var>, h: Var, x: Var) -> Result<Var> {
        let a = g.affine(gate.w, x, gate.b)?;
        let r = g.matmul(gate.u, h)?;
        g.add(a, r)
    }

    pub fn step(&self, g: &mut Graph, state: (Var, Var), x: Var) -> Result<(Var, Var)> {
        let (h, c) = state;
        let hidden = g.value(self.input.b).rows();
        let input = g.value(self.input.w).cols();
        check_vec(g, "lstm_step", "hidden", h, hidden)?;
        check_vec(g, "lstm_step", "cell", c, hidden)?;
        check_vec(g, "lstm_step", "x", x, input)?;

        let i_pre = self.gate(g, &self.input, h, x)?;
        let i = g.sigmoid(i_pre);
        let f_pre = self.gate(g, &self.forget, h, x)?;
        let f = g.sigmoid(f_pre);
        let o_pre = self.gate(g, &self.output, h, x)?;
        let o = g.sigmoid(o_pre);
        let c_pre = self.gate(g, &self.candidate, h, x)?;
        let cand = g.tanh(c_pre);

        let kept = g.mul(f, c)?;
        let written = g.mul(i, cand)?;
        let c_next = g.add(kept, written)?;
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_many, sigmoid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
        (0..m.rows())
            .map(|i| (0..m.cols()).map(|j| m.get(i, j) * v[j]).sum())
            .collect()
    }

    // Scripted evaluation of the four stochastic-GRU equations on plain slices.
    // Returns (h_t, candidate).
    fn scripted_sgru_parts(cell: &StochasticGruCell, h: &[f64], x: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = h.len();
        let pre = |gate: &StochasticGate| -> (Vec<f64>, Vec<f64>) {
            let wx = matvec(&gate.w, x);
            let cz = matvec(&gate.c, z);
            let mh = matvec(&gate.m, h);
            let base = (0..n).map(|i| wx[i] + cz[i] + gate.b.data()[i]).collect();
            (base, mh)
        };
        let (ub, um) = pre(&cell.update);
        let (rb, rm) = pre(&cell.reset);
        let (cb, cm) = pre(&cell.candidate);
        (0..n)
            .map(|i| {
                let u = sigmoid(ub[i] + um[i]);
                let r = sigmoid(rb[i] + rm[i]);
                let c = (cb[i] + r * cm[i]).tanh();
                (u * h[i] + (1.0 - u) * c, c)
            })
            .unzip()
    }

    fn scripted_sgru(cell: &StochasticGruCell, h: &[f64], x: &[f64], z: &[f64]) -> Vec<f64> {
        scripted_sgru_parts(cell, h, x, z).0
    }

    fn scripted_lstm(cell: &LstmCell, h: &[f64], c: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pre = |gate: &LstmGate| -> Vec<f64> {
            let wx = matvec(&gate.w, x);
            let uh = matvec(&gate.u, h);
            (0..h.len()).map(|k| wx[k] + uh[k] + gate.b.data()[k]).collect()
        };
        let (i, f, o, g) = (pre(&cell.input), pre(&cell.forget), pre(&cell.output), pre(&cell.candidate));
        let mut hn = Vec::new();
        let mut cn = Vec::new();
        for k in 0..h.len() {
            let cc = sigmoid(f[k]) * c[k] + sigmoid(i[k]) * g[k].tanh();
            cn.push(cc);
            hn.push(sigmoid(o[k]) * cc.tanh());
        }
        (hn, cn)
    }

    #[test]
    fn zero_sgru_halves_previous_state() {
        let cell = StochasticGruCell::zeros(2, 2, 3);
        let h = cell.step_values(&[1.0, -2.0, 4.0], &[0.3, 0.7], &[1.0, 1.0]).unwrap();
        assert_eq!(h, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn sgru_with_zero_latent_weights_ignores_z() {
        let mut r = rng(1);
        let det = DeterministicGruCell::new(2, 3, &mut r);
        let cell = StochasticGruCell::from_deterministic(&det, 2);
        let h = rand_vec(3, &mut r);
        let x = rand_vec(2, &mut r);
        let z = rand_vec(2, &mut r);
        let z1: Vec<f64> = z.iter().map(|v| v + 1.0).collect();
        assert_eq!(cell.step_values(&h, &x, &z).unwrap(), cell.step_values(&h, &x, &z1).unwrap());
    }

    #[test]
    fn sgru_matches_scripted_equations() {
        let mut r = rng(7);
        let cell = StochasticGruCell::new(2, 2, 3, &mut r);
        let h = rand_vec(3, &mut r);
        let x = rand_vec(2, &mut r);
        let z = rand_vec(2, &mut r);
        let got = cell.step_values(&h, &x, &z).unwrap();
        let want = scripted_sgru(&cell, &h, &x, &z);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn sgru_rejects_wrong_latent_dimension() {
        let cell = StochasticGruCell::zeros(2, 2, 3);
        let err = cell.step_values(&[0.0; 3], &[0.0; 2], &[0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("sgru_step"));
        assert!(cell.step_values(&[0.0; 2], &[0.0; 2], &[0.0; 2]).is_err());
    }

    #[test]
    fn zero_gru_halves_previous_state() {
        let cell = DeterministicGruCell::zeros(1, 2);
        assert_eq!(cell.step_values(&[2.0, -6.0], &[9.0]).unwrap(), vec![1.0, -3.0]);
    }

    #[test]
    fn gru_equals_sgru_with_zero_latent_weights() {
        let mut r = rng(11);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let det = DeterministicGruCell::new(3, 4, &mut r);
            let sto = StochasticGruCell::from_deterministic(&det, 2);
            let h = rand_vec(4, &mut r);
            let x = rand_vec(3, &mut r);
            let z = rand_vec(2, &mut r);
            let a = det.step_values(&h, &x).unwrap();
            let b = sto.step_values(&h, &x, &z).unwrap();
            for (p, q) in a.iter().zip(&b) {
                worst = worst.max((p - q).abs());
            }
        }
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn scalar_gru_by_hand() {
        // hidden 1, input 1; every weight set by hand
        let gate = |w: f64, m: f64, b: f64| GruGate {
            w: Tensor::scalar(w),
            m: Tensor::scalar(m),
            b: Tensor::scalar(b),
        };
        let cell = DeterministicGruCell {
            update: gate(0.5, -1.0, 0.0),
            reset: gate(1.0, 0.0, 0.0),
            candidate: gate(2.0, 1.0, -1.0),
        };
        let (h, x) = (0.5, 1.0);
        // u = sigmoid(0.5 - 0.5) = 0.5, r = sigmoid(1), c = tanh(2 + r * 0.5 - 1)
        let r = 1.0 / (1.0 + (-1.0f64).exp());
        let c = (1.0 + 0.5 * r).tanh();
        let want = 0.5 * h + 0.5 * c;
        let got = cell.step_values(&[h], &[x]).unwrap()[0];
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn mlp_zero_weights_identity_head_is_zero() {
        let mlp = Mlp::zeros(3, MlpSpec::new(2, 4), 2, Activation::Tanh, Head::Identity).unwrap();
        assert_eq!(mlp.forward_values(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn mlp_softplus_head_on_zero_is_ln2() {
        let mlp = Mlp::zeros(3, MlpSpec::new(1, 4), 2, Activation::Relu, Head::Softplus).unwrap();
        for v in mlp.forward_values(&[1.0, 2.0, 3.0]).unwrap() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn two_layer_mlp_by_hand() {
        let mut mlp = Mlp::zeros(2, MlpSpec::new(1, 2), 1, Activation::Relu, Head::Identity).unwrap();
        mlp.layers[0].weight = Tensor::new(2, 2, vec![1.0, -1.0, 2.0, 0.5]).unwrap();
        mlp.layers[0].bias = Tensor::vector(&[0.0, -1.0]);
        mlp.layers[1].weight = Tensor::new(1, 2, vec![3.0, -2.0]).unwrap();
        mlp.layers[1].bias = Tensor::scalar(0.25);
        // hidden = relu([1 - 2, 2 + 1 - 1]) = [0, 2]; out = 0 - 4 + 0.25
        assert_eq!(mlp.forward_values(&[1.0, 2.0]).unwrap(), vec![-3.75]);
        assert!(mlp.forward_values(&[1.0]).is_err());
    }

    #[test]
    fn mean_scale_head_splits_output() {
        let mlp = Mlp::zeros(2, MlpSpec::new(0, 0), 4, Activation::Tanh, Head::MeanScale).unwrap();
        let out = mlp.forward_values(&[1.0, 1.0]).unwrap();
        assert_eq!(&out[..2], &[0.0, 0.0]);
        assert!((out[2] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(Mlp::zeros(2, MlpSpec::new(0, 0), 3, Activation::Tanh, Head::MeanScale).is_err());
    }

    #[test]
    fn zero_lstm_halves_cell_state() {
        let cell = LstmCell::zeros(2, 2);
        let (h, c) = cell.step_values(&[0.3, -0.1], &[1.0, -2.0], &[5.0, 5.0]).unwrap();
        assert_eq!(c, vec![0.5, -1.0]);
        assert_eq!(h, vec![0.5 * 0.5f64.tanh(), 0.5 * (-1.0f64).tanh()]);
        let (h0, c0) = cell.step_values(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(h0, vec![0.0, 0.0]);
        assert_eq!(c0, vec![0.0, 0.0]);
    }

    #[test]
    fn lstm_matches_scripted_equations() {
        let mut r = rng(3);
        let cell = LstmCell::new(3, 2, &mut r);
        let (h, c, x) = (rand_vec(2, &mut r), rand_vec(2, &mut r), rand_vec(3, &mut r));
        let (gh, gc) = cell.step_values(&h, &c, &x).unwrap();
        let (wh, wc) = scripted_lstm(&cell, &h, &c, &x);
        for k in 0..2 {
            assert!((gh[k] - wh[k]).abs() < 1e-14);
            assert!((gc[k] - wc[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn sgru_weight_gradients_pass_grad_check() {
        let mut r = rng(5);
        let cell = StochasticGruCell::new(2, 2, 3, &mut r);
        let h = Tensor::vector(&rand_vec(3, &mut r));
        let x = Tensor::vector(&rand_vec(2, &mut r));
        let z = Tensor::vector(&rand_vec(2, &mut r));
        let target = rand_vec(3, &mut r);
        let mut points: Vec<Tensor> = tensors(&cell).into_iter().cloned().collect();
        points.extend([h, x, z]);
        let report = grad_check_many(
            |g, v| {
                let n = v.len();
                let mut idx = 0;
                let bound = cell.map_params(&mut |_| {
                    idx += 1;
                    v[idx - 1]
                });
                let out = bound.step(g, v[n - 3], v[n - 2], v[n - 1])?;
                let t = g.constant(Tensor::vector(&target));
                let d = g.sub(out, t)?;
                let sq = g.mul(d, d)?;
                Ok(g.sum(sq))
            },
            &points,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{}", report.max_rel_error);
    }

    #[test]
    fn param_tree_order_is_stable() {
        let cell = StochasticGruCell::zeros(2, 3, 4);
        let shapes: Vec<_> = tensors(&cell).iter().map(|t| t.shape()).collect();
        assert_eq!(shapes.len(), 12);
        assert_eq!(&shapes[..4], &[(4, 2), (4, 3), (4, 4), (4, 1)]);
        assert_eq!(param_count(&cell), 3 * (8 + 12 + 16 + 4));
    }

    proptest::proptest! {
        #[test]
        fn sgru_output_is_convex_combination(seed in 0u64..10_000) {
            let mut r = rng(seed);
            let cell = StochasticGruCell::new(2, 2, 3, &mut r);
            let h: Vec<f64> = rand_vec(3, &mut r).iter().map(|v| 3.0 * v).collect();
            let x = rand_vec(2, &mut r);
            let z = rand_vec(2, &mut r);
            let out = cell.step_values(&h, &x, &z).unwrap();
            let (_, cand) = scripted_sgru_parts(&cell, &h, &x, &z);
            for ((o, hp), c) in out.iter().zip(&h).zip(&cand) {
                let (lo, hi) = (hp.min(*c), hp.max(*c));
                proptest::prop_assert!(*o >= lo - 1e-15 && *o <= hi + 1e-15);
                if (hp - c).abs() > 1e-9 {
                    proptest::prop_assert!(*o > lo && *o < hi);
                }
            }
        }
    }
}
