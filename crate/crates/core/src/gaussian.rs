//! Diagonal Gaussians: reparameterized sampling, log-density and analytic KL.
//!
//! [`GaussianDiag`] holds concrete parameters; [`GaussianNode`] holds the same
//! parameters as graph nodes so the ELBO can differentiate through them.

use std::f64::consts::PI;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `0.5 * ln(2 * pi)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiag {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl GaussianDiag {
    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != scale.len() {
            return Err(Error::Distribution(format!(
                "mean has {} entries, scale has {}",
                mean.len(),
                scale.len()
            )));
        }
        if let Some(s) = scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Distribution(format!("scale must be positive and finite, got {s}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Distribution("mean must be finite".into()));
        }
        Ok(GaussianDiag { mean, scale })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianDiag {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    fn check_len(&self, what: &'static str, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::shape(what, format!("length {n} vs distribution dim {}", self.dim())));
        }
        Ok(())
    }

    /// `mean + scale * eps`
    pub fn sample_with(&self, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_len("reparameterize", eps.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.scale)
            .zip(eps)
            .map(|((m, s), e)| m + s * e)
            .collect())
    }

    pub fn log_density(&self, value: &[f64]) -> Result<f64> {
        self.check_len("log_density", value.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.scale)
            .zip(value)
            .map(|((m, s), v)| {
                let d = (v - m) / s;
                -HALF_LN_2PI - s.ln() - 0.5 * d * d
            })
            .sum())
    }

    /// `KL(self || p)`
    pub fn kl(&self, p: &GaussianDiag) -> Result<f64> {
        self.check_len("kl_diag", p.dim())?;
        Ok((0..self.dim())
            .map(|i| {
                let (mq, sq) = (self.mean[i], self.scale[i]);
                let (mp, sp) = (p.mean[i], p.scale[i]);
                (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5
            })
            .sum())
    }

    /// Density of a scalar Gaussian, for quadrature checks.
    pub fn density_1d(mean: f64, scale: f64, v: f64) -> f64 {
        let d = (v - mean) / scale;
        (-0.5 * d * d).exp() / (scale * (2.0 * PI).sqrt())
    }
}

/// Diagonal Gaussian whose parameters live on a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct GaussianNode {
    pub mean: Var,
    pub scale: Var,
}

impl GaussianNode {
    pub fn new(g: &Graph, mean: Var, scale: Var) -> Result<Self> {
        let (ms, ss) = (g.value(mean).shape(), g.value(scale).shape());
        if ms != ss || ms.1 != 1 {
            return Err(Error::shape(
                "gaussian",
                format!("mean {}x{} vs scale {}x{}", ms.0, ms.1, ss.0, ss.1),
            ));
        }
        Ok(GaussianNode { mean, scale })
    }

    pub fn dim(&self, g: &Graph) -> usize {
        g.value(self.mean).rows()
    }

    pub fn to_values(&self, g: &Graph) -> Result<GaussianDiag> {
        GaussianDiag::new(g.value(self.mean).data().to_vec(), g.value(self.scale).data().to_vec())
    }

    fn check_scale(&self, g: &Graph, op: &str) -> Result<()> {
        if let Some(s) = g.value(self.scale).data().iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Distribution(format!("{op}: scale must be positive, got {s}")));
        }
        Ok(())
    }
}

/// `mean + scale * eps`. Gradients reach the mean and scale, never `eps`.
pub fn reparameterize(g: &mut Graph, d: &GaussianNode, eps: &[f64]) -> Result<Var> {
    let dim = d.dim(g);
    if eps.len() != dim {
        return Err(Error::shape("reparameterize", format!("eps length {} vs dim {dim}", eps.len())));
    }
    let e = g.constant(Tensor::vector(eps));
    let spread = g.mul(d.scale, e)?;
    g.add(d.mean, spread)
}

/// Log-density of `value` summed over dimensions, as a scalar node.
pub fn log_density(g: &mut Graph, d: &GaussianNode, value: Var) -> Result<Var> {
    d.check_scale(g, "log_density")?;
    let dim = d.dim(g);
    if g.value(value).shape() != (dim, 1) {
        let (r, c) = g.value(value).shape();
        return Err(Error::shape("log_density", format!("value {r}x{c} vs dim {dim}")));
    }
    let diff = g.sub(value, d.mean)?;
    let z = g.div(diff, d.scale)?;
    let z2 = g.mul(z, z)?;
    let quad = g.scale(z2, -0.5);
    let log_s = g.log(d.scale);
    let per_dim = g.sub(quad, log_s)?;
    let total = g.sum(per_dim);
    Ok(g.offset(total, -HALF_LN_2PI * dim as f64))
}

/// Analytic `KL(q || p)` as a scalar node.
pub fn kl_diag(g: &mut Graph, q: &GaussianNode, p: &GaussianNode) -> Result<Var> {
    q.check_scale(g, "kl_diag")?;
    p.check_scale(g, "kl_diag")?;
    let (dq, dp) = (q.dim(g), p.dim(g));
    if dq != dp {
        return Err(Error::shape("kl_diag", format!("q dim {dq} vs p dim {dp}")));
    }
    let log_sp = g.log(p.scale);
    let log_sq = g.log(q.scale);
    let log_ratio = g.sub(log_sp, log_sq)?;
    let var_q = g.mul(q.scale, q.scale)?;
    let dm = g.sub(q.mean, p.mean)?;
    let dm2 = g.mul(dm, dm)?;
    let num = g.add(var_q, dm2)?;
    let var_p = g.mul(p.scale, p.scale)?;
    let two_var_p = g.scale(var_p, 2.0);
    let frac = g.div(num, two_var_p)?;
    let per_dim = g.add(log_ratio, frac)?;
    let total = g.sum(per_dim);
    Ok(g.offset(total, -0.5 * dq as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn node(g: &mut Graph, d: &GaussianDiag) -> GaussianNode {
        let m = g.constant(Tensor::vector(d.mean()));
        let s = g.constant(Tensor::vector(d.scale()));
        GaussianNode::new(g, m, s).unwrap()
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(GaussianDiag::new(vec![0.0], vec![0.0]).is_err());
        assert!(GaussianDiag::new(vec![0.0], vec![-1.0]).is_err());
        assert!(GaussianDiag::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(GaussianDiag::new(vec![], vec![]).is_err());
        assert!(GaussianDiag::new(vec![0.0], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn zero_noise_returns_mean() {
        let d = GaussianDiag::new(vec![1.0, -3.0], vec![2.0, 0.1]).unwrap();
        assert_eq!(d.sample_with(&[0.0, 0.0]).unwrap(), vec![1.0, -3.0]);
        let mut g = Graph::new();
        let n = node(&mut g, &d);
        let s = reparameterize(&mut g, &n, &[0.0, 0.0]).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, -3.0]);
        assert!(reparameterize(&mut g, &n, &[0.0]).is_err());
    }

    #[test]
    fn standard_gaussian_returns_noise() {
        let d = GaussianDiag::standard(3);
        assert_eq!(d.sample_with(&[0.5, -1.5, 2.0]).unwrap(), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn reparameterized_gradient_flows_to_parameters_only() {
        let mut g = Graph::new();
        let m = g.leaf(Tensor::vector(&[1.0]));
        let s = g.leaf(Tensor::vector(&[2.0]));
        let n = GaussianNode::new(&g, m, s).unwrap();
        let z = reparameterize(&mut g, &n, &[0.75]).unwrap();
        let out = g.sum(z);
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.wrt(m).data(), &[1.0]);
        assert_eq!(grads.wrt(s).data(), &[0.75]);
    }

    #[test]
    fn reparameterized_draws_reproduce_moments() {
        let d = GaussianDiag::new(vec![1.0, -2.0], vec![0.5, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let s = d.sample_with(&eps).unwrap();
            for i in 0..2 {
                sum[i] += s[i];
                sq[i] += s[i] * s[i];
            }
        }
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let sigma = d.scale()[i];
            let se_mean = sigma / (n as f64).sqrt();
            let se_std = sigma / (2.0 * n as f64).sqrt();
            assert!((mean - d.mean()[i]).abs() < 3.0 * se_mean);
            assert!((var.sqrt() - sigma).abs() < 3.0 * se_std);
        }
    }

    #[test]
    fn log_density_standard_at_zero() {
        let d = GaussianDiag::standard(1);
        assert!((d.log_density(&[0.0]).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn log_density_at_mean_has_no_quadratic_term() {
        let d = GaussianDiag::new(vec![1.0, 2.0], vec![0.3, 4.0]).unwrap();
        let want = -(HALF_LN_2PI + 0.3f64.ln()) - (HALF_LN_2PI + 4.0f64.ln());
        assert!((d.log_density(&[1.0, 2.0]).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn log_density_matches_density_formula() {
        let d = GaussianDiag::new(vec![1.0], vec![2.0]).unwrap();
        let direct = GaussianDiag::density_1d(1.0, 2.0, 3.0).ln();
        assert!((d.log_density(&[3.0]).unwrap() - direct).abs() < 1e-14);
        let mut g = Graph::new();
        let n = node(&mut g, &d);
        let v = g.constant(Tensor::vector(&[3.0]));
        let lp = log_density(&mut g, &n, v).unwrap();
        assert!((g.scalar(lp) - direct).abs() < 1e-14);
    }

    #[test]
    fn log_density_integrates_to_one() {
        let (m, s) = (1.0, 2.0);
        let d = GaussianDiag::new(vec![m], vec![s]).unwrap();
        let n = 20_000;
        let (lo, hi) = (m - 10.0 * s, m + 10.0 * s);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * d.log_density(&[x]).unwrap().exp();
        }
        assert!((total * h - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let d = GaussianDiag::new(vec![0.3, -1.0], vec![0.7, 2.0]).unwrap();
        assert!(d.kl(&d).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kl_shifted_unit_gaussian() {
        let q = GaussianDiag::new(vec![1.0], vec![1.0]).unwrap();
        let p = GaussianDiag::standard(1);
        assert_eq!(q.kl(&p).unwrap(), 0.5);
        let mut g = Graph::new();
        let (qn, pn) = (node(&mut g, &q), node(&mut g, &p));
        let k = kl_diag(&mut g, &qn, &pn).unwrap();
        assert!((g.scalar(k) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_mismatched_dims() {
        let q = GaussianDiag::standard(2);
        let p = GaussianDiag::standard(3);
        assert!(q.kl(&p).is_err());
        let mut g = Graph::new();
        let (qn, pn) = (node(&mut g, &q), node(&mut g, &p));
        assert!(kl_diag(&mut g, &qn, &pn).is_err());
        let zero = g.constant(Tensor::vector(&[0.0, 0.0]));
        let bad = GaussianNode::new(&g, qn.mean, zero).unwrap();
        assert!(matches!(kl_diag(&mut g, &bad, &qn), Err(Error::Distribution(_))));
    }

    #[test]
    fn kl_gradients_pass_grad_check() {
        let pts = vec![
            Tensor::vector(&[0.2, -0.5, 1.0]),
            Tensor::vector(&[0.8, 1.3, 0.4]),
            Tensor::vector(&[-0.1, 0.6, 0.0]),
            Tensor::vector(&[1.5, 0.9, 0.7]),
        ];
        let report = grad_check_many(
            |g, v| {
                let q = GaussianNode::new(g, v[0], v[1])?;
                let p = GaussianNode::new(g, v[2], v[3])?;
                kl_diag(g, &q, &p)
            },
            &pts,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "{}", report.max_rel_error);
    }

    proptest! {
        #[test]
        fn kl_is_non_negative_and_graph_matches_values(
            mq in proptest::collection::vec(-3.0f64..3.0, 4),
            sq in proptest::collection::vec(0.05f64..3.0, 4),
            mp in proptest::collection::vec(-3.0f64..3.0, 4),
            sp in proptest::collection::vec(0.05f64..3.0, 4),
        ) {
            let q = GaussianDiag::new(mq, sq).unwrap();
            let p = GaussianDiag::new(mp, sp).unwrap();
            let k = q.kl(&p).unwrap();
            prop_assert!(k >= -1e-12);
            prop_assert!(q.kl(&q).unwrap().abs() < 1e-12);
            let mut g = Graph::new();
            let (qn, pn) = (node(&mut g, &q), node(&mut g, &p));
            let kn = kl_diag(&mut g, &qn, &pn).unwrap();
            prop_assert!((g.scalar(kn) - k).abs() <= 1e-10 * k.abs().max(1.0));
        }
    }
}
