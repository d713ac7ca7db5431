use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use srnn::forecast::{latent_rng, Simulator};
use srnn::layers::MlpSpec;
use srnn::model::{ModelDims, RngNoise, StochasticRnn, ZeroNoise};

fn model() -> StochasticRnn {
    let dims = ModelDims {
        covariates: 2,
        latent: 3,
        hidden: 5,
        inference_hidden: 4,
        prior_mlp: MlpSpec::new(1, 8),
        posterior_mlp: MlpSpec::new(1, 8),
        emission_mlp: MlpSpec::new(1, 8),
    };
    StochasticRnn::new(&dims, &mut ChaCha8Rng::seed_from_u64(8)).unwrap()
}

fn mean_and_var(sim: &mut Simulator, n: usize, seed: u64, xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let paths: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            sim.simulate(&[0.2; 5], xs, &mut RngNoise(latent_rng(seed, i)), &mut ZeroNoise)
                .unwrap()
                .y
        })
        .collect();
    let t = xs.len();
    let mean: Vec<f64> = (0..t).map(|k| paths.iter().map(|p| p[k]).sum::<f64>() / n as f64).collect();
    let var = (0..t)
        .map(|k| paths.iter().map(|p| (p[k] - mean[k]).powi(2)).sum::<f64>() / (n as f64 - 1.0))
        .collect();
    (mean, var)
}

#[test]
fn mean_path_converges_with_more_simulations() {
    let m = model();
    let mut sim = Simulator::new(&m.generative);
    let xs: Vec<Vec<f64>> = (0..10).map(|t| vec![(t as f64).sin(), (t as f64).cos()]).collect();
    let (m_small, v_small) = mean_and_var(&mut sim, 1_000, 1, &xs);
    let (m_large, v_large) = mean_and_var(&mut sim, 10_000, 2, &xs);
    for k in 0..xs.len() {
        let pooled = (v_small[k] / 1_000.0 + v_large[k] / 10_000.0).sqrt();
        assert!((m_small[k] - m_large[k]).abs() < 3.0 * pooled.max(1e-12), "step {k}");
    }
}
