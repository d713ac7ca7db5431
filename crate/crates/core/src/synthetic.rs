//! Noisy sine series with phase covariates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::SyntheticConfig;
use crate::data::SeriesDataset;
use crate::error::Result;

/// `y_t = level + amplitude·sin(2πt/period) + noise_scale·e_t` where `e_t` is a
/// unit-variance AR(1) process; covariates are the sine and cosine of the phase.
pub fn generate(cfg: &SyntheticConfig, rows: usize, covariate_names: &[String], seed: u64) -> Result<SeriesDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let innovation = (1.0 - cfg.ar_coef * cfg.ar_coef).sqrt();
    let mut e: f64 = StandardNormal.sample(&mut rng);
    let mut x = Vec::with_capacity(rows);
    let mut y = Vec::with_capacity(rows);
    for t in 0..rows {
        if t > 0 {
            let eta: f64 = StandardNormal.sample(&mut rng);
            e = cfg.ar_coef * e + innovation * eta;
        }
        let phase = 2.0 * std::f64::consts::PI * t as f64 / cfg.period;
        x.push(vec![phase.sin(), phase.cos()]);
        y.push(cfg.level + cfg.amplitude * phase.sin() + cfg.noise_scale * e);
    }
    SeriesDataset::new("y", covariate_names.to_vec(), x, y)
}
