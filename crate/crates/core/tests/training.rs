use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srnn::config::RunConfig;
use srnn::data::{window, ColumnStats, Scaler, SeriesDataset, SplitPlan};
use srnn::layers::MlpSpec;
use srnn::model::{FrozenNoise, ModelDims, StochasticRnn};
use srnn::trainer::{evaluate_elbo, sgvb_step, train, AdamConfig, AdamState, Checkpoint, TrainConfig};

fn small_dims(covariates: usize) -> ModelDims {
    ModelDims {
        covariates,
        latent: 2,
        hidden: 4,
        inference_hidden: 4,
        prior_mlp: MlpSpec::new(1, 8),
        posterior_mlp: MlpSpec::new(1, 8),
        emission_mlp: MlpSpec::new(1, 8),
    }
}

fn constant_target(seed: u64) -> SeriesDataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..200).map(|_| vec![r.random_range(-1.0..1.0)]).collect();
    SeriesDataset::new("y", vec!["x".into()], x, vec![1.5; 200]).unwrap()
}

fn plan() -> SplitPlan {
    SplitPlan {
        train: 120,
        val: 40,
        cond: 10,
        seq_len: 10,
        pred: 30,
    }
}

fn cfg(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        dims: small_dims(1),
        epochs,
        patience: epochs,
        clip_norm: Some(10.0),
        adam: AdamConfig::default(),
        seed,
    }
}

#[test]
fn constant_target_improves_validation_bound() {
    for seed in 0..5 {
        let w = window(&constant_target(seed), &plan()).unwrap();
        let (_, report) = train(&w, &cfg(seed, 25)).unwrap();
        assert!(
            report.best_val_elbo() > report.initial_val_elbo,
            "seed {seed}: {} vs {}",
            report.best_val_elbo(),
            report.initial_val_elbo
        );
    }
}

#[test]
fn fixed_seed_reproduces_the_run() {
    let w = window(&constant_target(3), &plan()).unwrap();
    let (a, ra) = train(&w, &cfg(9, 6)).unwrap();
    let (b, rb) = train(&w, &cfg(9, 6)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.train_elbo, rb.train_elbo);
    assert_eq!(ra.val_elbo, rb.val_elbo);
    assert_eq!(ra.best_epoch, rb.best_epoch);
    assert_eq!(ra.train_elbo.len(), ra.epochs_run());
}

#[test]
fn loss_on_a_fixed_batch_decreases() {
    let mut improved = 0;
    for seed in 0..5 {
        let w = window(&constant_target(seed), &plan()).unwrap();
        let seg = &w.train[0];
        let dims = small_dims(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = StochasticRnn::new(&dims, &mut rng).unwrap();
        let pool = FrozenNoise::from_rng(&mut rng, seg.len() * dims.latent);
        let mut adam = AdamState::new(&model, AdamConfig::default());
        let h0 = vec![0.0; dims.hidden];
        let g0 = vec![0.0; dims.inference_hidden];
        let mut losses = Vec::new();
        for _ in 0..11 {
            let mut noise = pool.clone();
            let (e, _, _) = sgvb_step(&mut model, &mut adam, seg, &h0, &g0, None, &mut noise).unwrap();
            losses.push(-e);
        }
        improved += (losses[10] < losses[0]) as usize;
    }
    assert!(improved >= 4, "{improved}/5");
}

#[test]
fn empty_training_span_is_rejected() {
    let mut w = window(&constant_target(0), &plan()).unwrap();
    w.train.clear();
    assert!(train(&w, &cfg(0, 1)).is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let w = window(&constant_target(1), &plan()).unwrap();
    let (model, _) = train(&w, &cfg(2, 2)).unwrap();
    let ck = Checkpoint {
        model,
        config: RunConfig::profile("synthetic").unwrap(),
        scaler: Scaler {
            covariates: vec![ColumnStats { name: "x".into(), mean: 0.1, std: 0.7 }],
            target: ColumnStats { name: "y".into(), mean: 1.0 / 3.0, std: 2.0f64.sqrt() },
        },
    };
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.srnn");
    let second = dir.path().join("b.srnn");
    ck.save(&first).unwrap();
    let loaded = Checkpoint::load(&first).unwrap();
    loaded.save(&second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    assert_eq!(loaded, ck);

    let seg = &w.val;
    let h0 = vec![0.0; 4];
    let pool = FrozenNoise::new(vec![0.3, -1.2, 0.8]);
    let before = evaluate_elbo(&ck.model, seg, &h0, &h0, &mut pool.clone()).unwrap().0;
    let after = evaluate_elbo(&loaded.model, seg, &h0, &h0, &mut pool.clone()).unwrap().0;
    assert_eq!(before.to_bits(), after.to_bits());

    let bytes = std::fs::read(&first).unwrap();
    std::fs::write(&second, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Checkpoint::load(&second), Err(srnn::Error::Corrupt(_))));
}

#[test]
fn pm25_profile_builds_table_dims() {
    let c = RunConfig::profile("pm25").unwrap();
    let tc = c.train_config();
    assert_eq!((tc.dims.latent, tc.dims.hidden, tc.dims.inference_hidden), (50, 64, 64));
    assert_eq!(tc.dims.prior_mlp, MlpSpec::new(4, 64));
    assert_eq!(tc.dims.covariates, 6);
    assert_eq!(tc.adam.learning_rate, 0.001);
    assert_eq!(tc.clip_norm, Some(10.0));
    let model = StochasticRnn::zeros(&tc.dims).unwrap();
    assert_eq!(model.dims(), tc.dims);
}
