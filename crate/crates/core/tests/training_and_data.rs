mod common;

use common::{bilinear_oracle, random_tensor, synthetic_image};
use mcan_core::data::{self, EvalOptions, Image};
use mcan_core::train::{
    self, adam_step, grad_check, grad_check_linear, micro_config, AdamParams, AdamState, TrainConfig,
    TrainingSet,
};
use mcan_core::{Model, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn micro_model_gradients_match_finite_differences() {
    let r = grad_check(&micro_config(), 7, 8).unwrap();
    assert!(r.max_rel_error <= 1e-3, "{r:?}");
    assert!(r.checked > 1000);
}

#[test]
fn linear_model_gradients_are_tight_and_repeatable() {
    let a = grad_check_linear(21).unwrap();
    assert!(a.max_rel_error <= 1e-5, "{a:?}");
    assert_eq!(grad_check_linear(21).unwrap(), a);
}

#[test]
fn repeated_single_batch_descent_lowers_the_loss() {
    let trials = 20;
    let mut improved = 0;
    for seed in 0..trials {
        let mut model = Model::build(micro_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let lr: Tensor = random_tensor([2, 3, 8, 8], 0.0, 1.0, &mut rng);
        let hr: Tensor = random_tensor([2, 3, 16, 16], 0.0, 1.0, &mut rng);
        let mut state = AdamState::new(&model.weights);
        let (first, _) = train::backward(&model, &lr, &hr, 2).unwrap();
        let mut last = first;
        for _ in 0..100 {
            let (loss, grads) = train::backward(&model, &lr, &hr, 2).unwrap();
            last = loss;
            adam_step(&mut model.weights, &grads, &mut state, 1e-3, &AdamParams::default()).unwrap();
        }
        let (after, _) = train::backward(&model, &lr, &hr, 2).unwrap();
        if after.min(last) <= first {
            improved += 1;
        }
    }
    assert!(improved * 100 >= 95 * trials, "{improved}/{trials}");
}

fn tiny_run(prefetch: bool, steps: u64) -> Model {
    let imgs: Vec<Image> = (0..3).map(|i| synthetic_image(i, 24, 24)).collect();
    let cfg = TrainConfig {
        batch: 2,
        patch: 8,
        max_steps: steps,
        scales: vec![2, 3],
        seed: 5,
        prefetch,
        ..TrainConfig::default()
    };
    let set = TrainingSet::from_images(&imgs, &cfg.scales, cfg.patch).unwrap();
    let mut model = Model::build(micro_config_all_scales(), 5).unwrap();
    train::train_loop(&mut model, &set, &cfg, None, &mut ()).unwrap();
    model
}

fn micro_config_all_scales() -> mcan_core::ModelConfig {
    mcan_core::ModelConfig {
        tail_scales: vec![2, 3],
        ..micro_config()
    }
}

#[test]
fn training_is_bitwise_reproducible_with_and_without_prefetch() {
    let a = tiny_run(false, 6);
    let b = tiny_run(true, 6);
    let c = tiny_run(false, 6);
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.weights, c.weights);
    let init = Model::build(micro_config_all_scales(), 5).unwrap();
    assert_eq!(tiny_run(true, 0).weights, init.weights);
    assert_ne!(a.weights, init.weights);
}

/// Y-channel PSNR computed from the definition.
fn psnr_oracle(a: &Image, b: &Image, shave: usize) -> f64 {
    let y = |p: [u8; 3]| 16.0 + (65.481 * p[0] as f64 + 128.553 * p[1] as f64 + 24.966 * p[2] as f64) / 255.0;
    let (mut sum, mut n) = (0.0, 0.0);
    for yy in shave..a.height() - shave {
        for xx in shave..a.width() - shave {
            let d = y(a.pixel(xx, yy)) - y(b.pixel(xx, yy));
            sum += d * d;
            n += 1.0;
        }
    }
    10.0 * (255.0f64 * 255.0 / (sum / n)).log10()
}

#[test]
fn metric_calibration() {
    let a = synthetic_image(1, 32, 32);
    let b = synthetic_image(2, 32, 32);
    assert_eq!(data::psnr(&a, &a, 2).unwrap(), f64::INFINITY);
    assert_eq!(data::ssim(&a, &a, 2).unwrap(), 1.0);
    assert!((data::psnr(&a, &b, 3).unwrap() - psnr_oracle(&a, &b, 3)).abs() < 1e-9);
    assert!((data::psnr_from_mse(1.0) - 48.13).abs() < 5e-3);
    let s = data::ssim(&a, &b, 2).unwrap();
    assert!(s < 1.0 && s > -1.0);
}

#[test]
fn self_ensemble_commutes_with_flips() {
    let model = Model::build(mcan_core::ModelConfig::named("MCAN-T", 2).unwrap(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..3 {
        let x: Tensor = random_tensor([1, 3, 6, 5], 0.0, 1.0, &mut rng);
        for g in [1u8, 2, 4] {
            let lhs = data::self_ensemble(&model, &data::dihedral(&x, g), 2).unwrap();
            let rhs = data::dihedral(&data::self_ensemble(&model, &x, 2).unwrap(), g);
            assert!(lhs.max_abs_diff(&rhs) <= 1e-5, "g={g}");
        }
    }
}

#[test]
fn zero_model_eval_equals_bilinear_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let mut hrs = Vec::new();
    for i in 0..3 {
        let img = synthetic_image(40 + i, 36, 30);
        data::save_png(&img, &dir.path().join(format!("img{i}.png"))).unwrap();
        hrs.push(img);
    }
    let model = Model::zeroed(mcan_core::ModelConfig::named("MCAN-S", 3).unwrap()).unwrap();
    let report = data::evaluate(&model, dir.path(), EvalOptions { scale: 3, ensemble: false }).unwrap();
    assert_eq!(report.rows.len(), 3);
    let mut mean = 0.0;
    for (row, hr) in report.rows.iter().zip(&hrs) {
        let lr = data::bicubic_downscale(hr, 3).unwrap();
        let up = bilinear_oracle(&data::to_tensor::<f64>(&lr), 3);
        let sr = data::to_image(&up).unwrap();
        let want = psnr_oracle(&sr, hr, 3);
        assert!((row.psnr - want).abs() < 1e-9, "{}: {} vs {want}", row.name, row.psnr);
        mean += want / 3.0;
    }
    assert!((report.mean_psnr - mean).abs() < 1e-9);
    let records = report.to_records();
    assert_eq!(records.lines().count(), 4);
    assert!(records.lines().last().unwrap().starts_with("MEAN,"));
}
