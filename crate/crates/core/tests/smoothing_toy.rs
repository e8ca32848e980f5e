//! Smoothing trainers on the toy datasets, end to end.

use heatsmooth::certify::{self, CertifyConfig, CertifyMode};
use heatsmooth::data::{gen_1d_outlier, gen_2d_clusters, Dataset};
use heatsmooth::model::{Activation, MlpModel};
use heatsmooth::rng;
use heatsmooth::smoothing::*;
use heatsmooth::Tensor;

fn fit(ds: &Dataset, dims: &[usize], epochs: usize, lr: f64, seed: u64) -> MlpModel {
    let f0 = MlpModel::new_random(dims, Activation::Relu, seed).unwrap();
    let cfg = SupervisedConfig {
        epochs,
        lr,
        batch_size: ds.len(),
        seed,
        ..SupervisedConfig::default()
    };
    train_supervised(&f0, ds.labeled("fit").unwrap(), &cfg).unwrap().0
}

fn certified_accuracy(model: &MlpModel, test: &Dataset, cfg: &CertifyConfig, radius: f64) -> f64 {
    let records: Vec<_> = (0..test.len())
        .map(|i| {
            let mut r = rng::stream(3, &[i as u64]);
            certify::certify(model, test.inputs().row(i), i, cfg, &mut r).unwrap()
        })
        .collect();
    certify::certified_accuracy_curve(&records, test.labels().unwrap(), &[radius]).unwrap()[0].1
}

#[test]
fn noisy_variant_certifies_more_than_an_overfit_baseline() {
    let train = gen_2d_clusters(100, 1.0, 1).unwrap();
    let test = gen_2d_clusters(1000, 1.0, 2).unwrap();
    let base = fit(&train, &[2, 64, 64, 2], 5000, 0.2, 1);
    assert_eq!(base.predict(&[-1.5, 0.0]).unwrap(), 1, "baseline should memorize the outlier");
    let cfg = SmoothingConfig {
        sigma: 0.1,
        variant: Variant::ImagenetEq9,
        epochs_per_timestep: 100,
        lr: 0.05,
        seed: 1,
        ..SmoothingConfig::default()
    };
    let (smoothed, _) = train_imagenet_variant(&base, train.inputs(), &cfg).unwrap();
    let cert = CertifyConfig {
        sigma: 0.1,
        mode: CertifyMode::Lbound,
        ..CertifyConfig::default()
    };
    let before = certified_accuracy(&base, &test, &cert, 0.05);
    let after = certified_accuracy(&smoothed, &test, &cert, 0.05);
    assert!(after > before, "certified accuracy at r=0.05: {before} -> {after}");
}

fn grid_predictions(model: &MlpModel, n: usize) -> Vec<usize> {
    let xs = Tensor::matrix(n, 1, (0..n).map(|i| -1.2 + 2.4 * i as f64 / (n - 1) as f64).collect()).unwrap();
    heatsmooth::ProbabilityModel::predict_batch(model, &xs).unwrap()
}

#[test]
fn smoothing_a_smoothed_model_is_nearly_idempotent() {
    let ds = gen_1d_outlier(40, -0.5, 4).unwrap();
    let teacher = fit(&ds, &[1, 32, 32, 2], 3000, 0.1, 4);
    let cfg = SmoothingConfig {
        sigma: 0.3,
        epochs_per_timestep: 40,
        lr: 0.05,
        seed: 4,
        ..SmoothingConfig::default()
    };
    let inputs = ds.without_labels();
    let (once, _) = train_heatsmooth(&teacher, inputs.inputs(), &cfg).unwrap();
    let (twice, _) = train_heatsmooth(&once, inputs.inputs(), &SmoothingConfig { seed: 5, ..cfg }).unwrap();
    let (a, b) = (grid_predictions(&once, 1001), grid_predictions(&twice, 1001));
    let changed = a.iter().zip(&b).filter(|(p, q)| p != q).count() as f64 / a.len() as f64;
    assert!(changed <= 0.05, "{:.1}% of grid predictions changed", 100.0 * changed);
}

#[test]
fn noise_free_baseline_is_plain_training() {
    let ds = gen_2d_clusters(60, 0.5, 6).unwrap();
    let f0 = MlpModel::new_random(&[2, 16, 2], Activation::Relu, 6).unwrap();
    let cfg = SmoothingConfig {
        sigma: 0.0,
        variant: Variant::NoiseBaseline,
        epochs_per_timestep: 30,
        lr: 0.05,
        batch_size: 16,
        seed: 6,
        ..SmoothingConfig::default()
    };
    let (noisy, report) = train_noise_baseline(&f0, ds.labeled("baseline").unwrap(), &cfg).unwrap();
    let plain_cfg = SupervisedConfig {
        epochs: 30,
        lr: 0.05,
        batch_size: 16,
        seed: 6,
        ..SupervisedConfig::default()
    };
    let (plain, losses) = train_supervised(&f0, ds.labeled("plain").unwrap(), &plain_cfg).unwrap();
    assert_eq!(noisy.layers(), plain.layers());
    assert_eq!(report.epoch_losses, losses);

    let noisy_cfg = SmoothingConfig { sigma: 0.25, ..cfg };
    let (_, report) = train_noise_baseline(&f0, ds.labeled("baseline").unwrap(), &noisy_cfg).unwrap();
    assert!(report.epoch_losses.last().unwrap() < report.epoch_losses.first().unwrap());
}

#[test]
fn self_distillation_loss_vanishes_with_sigma() {
    let teacher = MlpModel::new_random(&[2, 16, 3], Activation::Tanh, 7).unwrap().frozen();
    let batch = Tensor::matrix(4, 2, vec![0.1, 0.2, -0.3, 0.5, 0.9, -0.1, 0.0, 0.0]).unwrap();
    let loss_at = |sigma: f64| {
        let cfg = SmoothingConfig {
            sigma,
            ..SmoothingConfig::default()
        };
        heatsmoothing_minibatch_loss(&teacher, &teacher, &batch, &cfg, &mut rng::stream(7, &[]))
            .unwrap()
            .value()
    };
    let (big, small) = (loss_at(1.0), loss_at(1e-3));
    assert!(big > 0.0);
    assert!(small <= 1e-5 * big, "{small} vs {big}");
}
