use c4_core::augment::AugmentConfig;
use c4_core::cascade::{CascadeModel, StageNetConfig};
use c4_core::data::{stream_rng, synthesize_dataset, MondrianSpec};
use c4_core::eval::{cross_validate, evaluate, split_fold, Estimator};
use c4_core::statics::StaticPreset;
use c4_core::train::{train, TrainConfig};
use c4_core::{von_kries_correct, Illuminant};

fn tiny_setup() -> (StageNetConfig, TrainConfig, AugmentConfig) {
    let net = StageNetConfig::from_channels(&[4, 3], 3, &[2, 1], 0.0);
    let cfg = TrainConfig { batch_size: 4, learning_rate: 3e-3, pretrain_epochs: 3, finetune_epochs: 3, seed: 5, ..Default::default() };
    let aug = AugmentConfig { output_size: 16, rescales_per_image: 1, gamma: 1.0, ..Default::default() };
    (net, cfg, aug)
}

#[test]
fn gray_world_cross_validation_covers_every_sample_once() {
    let spec = MondrianSpec { height: 16, width: 16, ..Default::default() };
    let mut samples = synthesize_dataset(&spec, 30, 11).unwrap();
    c4_core::data::ensure_folds(&mut samples, 3, 0).unwrap();
    let cv = cross_validate(&samples, 3, |_, _| Ok(StaticPreset::GrayWorld)).unwrap();
    assert_eq!(cv.pooled.n, 30);
    assert_eq!(cv.folds.iter().map(|f| f.n).sum::<usize>(), 30);
    let direct = evaluate(&StaticPreset::GrayWorld, &samples).unwrap();
    assert!((direct.mean - cv.pooled.mean).abs() < 1e-12);
    for k in 0..3 {
        let (train_set, test_set) = split_fold(&samples, k);
        assert_eq!(train_set.len() + test_set.len(), 30);
        assert!(test_set.iter().all(|s| s.fold == Some(k)));
    }
}

#[test]
fn correcting_with_the_true_illuminant_removes_the_cast() {
    let spec = MondrianSpec { height: 16, width: 16, gray_balanced: true, ..Default::default() };
    for s in synthesize_dataset(&spec, 10, 3).unwrap() {
        let fixed = von_kries_correct(&s.image, &s.illuminant).unwrap();
        let e = StaticPreset::GrayWorld.estimate(&fixed).unwrap();
        assert!(e.angle_to(&Illuminant::neutral()).degrees() < 1e-6);
    }
}

#[test]
fn training_is_reproducible_and_finite() {
    let spec = MondrianSpec { height: 16, width: 16, noise_std: 0.01, ..Default::default() };
    let samples = synthesize_dataset(&spec, 12, 8).unwrap();
    let (net, cfg, aug) = tiny_setup();
    let init = CascadeModel::new(net, 2, &mut stream_rng(1, 0)).unwrap();
    let a = train(&init, &samples, &cfg, &aug).unwrap();
    let b = train(&init, &samples, &cfg, &aug).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.trace.len(), 6);
    assert!(a.trace.iter().all(|e| e.mean_loss_deg.is_finite() && e.mean_loss_deg >= 0.0));
    let report = evaluate(&a.model, &samples).unwrap();
    assert!(report.mean.is_finite() && report.worst25_mean >= report.mean && report.best25_mean <= report.mean);
}
