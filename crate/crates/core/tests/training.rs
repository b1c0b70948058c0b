use must_core::fixture::{render, Domain};
use must_core::model::{ModelConfig, Vit};
use must_core::rng::rng_from;
use must_core::trainer::{adapt, evaluate_report, AdaptData, Metric, Mode, NoHooks, TrainConfig, Trainer};
use must_core::{Image, Params};

fn small_model() -> (Vit, Params) {
    let vit = Vit::new(ModelConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 16,
        depth: 2,
        num_heads: 2,
        proj_dim: 8,
        num_classes: 3,
        logit_scale: 10.0,
    })
    .unwrap();
    let params = vit.init_params(&mut rng_from(3));
    (vit, params)
}

fn images(n: usize, seed: u64) -> Vec<Image> {
    let mut rng = rng_from(seed);
    (0..n).map(|i| render(i % 3, Domain::Target, 16, &mut rng)).collect()
}

fn config() -> TrainConfig {
    TrainConfig { batch_size: 4, epochs: 1, mask_patch_size: 8, base_lr: 1e-2, ..TrainConfig::default() }
}

#[test]
fn inactive_objectives_leave_parameters_untouched() {
    let (vit, params) = small_model();
    let cfg = TrainConfig {
        lambda_reg: 0.0,
        lambda_align: 0.0,
        mask_ratio: 0.0,
        threshold: 1.01,
        weight_decay: 0.0,
        ..config()
    };
    let mut trainer = Trainer::new(vit, params.clone(), cfg, 4).unwrap();
    let imgs = images(4, 1);
    let refs: Vec<&Image> = imgs.iter().collect();
    let loss = trainer.train_step(&refs, &[0, 1, 2, 3], 0).unwrap();
    assert_eq!(loss.total, 0.0);
    assert!(trainer.params.bitwise_eq(&params));
    assert_eq!(trainer.optim.t, 1);
}

#[test]
fn frozen_classifier_is_bitwise_unchanged() {
    let (vit, params) = small_model();
    let head_before = vit.head_weights(&params).to_vec();
    let cfg = TrainConfig { freeze_classifier: true, threshold: 0.0, epochs: 3, ..config() };
    let imgs = images(8, 2);
    let mut trainer = Trainer::new(vit, params.clone(), cfg, imgs.len()).unwrap();
    let data = AdaptData { train: &imgs, test: &[], test_labels: &[] };
    adapt(&mut trainer, &data, None, &mut NoHooks).unwrap();
    assert_eq!(trainer.step, 6);
    let after = trainer.vit().head_weights(&trainer.params);
    assert!(head_before.iter().zip(after).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(!trainer.params.bitwise_eq(&params), "the backbone should still move");
}

#[test]
fn one_small_step_descends_on_its_batch() {
    let (vit, params) = small_model();
    // scaled peak lr = 0.0256 * 4 / 256 = 4e-4; the first cosine step runs at the peak
    let cfg = TrainConfig { base_lr: 0.0256, threshold: 0.0, epochs: 100, ..config() };
    let mut trainer = Trainer::new(vit, params, cfg, 4).unwrap();
    let imgs = images(4, 3);
    let refs: Vec<&Image> = imgs.iter().collect();
    let batch = trainer.prepare_batch(&refs, &[0, 1, 2, 3], 0).unwrap();
    let before = trainer.evaluate_objective(&batch).unwrap().breakdown.total;
    trainer.step_on(&batch).unwrap();
    let after = trainer.evaluate_objective(&batch).unwrap().breakdown.total;
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn zero_epochs_only_evaluates() {
    let (vit, params) = small_model();
    let imgs = images(6, 4);
    let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
    let mut trainer = Trainer::new(vit, params.clone(), TrainConfig { epochs: 0, ..config() }, imgs.len()).unwrap();
    let data = AdaptData { train: &imgs, test: &imgs, test_labels: &labels };
    let report = adapt(&mut trainer, &data, None, &mut NoHooks).unwrap();
    assert!(trainer.params.bitwise_eq(&params));
    assert!(report.evals.is_empty());
    assert_eq!(report.final_eval, report.initial);
    assert!(report.initial.is_some());
}

#[test]
fn transductive_runs_without_train_split() {
    let (vit, params) = small_model();
    let test = images(5, 5);
    let labels: Vec<usize> = (0..5).map(|i| i % 3).collect();
    let cfg = TrainConfig { mode: Mode::Transductive, ..config() };
    let mut trainer = Trainer::new(vit, params, cfg, test.len()).unwrap();
    let data = AdaptData { train: &[], test: &test, test_labels: &labels };
    let report = adapt(&mut trainer, &data, None, &mut NoHooks).unwrap();
    assert_eq!(report.steps, 2);
    assert_eq!(report.inferred_labels.unwrap().len(), 5);

    let cfg = TrainConfig { mode: Mode::Standard, ..config() };
    let (vit, params) = small_model();
    let mut trainer = Trainer::new(vit, params, cfg, 5).unwrap();
    assert!(adapt(&mut trainer, &data, None, &mut NoHooks).is_err());
}

#[test]
fn evaluation_metrics() {
    let labels = [0, 1, 2, 2, 1];
    let r = evaluate_report(&labels, &labels, 3).unwrap();
    assert_eq!(r.metric(Metric::Accuracy), 1.0);
    assert_eq!(r.metric(Metric::MeanPerClass), 1.0);

    // class 0 (three images) all right, class 1 (one image) wrong
    let r = evaluate_report(&[0, 0, 0, 0], &[0, 0, 0, 1], 2).unwrap();
    assert_eq!(r.accuracy, 0.75);
    assert_eq!(r.mean_per_class, 0.5);
}
