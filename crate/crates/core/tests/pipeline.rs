use metta::analysis::{emit_report, evaluate_grid, read_report, EvalRow, Method, ReportFormat};
use metta::data::{gen_shapes_dataset, load_dataset, save_dataset, AugmentationPolicy};
use metta::inference::{mean_embedding, metta_predict, tta_predict};
use metta::model::{
    build_backbone, embed, load_checkpoint, save_checkpoint, train_backbone, train_linear_head,
    BackboneConfig, TrainOptions,
};

fn opts(epochs: usize, seed: u64) -> TrainOptions {
    TrainOptions {
        epochs,
        batch: 16,
        learning_rate: 0.05,
        momentum: 0.9,
        seed,
    }
}

#[test]
fn small_pipeline_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_shapes_dataset(4, 96, 3, 16).unwrap();
    save_dataset(&ds, dir.path().join("train.mtds")).unwrap();
    let ds = load_dataset(dir.path().join("train.mtds")).unwrap();

    let policy = AugmentationPolicy::random_resized_crop_flip(16);
    let init = build_backbone(&BackboneConfig::small(1, 16), 1).unwrap();
    let (backbone, rep) = train_backbone(&init, &ds, &policy, &opts(3, 1)).unwrap();
    assert_eq!(rep.epoch_losses.len(), 3);
    assert!(rep.epoch_losses.iter().all(|l| l.is_finite()));
    save_checkpoint(&backbone, dir.path().join("b.mtck")).unwrap();
    let backbone = load_checkpoint(dir.path().join("b.mtck")).unwrap();
    assert_eq!(backbone.meta.epochs, 3);
    assert_eq!(backbone.meta.policy, policy.descriptor());

    let (head, _) = train_linear_head(&backbone, &ds, &policy, &opts(4, 1)).unwrap();
    let mut ckpt = backbone.clone();
    ckpt.head = Some(head);
    save_checkpoint(&ckpt, dir.path().join("l.mtck")).unwrap();
    let ckpt = load_checkpoint(dir.path().join("l.mtck")).unwrap();
    let head = ckpt.require_head().unwrap();

    let x = ds.image(0);
    let p = metta_predict(&ckpt, head, x, &policy, 5, 2, 0).unwrap();
    let q = tta_predict(&ckpt, head, x, &policy, 5, 2, 0).unwrap();
    for probs in [&p, &q] {
        assert!((probs.sum() - 1.0).abs() < 1e-6);
        assert!(probs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    let report = evaluate_grid(&ckpt, head, &ds, &Method::ALL, &policy, &[1, 4], 3).unwrap();
    let path = dir.path().join("eval.csv");
    emit_report(&report, &path, ReportFormat::Csv).unwrap();
    let rows: Vec<EvalRow> = read_report(&path, ReportFormat::Csv).unwrap();
    assert_eq!(rows, report.rows);
    let m1 = report.row(Method::Metta, 1).unwrap();
    let t1 = report.row(Method::Tta, 1).unwrap();
    assert_eq!(m1.top1, t1.top1);
}

#[test]
fn both_training_stages_reduce_loss() {
    let train = gen_shapes_dataset(10, 256, 4, 16).unwrap();
    let policy = AugmentationPolicy::random_resized_crop_flip(16);
    let init = build_backbone(&BackboneConfig::small(1, 16), 3).unwrap();
    let (backbone, rep) = train_backbone(&init, &train, &policy, &opts(5, 3)).unwrap();
    assert!(
        rep.final_loss().unwrap() < rep.epoch_losses[0],
        "{:?}",
        rep.epoch_losses
    );
    let (_, rep) = train_linear_head(&backbone, &train, &policy, &opts(5, 3)).unwrap();
    assert!(
        rep.final_loss().unwrap() < rep.epoch_losses[0],
        "{:?}",
        rep.epoch_losses
    );
}

#[test]
fn multi_scale_mean_uses_every_scale() {
    let ds = gen_shapes_dataset(2, 3, 3, 16).unwrap();
    let ckpt = build_backbone(&BackboneConfig::small(1, 16), 6).unwrap();
    let policy = AugmentationPolicy::multi_scale_default();
    let stats = mean_embedding(&ckpt, ds.image(0), &policy, 1, 0, 0).unwrap();
    assert_eq!(stats.sample_count, 3);
    assert!(stats.mean.max_abs_diff(&embed(&ckpt, ds.image(0)).unwrap()) > 0.0);
}
