use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tailgeo::loss::{LossConfig, LossFamily};
use tailgeo::metrics::ConfusionMatrix;
use tailgeo::model::train::{class_gradient_norms, confusion, prepare, train_prepared};
use tailgeo::model::{train, Classifier, TrainConfig};
use tailgeo::pointcloud::LabeledPointCloud;
use tailgeo::Exec;

/// A ground plane (class 0) with horizontal rails two metres above it
/// (class 1). `rail_points` controls the imbalance.
fn plane_and_rails(ground_points: usize, rail_points: usize, seed: u64) -> LabeledPointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..ground_points {
        positions.push([
            rng.random_range(0.0f32..8.0),
            rng.random_range(0.0f32..8.0),
            rng.random_range(-0.01f32..0.01),
        ]);
        labels.push(0);
    }
    for i in 0..rail_points {
        let y = 1.0 + 3.0 * (i % 2) as f32;
        positions.push([
            rng.random_range(0.0f32..8.0),
            y + rng.random_range(-0.02f32..0.02),
            2.0 + rng.random_range(-0.02f32..0.02),
        ]);
        labels.push(1);
    }
    LabeledPointCloud::new(positions, labels, 2).unwrap()
}

fn small_config(family: LossFamily, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        loss: LossConfig::new(family),
        epochs,
        hidden: vec![16],
        seed: 11,
        ..TrainConfig::default()
    };
    cfg.features.k_context = 24;
    cfg.features.coarse_stride = 2;
    cfg.loss.k = 8;
    cfg
}

#[test]
fn separable_scene_is_learned() {
    let train_cloud = plane_and_rails(1500, 500, 1);
    let val_cloud = plane_and_rails(1500, 500, 2);
    let cfg = small_config(LossFamily::Ce, 200);
    let prepared = prepare(&train_cloud, &val_cloud, &cfg, Exec::Parallel).unwrap();
    let (model, report) = train_prepared(&prepared, 2, &cfg, Exec::Parallel).unwrap();
    let mut matrix = ConfusionMatrix::new(2);
    for batch in &prepared.train_batches {
        matrix
            .merge(&confusion(&model, batch, Exec::Parallel).unwrap())
            .unwrap();
    }
    let acc = matrix.overall_accuracy().unwrap();
    assert!(acc >= 0.99, "train accuracy {acc}");
    assert_eq!(report.epochs.len(), 200);
    assert!(report.best().unwrap().val_miou >= 0.95);
}

#[test]
fn zero_epochs_produces_no_history() {
    let cloud = plane_and_rails(400, 100, 3);
    let (model, report) = train(
        &cloud,
        &cloud,
        &small_config(LossFamily::Cb, 0),
        Exec::Parallel,
    )
    .unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(report.best_epoch, None);
    assert_eq!(report.confusion.total(), cloud.len() as u64);
    assert_eq!(report.to_csv().lines().count(), 1);
    assert_eq!(model.classes(), 2);
}

#[test]
fn same_seed_same_report_and_model() {
    let train_cloud = plane_and_rails(600, 150, 4);
    let val_cloud = plane_and_rails(600, 150, 5);
    let cfg = small_config(LossFamily::Combined, 5);
    let (m1, r1) = train(&train_cloud, &val_cloud, &cfg, Exec::Parallel).unwrap();
    let (m2, r2) = train(&train_cloud, &val_cloud, &cfg, Exec::Sequential).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(r1.to_csv(), r2.to_csv());
    assert_eq!(m1.to_bytes(), m2.to_bytes());
}

#[test]
fn best_epoch_miou_matches_its_confusion_matrix() {
    let train_cloud = plane_and_rails(600, 60, 6);
    let val_cloud = plane_and_rails(600, 60, 7);
    let (model, report) = train(
        &train_cloud,
        &val_cloud,
        &small_config(LossFamily::BoundaryCb, 8),
        Exec::Parallel,
    )
    .unwrap();
    let best = report.best().unwrap();
    assert_eq!(report.confusion.miou_all().unwrap(), best.val_miou);
    assert!(report.epochs.iter().all(|r| r.val_miou <= best.val_miou));

    // The returned model is the best one, so predicting again reproduces it.
    let cfg = small_config(LossFamily::BoundaryCb, 8);
    let prepared = prepare(&train_cloud, &val_cloud, &cfg, Exec::Parallel).unwrap();
    let again = confusion(&model, &prepared.val_batch, Exec::Parallel).unwrap();
    assert_eq!(again, report.confusion);

    let saved = Classifier::from_bytes(&model.to_bytes()).unwrap();
    assert_eq!(saved.params(), model.params());
}

#[test]
fn class_balanced_weights_raise_the_tail_share_of_the_gradient() {
    let cloud = plane_and_rails(5000, 50, 8);
    let mut shares = Vec::new();
    let mut per_class = Vec::new();
    let mut weights = Vec::new();
    for family in [LossFamily::Ce, LossFamily::Cb] {
        let cfg = small_config(family, 0);
        let prepared = prepare(&cloud, &cloud, &cfg, Exec::Parallel).unwrap();
        let mut model = Classifier::new(
            &cfg.layer_sizes(2),
            cfg.features,
            &mut ChaCha8Rng::seed_from_u64(cfg.seed),
        )
        .unwrap();
        model.fit_standardization(&prepared.train_features).unwrap();
        let norms = class_gradient_norms(
            &model,
            &prepared.val_batch,
            &cfg.loss,
            &prepared.context,
            Exec::Parallel,
        )
        .unwrap();
        shares.push(norms[1] / (norms[0] + norms[1]));
        per_class.push(norms);
        weights = prepared.context.class_weights.clone();
    }
    assert!(
        shares[1] > shares[0],
        "tail share ce {} cb {}",
        shares[0],
        shares[1]
    );
    // Each class's contribution is scaled by exactly its weight.
    for c in 0..2 {
        let expected = weights[c] * per_class[0][c];
        assert!(
            (per_class[1][c] - expected).abs() <= 1e-9 * expected,
            "class {c}"
        );
    }
    assert!(weights[1] / weights[0] > 50.0);
}

#[test]
fn mismatched_scenes_are_rejected() {
    let a = plane_and_rails(300, 30, 9);
    let b = LabeledPointCloud::new(vec![[0.0; 3]; 4], vec![0, 1, 2, 0], 3).unwrap();
    let err = train(&a, &b, &small_config(LossFamily::Ce, 1), Exec::Sequential).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
