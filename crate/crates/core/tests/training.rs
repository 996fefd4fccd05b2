mod common;

use clipdistill::data::make_batch;
use clipdistill::losses::DistillVariant;
use clipdistill::train::{checkpoint, read_metrics, run_training, train_step, Model, FINAL_CHECKPOINT, METRICS_CSV};
use clipdistill::Error;
use common::{bytes, small_config};

#[test]
fn same_seed_trains_to_identical_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let a = run_training(&cfg, &dir.path().join("a"), None).unwrap();
    let b = run_training(&cfg, &dir.path().join("b"), None).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(
        bytes(&a.checkpoint.join("weights.bin")),
        bytes(&b.checkpoint.join("weights.bin"))
    );
    assert_eq!(
        bytes(&dir.path().join("a").join(METRICS_CSV)),
        bytes(&dir.path().join("b").join(METRICS_CSV))
    );
}

#[test]
fn different_seeds_diverge() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let other = clipdistill::train::TrainConfig { seed: 12, ..cfg.clone() };
    let a = run_training(&cfg, &dir.path().join("a"), None).unwrap();
    let b = run_training(&other, &dir.path().join("b"), None).unwrap();
    assert_ne!(a.state.online, b.state.online);
}

#[test]
fn metrics_have_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let done = run_training(&cfg, dir.path(), None).unwrap();
    let rows = read_metrics(&dir.path().join(METRICS_CSV)).unwrap();
    assert_eq!(rows.len(), cfg.total_steps() as usize);
    assert_eq!(rows, done.metrics);
    assert!(rows.windows(2).all(|w| w[1].step == w[0].step + 1));
    assert!(rows.iter().all(|r| r.total_loss.is_finite() && r.tau > 0.0));
}

#[test]
fn resume_matches_a_straight_run_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.epochs = 3;
    cfg.checkpoint_every = 1;
    let straight = run_training(&cfg, &dir.path().join("straight"), None).unwrap();
    let mid = dir.path().join("straight").join("checkpoints").join("epoch_1");
    let resumed = run_training(&cfg, &dir.path().join("resumed"), Some(&mid)).unwrap();
    assert_eq!(straight.state, resumed.state);
    assert_eq!(
        bytes(&straight.checkpoint.join("weights.bin")),
        bytes(&resumed.checkpoint.join("weights.bin"))
    );
    let steps_per_epoch = cfg.steps_per_epoch();
    assert_eq!(resumed.metrics[..], straight.metrics[steps_per_epoch..]);
}

#[test]
fn resume_with_a_changed_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let done = run_training(&cfg, &dir.path().join("a"), None).unwrap();
    let changed = clipdistill::train::TrainConfig { lambda: 0.25, ..cfg };
    let err = run_training(&changed, &dir.path().join("b"), Some(&done.checkpoint)).unwrap_err();
    assert!(err.is_usage(), "{err}");
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.epochs = 0;
    let done = run_training(&cfg, dir.path(), None).unwrap();
    let (_, init) = Model::init(&cfg).unwrap();
    assert_eq!(done.state, init);
    let (_, _, loaded) = checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(loaded, init);
    assert!(read_metrics(&dir.path().join(METRICS_CSV)).unwrap().is_empty());
}

#[test]
fn first_step_student_and_teacher_clip_agree_without_sparsification() {
    let mut cfg = small_config();
    cfg.vit.keep_rate = 1.0;
    cfg.lambda = 1.0;
    let (model, mut state) = Model::init(&cfg).unwrap();
    let batch = make_batch(3, cfg.batch_size, 0.0, cfg.vit.image_size, cfg.text.max_len).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let row = train_step(&model, &mut state, &cfg, &batch, 1.0, dir.path()).unwrap();
    // centering starts at zero and the teacher is a copy of the student
    assert_eq!(row.clip_student_loss, row.clip_teacher_loss);
    assert_eq!(row.distill_loss, 0.0);
}

#[test]
fn non_finite_loss_dumps_matrices_and_stops() {
    let cfg = small_config();
    let (model, mut state) = Model::init(&cfg).unwrap();
    let mut batch = make_batch(3, cfg.batch_size, 0.0, cfg.vit.image_size, cfg.text.max_len).unwrap();
    batch.images.data_mut()[0] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    let before = state.clone();
    match train_step(&model, &mut state, &cfg, &batch, cfg.lambda, dir.path()) {
        Err(Error::NonFiniteLoss { step: 0, dump }) => {
            let v: serde_json::Value = serde_json::from_slice(&bytes(&dump)).unwrap();
            assert_eq!(v["shape"], serde_json::json!([cfg.batch_size, cfg.batch_size]));
            assert!(v["abar"].is_array());
        }
        other => panic!("expected a non-finite loss, got {:?}", other.map(|r| r.total_loss)),
    }
    assert_eq!(state, before);
}

#[test]
fn every_variant_trains_a_step() {
    for variant in DistillVariant::ALL {
        let mut cfg = small_config();
        cfg.epochs = 1;
        cfg.corpus.train_size = 8;
        cfg.variant = variant;
        cfg.ema.text_ema = variant.needs_text_ema();
        let dir = tempfile::tempdir().unwrap();
        let done = run_training(&cfg, dir.path(), None).unwrap_or_else(|e| panic!("{variant}: {e}"));
        assert_eq!(done.metrics.len(), 1);
        assert!(done.metrics[0].total_loss.is_finite(), "{variant}");
        assert_eq!(done.state.text_teacher.is_some(), variant.needs_text_ema());
    }
}
