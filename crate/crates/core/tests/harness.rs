use slu_core::asr::AsrKind;
use slu_core::data::{split_corpus, Splits};
use slu_core::harness::{
    evaluate, grad_check_suite, thread_pool, tiny_config, tiny_corpus, train_independent,
    train_joint, train_on, Checkpoint, Pipeline, RunConfig,
};
use slu_core::interfaces::InterfaceKind;
use slu_core::losses::TrainingMode;
use slu_core::Error;

fn small_splits() -> Splits {
    let utts = {
        let spec = slu_core::data::CorpusSpec {
            utterance_count: 80,
            feature_dim: 6,
            vocab_size: 16,
            num_intents: 3,
            num_slot_types: 2,
            num_domains: 2,
            values_per_slot: 2,
            frames_per_token: (1, 2),
            noise_std: 0.1,
            seed: 3,
            ..Default::default()
        };
        slu_core::data::generate_corpus(&spec).unwrap()
    };
    split_corpus(utts)
}

fn small_config(asr: AsrKind, interface: InterfaceKind, mode: TrainingMode) -> RunConfig {
    let mut cfg = tiny_config(5, asr, interface);
    cfg.mode = mode;
    cfg.epochs = 2;
    cfg.joint_epochs = 1;
    cfg.beam_width = 2;
    cfg.nbest_size = 2;
    cfg.optimizer.learning_rate = 0.01;
    cfg
}

#[test]
fn independent_smoke_losses_decrease() {
    let splits = small_splits();
    let cfg = small_config(
        AsrKind::Rnnt,
        InterfaceKind::Text,
        TrainingMode::Independent,
    );
    let out = train_independent(&cfg, &splits).unwrap();
    let log = &out.report.epochs;
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|e| e.loss.is_finite()));
    assert!(log[1].loss < log[0].loss, "{log:?}");
    assert!(out.report.dev.wer.is_some());
    assert!(out.report.dev_reference_text.wer.is_none());
}

#[test]
fn repeated_runs_are_bit_identical() {
    let splits = small_splits();
    let cfg = small_config(
        AsrKind::Rnnt,
        InterfaceKind::Hidden,
        TrainingMode::JointMleSeq,
    );
    let a = train_joint(&cfg, &splits, None)
        .unwrap()
        .report
        .without_timing();
    let b = train_joint(&cfg, &splits, None)
        .unwrap()
        .report
        .without_timing();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn threads_do_not_change_results() {
    let splits = small_splits();
    let mut cfg = small_config(AsrKind::Las, InterfaceKind::Text, TrainingMode::JointSeq);
    cfg.threads = Some(1);
    let a = train_on(&cfg, &splits, None)
        .unwrap()
        .report
        .without_timing();
    cfg.threads = Some(3);
    let b = train_on(&cfg, &splits, None)
        .unwrap()
        .report
        .without_timing();
    assert_eq!(a.dev, b.dev);
    assert_eq!(a.epochs, b.epochs);
}

#[test]
fn zero_epochs_evaluates_initial_models() {
    let splits = small_splits();
    let mut cfg = small_config(
        AsrKind::Rnnt,
        InterfaceKind::Text,
        TrainingMode::Independent,
    );
    cfg.epochs = 0;
    let out = train_independent(&cfg, &splits).unwrap();
    assert!(out.report.epochs.is_empty());
    assert!(out.report.dev.semer > 50.0, "{}", out.report.dev.semer);
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let splits = small_splits();
    let cfg = small_config(
        AsrKind::Rnnt,
        InterfaceKind::AudioAttention,
        TrainingMode::JointMleSeq,
    );
    let out = train_joint(&cfg, &splits, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    out.pipeline.checkpoint().save(&path).unwrap();
    let restored = Pipeline::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let pool = thread_pool(None).unwrap();
    let a = evaluate(&out.pipeline, &splits.dev, cfg.beam_width, &pool).unwrap();
    let b = evaluate(&restored, &splits.dev, cfg.beam_width, &pool).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, out.report.dev);
}

#[test]
fn checkpoint_shape_mismatch_names_parameter() {
    let splits = small_splits();
    let cfg = small_config(
        AsrKind::Rnnt,
        InterfaceKind::Text,
        TrainingMode::Independent,
    );
    let p = Pipeline::new(&cfg, &splits.train).unwrap();
    let mut ckpt = p.checkpoint();
    let saved = ckpt.params.get_mut("asr.joint.output.weight").unwrap();
    saved.shape.reverse();
    match Pipeline::from_checkpoint(&ckpt) {
        Err(Error::Checkpoint { param, .. }) => assert_eq!(param, "asr.joint.output.weight"),
        other => panic!("{other:?}"),
    }
    ckpt.params.remove("nlu.start");
    let mut q = p.clone();
    assert!(matches!(
        q.load_params(&ckpt, true),
        Err(Error::Checkpoint { .. })
    ));
}

#[test]
fn joint_from_independent_checkpoint() {
    let splits = small_splits();
    let cfg = small_config(
        AsrKind::Rnnt,
        InterfaceKind::Text,
        TrainingMode::Independent,
    );
    let base = train_independent(&cfg, &splits).unwrap();
    let mut joint = small_config(AsrKind::Rnnt, InterfaceKind::Text, TrainingMode::JointSeq);
    joint.epochs = 0;
    let ckpt = base.pipeline.checkpoint();
    let out = train_joint(&joint, &splits, Some(&ckpt)).unwrap();
    assert_eq!(out.report.epochs.len(), 1);
    assert!(out.report.epochs[0].seq_loss.is_finite());
}

#[test]
fn mode_entry_points_check_mode() {
    let splits = small_splits();
    let cfg = small_config(AsrKind::Rnnt, InterfaceKind::Text, TrainingMode::JointSeq);
    assert!(train_independent(&cfg, &splits).is_err());
    let cfg = small_config(
        AsrKind::Rnnt,
        InterfaceKind::Text,
        TrainingMode::Independent,
    );
    assert!(train_joint(&cfg, &splits, None).is_err());
    let mut bad = small_config(
        AsrKind::Rnnt,
        InterfaceKind::Posterior,
        TrainingMode::JointSeq,
    );
    bad.epochs = 1000;
    assert!(matches!(
        train_on(&bad, &splits, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn grad_suite_passes() {
    let rows = grad_check_suite(11).unwrap();
    assert_eq!(rows.len(), 2 + 1 + 2 * 5 * 2);
    for r in &rows {
        assert!(r.passed, "{r:?}");
    }
    assert!(tiny_corpus(11)
        .unwrap()
        .iter()
        .all(|u| u.features.len() <= 4));
}
