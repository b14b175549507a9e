mod common;

use common::{egemaps_dataset, egemaps_spec, quick_cfg, tiny_synth};
use itemvoice_core::corpus::Split;
use itemvoice_core::dataset::Target;
use itemvoice_core::model::ModelKind;
use itemvoice_core::train::{
    apply_trial, load_trained, random_search, sample_trials, train_depression_model, train_item,
    train_model, validation_score,
};
use itemvoice_core::vote::VoteMethod;
use itemvoice_core::Error;

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ds = egemaps_dataset(dir.path(), &tiny_synth());
    let mut spec = egemaps_spec(ModelKind::EgemapsCnnLstm, 1);
    spec.use_batchnorm = true;
    spec.dropout_rate = 0.3;
    let a = train_item(&spec, 10, &ds, &quick_cfg(5, 3)).unwrap();
    let b = train_item(&spec, 10, &ds, &quick_cfg(5, 3)).unwrap();
    assert_eq!(
        a.checkpoint().unwrap().to_bytes().unwrap(),
        b.checkpoint().unwrap().to_bytes().unwrap()
    );
    assert_eq!(a.log_csv(), b.log_csv());
    let c = train_item(&spec, 10, &ds, &quick_cfg(6, 3)).unwrap();
    assert_ne!(a.model.params, c.model.params);
}

#[test]
fn zero_learning_rate_leaves_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let ds = egemaps_dataset(dir.path(), &tiny_synth());
    let spec = egemaps_spec(ModelKind::EgemapsCnn, 1);
    let untrained = train_item(&spec, 1, &ds, &quick_cfg(3, 0)).unwrap();
    let mut cfg = quick_cfg(3, 4);
    cfg.adam.alpha = 0.0;
    let frozen = train_item(&spec, 1, &ds, &cfg).unwrap();
    assert_eq!(frozen.model.params, untrained.model.params);
    assert_eq!(frozen.best_epoch, 0);
    assert!(frozen
        .training_log
        .iter()
        .all(|r| r.val_weighted_f == untrained.validation_weighted_f));
}

#[test]
fn selection_invariant_and_earliest_best_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let ds = egemaps_dataset(dir.path(), &tiny_synth());
    let spec = egemaps_spec(ModelKind::EgemapsCnnLstm, 1);
    let t = train_depression_model(&spec, &ds, &quick_cfg(11, 6)).unwrap();
    let best = t
        .training_log
        .iter()
        .map(|r| r.val_weighted_f)
        .fold(f64::MIN, f64::max);
    let first = t
        .training_log
        .iter()
        .position(|r| r.val_weighted_f == best)
        .unwrap();
    assert_eq!(t.best_epoch, first);
    assert_eq!(t.validation_weighted_f, best);

    let path = dir.path().join("dep.ivck");
    t.save(&path).unwrap();
    let (model, extra) = load_trained(&path).unwrap();
    let again = validation_score(&model, &ds, Target::Depression, VoteMethod::Soft).unwrap();
    assert!((again.weighted - t.validation_weighted_f).abs() < 1e-9);
    assert_eq!(extra.best_epoch, t.best_epoch);
    assert_eq!(extra.target, Target::Depression);
}

#[test]
fn training_loss_mostly_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let ds = egemaps_dataset(dir.path(), &tiny_synth());
    let spec = egemaps_spec(ModelKind::EgemapsCnn, 1);
    let t = train_item(&spec, 10, &ds, &quick_cfg(2, 6)).unwrap();
    let losses: Vec<f64> = t.training_log[1..].iter().map(|r| r.train_loss).collect();
    assert_eq!(losses.len(), 6);
    let non_increasing = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(non_increasing >= 4, "{losses:?}");
    assert!(t.training_log[0].train_loss.is_finite());
}

#[test]
fn every_sample_inherits_its_recording_label() {
    let dir = tempfile::tempdir().unwrap();
    let ds = egemaps_dataset(dir.path(), &tiny_synth());
    let all: Vec<usize> = (0..ds.recordings.len()).collect();
    for ups in [1, 10] {
        for s in ds.samples(&all, ups).unwrap() {
            let rec = &ds.recordings[s.recording];
            for item in 1..=10 {
                let want = rec.labels.items[item - 1].present;
                assert_eq!(ds.label(s.recording, Target::Item(item), 0), want);
                assert_eq!(
                    ds.target_value(s.recording, Target::Item(item), 0, false),
                    f64::from(u8::from(want))
                );
            }
            assert_eq!(
                ds.label(s.recording, Target::Depression, 0),
                rec.labels.depressed
            );
        }
    }
}

#[test]
fn single_class_training_split_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = egemaps_dataset(dir.path(), &tiny_synth());
    for rec in ds.recordings.iter_mut().filter(|r| r.split == Split::Train) {
        rec.labels.depressed = false;
    }
    let spec = egemaps_spec(ModelKind::EgemapsCnn, 1);
    let t = train_depression_model(&spec, &ds, &quick_cfg(0, 1)).unwrap();
    assert!(t.single_class_train_split);
    let ok = train_depression_model(
        &egemaps_spec(ModelKind::EgemapsCnn, 1),
        &egemaps_dataset(dir.path(), &tiny_synth()),
        &quick_cfg(0, 0),
    )
    .unwrap();
    assert!(!ok.single_class_train_split);
}

#[test]
fn missing_validation_split_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = egemaps_dataset(dir.path(), &tiny_synth());
    ds.recordings.retain(|r| r.split != Split::Val);
    let err = train_item(
        &egemaps_spec(ModelKind::EgemapsCnn, 1),
        1,
        &ds,
        &quick_cfg(0, 1),
    )
    .unwrap_err();
    assert!(matches!(err, Error::EmptySplit(Split::Val)));
}

#[test]
fn multitask_model_has_one_head_per_item() {
    let dir = tempfile::tempdir().unwrap();
    let ds = egemaps_dataset(dir.path(), &tiny_synth());
    let t = train_model(
        &egemaps_spec(ModelKind::EgemapsCnn, 10),
        Target::AllItems,
        &ds,
        &quick_cfg(0, 1),
    )
    .unwrap();
    assert_eq!(t.model.spec.heads, 10);
    assert!(train_model(
        &egemaps_spec(ModelKind::EgemapsCnn, 1),
        Target::AllItems,
        &ds,
        &quick_cfg(0, 1)
    )
    .is_err());
}

#[test]
fn search_with_one_trial_equals_training_that_trial() {
    let dir = tempfile::tempdir().unwrap();
    let ds = egemaps_dataset(dir.path(), &tiny_synth());
    let spec = egemaps_spec(ModelKind::EgemapsCnn, 1);
    let mut cfg = quick_cfg(9, 2);
    cfg.n_search_trials = 1;
    let r = random_search(&spec, Target::Item(4), &ds, &cfg).unwrap();
    let hp = sample_trials(&cfg.search_space, 1, cfg.seed)[0];
    let (s, c) = apply_trial(&spec, &cfg, hp);
    let direct = train_model(&s, Target::Item(4), &ds, &c).unwrap();
    assert_eq!(r.best, direct);
    assert_eq!(r.best_trial, 0);
}

#[test]
fn search_keeps_the_best_trial() {
    let dir = tempfile::tempdir().unwrap();
    let ds = egemaps_dataset(dir.path(), &tiny_synth());
    let spec = egemaps_spec(ModelKind::EgemapsCnn, 1);
    let mut cfg = quick_cfg(1, 1);
    cfg.n_search_trials = 3;
    let r = random_search(&spec, Target::Item(2), &ds, &cfg).unwrap();
    assert_eq!(r.trials.len(), 3);
    assert!(r
        .trials
        .iter()
        .all(|(_, f)| r.best.validation_weighted_f >= *f));
    let first_best = r
        .trials
        .iter()
        .position(|(_, f)| *f == r.best.validation_weighted_f)
        .unwrap();
    assert_eq!(r.best_trial, first_best);
    assert_eq!(
        sample_trials(&cfg.search_space, 3, 1),
        r.trials.iter().map(|t| t.0).collect::<Vec<_>>()
    );
    cfg.n_search_trials = 0;
    assert!(random_search(&spec, Target::Item(2), &ds, &cfg).is_err());
}
