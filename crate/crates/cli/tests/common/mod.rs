#![allow(dead_code)]

use std::path::{Path, PathBuf};

use itemvoice_cli::commands::cmd_synth;
use itemvoice_cli::config::RunConfig;
use itemvoice_core::dataset::{FeatureKind, Target};
use itemvoice_core::model::{Model, ModelKind, ModelSpec, Task};
use itemvoice_core::synth::SynthConfig;
use itemvoice_core::train::{Hyperparams, TrainedItemModel};
use itemvoice_tensor::{Rng, Tensor};

/// Six speakers (two per split, one of each class), one recording each.
pub fn tiny_synth(duration_s: f64) -> SynthConfig {
    SynthConfig {
        n_speakers: 6,
        recordings_per_speaker: 1,
        duration_s,
        speakers_per_split: [2, 2, 2],
        ..Default::default()
    }
}

/// Generates a corpus in `dir` and returns its config with `edit` applied, saved back
/// to `config.toml`.
pub fn corpus(
    dir: &Path,
    synth: &SynthConfig,
    edit: impl FnOnce(&mut RunConfig),
) -> (PathBuf, RunConfig) {
    let path = cmd_synth(dir, "madrs", synth).unwrap();
    let mut cfg = RunConfig::parse(&std::fs::read_to_string(&path).unwrap()).unwrap();
    edit(&mut cfg);
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    (path.clone(), RunConfig::load(&path).unwrap())
}

pub fn egemaps(cfg: &mut RunConfig) {
    cfg.features = FeatureKind::Egemaps;
    cfg.model = ModelKind::EgemapsCnn;
}

/// A model whose every output is the head bias: present (or absent) with p = sigmoid(2).
pub fn constant_model(spec: ModelSpec, target: Target, present: bool) -> TrainedItemModel {
    let mut model = Model::init(spec, &mut Rng::seed_from(0)).unwrap();
    for (name, t) in model.params.iter_mut() {
        let shape = t.shape().to_vec();
        *t = if name.ends_with(".bias") && name.starts_with("head") {
            let mut b = Tensor::zeros(&shape);
            b.data_mut()[usize::from(present)] = 2.0;
            b
        } else {
            Tensor::zeros(&shape)
        };
    }
    TrainedItemModel {
        target,
        model,
        hyperparams: Hyperparams {
            use_batchnorm: false,
            dropout_rate: 0.0,
            l2_lambda: 0.0,
        },
        best_epoch: 0,
        validation_weighted_f: 0.0,
        training_log: Vec::new(),
        single_class_train_split: false,
    }
}

pub fn spec(kind: ModelKind, heads: usize) -> ModelSpec {
    ModelSpec::new(kind, Task::Classify, heads)
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_itemvoice")
}
