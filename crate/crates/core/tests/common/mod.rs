#![allow(dead_code)]

use std::path::Path;

use itemvoice_core::corpus::{import_functionals, ScaleDefinition};
use itemvoice_core::dataset::{Dataset, DatasetOptions};
use itemvoice_core::model::{ModelKind, ModelSpec, Task};
use itemvoice_core::synth::{generate, SynthConfig, FUNCTIONAL_COLUMNS};
use itemvoice_core::train::TrainConfig;

/// Six speakers (two per split, one of each class), one 14 s recording each.
pub fn tiny_synth() -> SynthConfig {
    SynthConfig {
        n_speakers: 6,
        recordings_per_speaker: 1,
        duration_s: 14.0,
        speakers_per_split: [2, 2, 2],
        ..Default::default()
    }
}

pub fn egemaps_dataset(dir: &Path, synth: &SynthConfig) -> Dataset {
    let corpus = generate(dir, &ScaleDefinition::madrs(), synth).unwrap();
    let vectors = import_functionals(&corpus.functionals_path, FUNCTIONAL_COLUMNS).unwrap();
    Dataset::from_functionals(&corpus.manifest, &vectors, DatasetOptions::default()).unwrap()
}

pub fn egemaps_spec(kind: ModelKind, heads: usize) -> ModelSpec {
    ModelSpec::new(kind, Task::Classify, heads)
}

pub fn quick_cfg(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_epochs: epochs,
        seed,
        ..Default::default()
    }
}
