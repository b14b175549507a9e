//! Backprop through whole models (reduced size) against central differences.
//! Elements whose ±h interval straddles a ReLU kink are excluded and must stay rare.

use itemvoice_core::model::{Batch, BranchConfig, Mode, Model, ModelKind, ModelSpec, Task};
use itemvoice_tensor::gradcheck::check_piecewise;
use itemvoice_tensor::{BoundParams, Rng, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn reduced(kind: ModelKind, task: Task, heads: usize, batchnorm: bool, dropout: f64) -> ModelSpec {
    let mut s = ModelSpec::new(kind, task, heads);
    s.trunk.input_frames = 12;
    s.trunk.input_mels = 10;
    s.trunk.branches = [3, 5, 7]
        .into_iter()
        .map(|k| BranchConfig {
            kernel: k,
            padding: k / 2,
            channels: vec![2, 3],
        })
        .collect();
    s.functional_dim = 6;
    s.encoder_hidden = 5;
    s.lstm_hidden = 4;
    s.sequence_len = 3;
    s.use_batchnorm = batchnorm;
    s.dropout_rate = dropout;
    s
}

fn random_batch(spec: &ModelSpec, rng: &mut Rng) -> Batch {
    let ups = spec.units_per_sample();
    let n_units = ups + 2;
    let mut shape = vec![n_units];
    shape.extend(spec.unit_shape());
    let n: usize = shape.iter().product();
    let units = Tensor::new(
        &shape,
        (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
    )
    .unwrap();
    let samples = (0..3).map(|s| (s..s + ups).collect()).collect();
    Batch { units, samples }
}

/// Worst relative error over all parameters of `spec` across the seeds.
fn model_gradcheck(spec: ModelSpec) -> f64 {
    let mut worst: f64 = 0.0;
    let (mut checked, mut kinks) = (0, 0);
    for seed in 0..SEEDS {
        let mut rng = Rng::seed_from(seed);
        let model = Model::init(spec.clone(), &mut rng).unwrap();
        // Random biases so that no unit sits exactly at a ReLU kink.
        let mut params = model.params.clone();
        for (_, t) in params.iter_mut() {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.uniform_range(-0.1, 0.1));
        }
        let batch = random_batch(&spec, &mut rng);
        let targets: Vec<Vec<f64>> = (0..spec.heads)
            .map(|_| {
                (0..batch.samples.len())
                    .map(|_| rng.below(2) as f64)
                    .collect()
            })
            .collect();
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        let inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        let rep = check_piecewise(
            &inputs,
            |g, vars| {
                let bound = BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()));
                let mut m = model.clone();
                let mut drop_rng = Rng::seed_from(seed + 100);
                let outs = m
                    .forward(g, &bound, &batch, Mode::Train(&mut drop_rng))
                    .unwrap();
                Ok(m.loss(g, &outs, &targets, None).unwrap())
            },
            H,
            Some(24),
            TOL,
        )
        .unwrap();
        assert!(rep.checked > 0);
        assert!(
            rep.max_rel_error < TOL,
            "{:?} seed {seed}: {:?}",
            spec.kind,
            rep
        );
        worst = worst.max(rep.max_rel_error);
        checked += rep.checked;
        kinks += rep.kinks;
    }
    assert!(
        kinks * 100 <= checked,
        "{kinks} kinks in {checked} elements"
    );
    worst
}

#[test]
fn spectrogram_cnn() {
    model_gradcheck(reduced(ModelKind::SpecCnn, Task::Classify, 1, false, 0.0));
}

#[test]
fn spectrogram_cnn_with_batchnorm_and_dropout() {
    model_gradcheck(reduced(ModelKind::SpecCnn, Task::Classify, 2, true, 0.3));
}

#[test]
fn spectrogram_cnn_lstm() {
    model_gradcheck(reduced(
        ModelKind::SpecCnnLstm,
        Task::Classify,
        1,
        true,
        0.2,
    ));
}

#[test]
fn egemaps_cnn_lstm_regression() {
    model_gradcheck(reduced(
        ModelKind::EgemapsCnnLstm,
        Task::Regress,
        2,
        false,
        0.0,
    ));
}
