//! Per-target training with Adam, per-epoch validation by voting, best-epoch
//! selection, and random hyper-parameter search.

use std::path::Path;

use itemvoice_tensor::{adam_step, AdamConfig, AdamState, Checkpoint, Graph, Rng};
use serde::{Deserialize, Serialize};

use crate::corpus::Split;
use crate::dataset::{Dataset, SampleRef, Target};
use crate::error::{Error, Result};
use crate::model::{Mode, Model, ModelSpec, Task};
use crate::vote::{f_scores, vote, FScores, SegmentProbabilityGrid, VoteMethod};

/// Largest number of samples pushed through the network at once during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub use_batchnorm: Vec<bool>,
    pub dropout_rate: Vec<f64>,
    pub l2_lambda: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            use_batchnorm: vec![true, false],
            dropout_rate: vec![0.0, 0.1, 0.3, 0.5],
            l2_lambda: vec![0.0, 1e-5, 1e-4, 1e-3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub use_batchnorm: bool,
    pub dropout_rate: f64,
    pub l2_lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub search_space: SearchSpace,
    pub n_search_trials: usize,
    /// Inverse-frequency class weights in the classification loss.
    pub class_weighting: bool,
    /// Voting scheme used for the per-epoch validation F score.
    pub selection_vote: VoteMethod,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 32,
            max_epochs: 100,
            seed: 0,
            search_space: SearchSpace::default(),
            n_search_trials: 8,
            class_weighting: false,
            selection_vote: VoteMethod::Soft,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        let s = &self.search_space;
        if s.use_batchnorm.is_empty() || s.dropout_rate.is_empty() || s.l2_lambda.is_empty() {
            return Err(Error::InvalidConfig(
                "every search dimension needs at least one value".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches; for epoch 0, the untrained model's eval-mode loss.
    pub train_loss: f64,
    pub val_weighted_f: f64,
    pub val_f_absent: f64,
    pub val_f_present: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedItemModel {
    pub target: Target,
    /// The selected epoch's parameters, as stored in the checkpoint.
    pub model: Model,
    pub hyperparams: Hyperparams,
    pub best_epoch: usize,
    pub validation_weighted_f: f64,
    pub training_log: Vec<EpochRecord>,
    /// All training labels identical.
    pub single_class_train_split: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointExtra {
    pub target: Target,
    pub hyperparams: Hyperparams,
    pub best_epoch: usize,
    pub validation_weighted_f: f64,
    pub single_class_train_split: bool,
}

impl TrainedItemModel {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let extra = CheckpointExtra {
            target: self.target,
            hyperparams: self.hyperparams,
            best_epoch: self.best_epoch,
            validation_weighted_f: self.validation_weighted_f,
            single_class_train_split: self.single_class_train_split,
        };
        self.model.to_checkpoint(serde_json::to_value(extra)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.checkpoint()?.save(path)?)
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_weighted_f,val_f_absent,val_f_present\n");
        for r in &self.training_log {
            s.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9}\n",
                r.epoch, r.train_loss, r.val_weighted_f, r.val_f_absent, r.val_f_present
            ));
        }
        s
    }
}

/// Reads a checkpoint written by [`TrainedItemModel::save`].
pub fn load_trained(path: &Path) -> Result<(Model, CheckpointExtra)> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let (model, extra) = Model::from_checkpoint(&Checkpoint::load(path)?)?;
    Ok((model, serde_json::from_value(extra)?))
}

/// Segment probability grids of one recording, one per head.
pub fn predict_recording(
    model: &Model,
    ds: &Dataset,
    recording: usize,
    target: Target,
) -> Result<Vec<SegmentProbabilityGrid>> {
    let ups = model.spec.units_per_sample();
    let geom = ds.geometry(recording, ups)?;
    let samples = ds.samples(&[recording], ups)?;
    let mut per_head: Vec<Vec<(f64, f64)>> =
        vec![Vec::with_capacity(samples.len()); model.spec.heads];
    for chunk in samples.chunks(EVAL_CHUNK) {
        let out = model.predict(&ds.batch(chunk, ups)?)?;
        for sample in out {
            for (h, o) in sample.into_iter().enumerate() {
                per_head[h].push(o.pair());
            }
        }
    }
    let id = &ds.recordings[recording].recording_id;
    per_head
        .into_iter()
        .enumerate()
        .map(|(h, probs)| SegmentProbabilityGrid::new(id.clone(), target.head_item(h), probs, geom))
        .collect()
}

/// Per-head F scores of voted recording decisions against the recording labels.
pub fn evaluate_split(
    model: &Model,
    ds: &Dataset,
    split: Split,
    target: Target,
    method: VoteMethod,
) -> Result<Vec<FScores>> {
    let recs = ds.in_split(split);
    if recs.is_empty() {
        return Err(Error::EmptySplit(split));
    }
    let heads = model.spec.heads;
    let mut preds = vec![Vec::with_capacity(recs.len()); heads];
    let mut labels = vec![Vec::with_capacity(recs.len()); heads];
    for &r in &recs {
        for (h, grid) in predict_recording(model, ds, r, target)?.iter().enumerate() {
            preds[h].push(vote(grid, method)?.present);
            labels[h].push(ds.label(r, target, h));
        }
    }
    preds
        .iter()
        .zip(&labels)
        .map(|(p, l)| f_scores(p, l))
        .collect()
}

/// Mean over heads (a single head reports its own scores).
fn mean_scores(scores: &[FScores]) -> FScores {
    if scores.len() == 1 {
        return scores[0];
    }
    let n = scores.len() as f64;
    let mean = |f: fn(&FScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
    FScores {
        weighted: mean(|s| s.weighted),
        absent: mean(|s| s.absent),
        present: mean(|s| s.present),
        support_absent: scores.iter().map(|s| s.support_absent).sum(),
        support_present: scores.iter().map(|s| s.support_present).sum(),
    }
}

/// Validation score used for model selection.
pub fn validation_score(
    model: &Model,
    ds: &Dataset,
    target: Target,
    method: VoteMethod,
) -> Result<FScores> {
    Ok(mean_scores(&evaluate_split(
        model,
        ds,
        Split::Val,
        target,
        method,
    )?))
}

fn class_weights(ds: &Dataset, samples: &[SampleRef], target: Target) -> [f64; 2] {
    let n = samples.len() as f64;
    let present = samples
        .iter()
        .filter(|s| ds.label(s.recording, target, 0))
        .count() as f64;
    let w = |count: f64| if count > 0.0 { n / (2.0 * count) } else { 1.0 };
    [w(n - present), w(present)]
}

/// Eval-mode loss averaged over batches, for the untrained model's log entry.
fn eval_loss(
    model: &Model,
    ds: &Dataset,
    samples: &[SampleRef],
    target: Target,
    batch_size: usize,
    weights: Option<&[f64]>,
) -> Result<f64> {
    let ups = model.spec.units_per_sample();
    let regress = model.spec.task == Task::Regress;
    let mut m = model.clone();
    let mut sum = 0.0;
    let mut batches = 0;
    for chunk in samples.chunks(batch_size) {
        let batch = ds.batch(chunk, ups)?;
        let targets: Vec<Vec<f64>> = (0..m.spec.heads)
            .map(|h| {
                chunk
                    .iter()
                    .map(|s| ds.target_value(s.recording, target, h, regress))
                    .collect()
            })
            .collect();
        let mut g = Graph::new();
        let bound = g.bind(&m.params);
        let outs = m.forward(&mut g, &bound, &batch, Mode::Eval)?;
        let loss = m.loss(&mut g, &outs, &targets, weights)?;
        sum += g.value(loss).data()[0];
        batches += 1;
    }
    Ok(sum / batches as f64)
}

/// Trains one model on the train split and returns the epoch (0 = untrained) with the
/// highest validation weighted F; ties keep the earlier epoch.
///
/// Every training sample inherits its recording's label. Validation scores are
/// computed on the `f32`-rounded parameters that a checkpoint stores, so reloading
/// the checkpoint reproduces `validation_weighted_f` exactly.
pub fn train_model(
    spec: &ModelSpec,
    target: Target,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainedItemModel> {
    cfg.validate()?;
    spec.validate()?;
    target.validate(&ds.scale)?;
    ds.check_compatible(spec)?;
    if spec.heads != target.heads(&ds.scale) {
        return Err(Error::InvalidConfig(format!(
            "{} heads for a target with {}",
            spec.heads,
            target.heads(&ds.scale)
        )));
    }
    let train = ds.in_split(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptySplit(Split::Train));
    }
    if ds.in_split(Split::Val).is_empty() {
        return Err(Error::EmptySplit(Split::Val));
    }
    let ups = spec.units_per_sample();
    let mut samples = ds.samples(&train, ups)?;
    let regress = spec.task == Task::Regress;
    let single_class = (0..spec.heads).any(|h| {
        let first = ds.label(train[0], target, h);
        train.iter().all(|&r| ds.label(r, target, h) == first)
    });
    let weights = (cfg.class_weighting && !regress && spec.heads == 1)
        .then(|| class_weights(ds, &samples, target));

    let mut root = Rng::seed_from(cfg.seed);
    let mut init_rng = root.fork();
    let mut order_rng = root.fork();
    let mut dropout_rng = root.fork();

    let mut model = Model::init(spec.clone(), &mut init_rng)?;
    let mut state = AdamState::new(&model.params);
    let hyperparams = Hyperparams {
        use_batchnorm: spec.use_batchnorm,
        dropout_rate: spec.dropout_rate,
        l2_lambda: cfg.adam.l2_lambda,
    };

    let mut best = model.quantized();
    let f0 = validation_score(&best, ds, target, cfg.selection_vote)?;
    let mut best_f = f0.weighted;
    let mut best_epoch = 0;
    let mut log = vec![EpochRecord {
        epoch: 0,
        train_loss: eval_loss(
            &best,
            ds,
            &samples,
            target,
            cfg.batch_size,
            weights.as_ref().map(|w| &w[..]),
        )?,
        val_weighted_f: f0.weighted,
        val_f_absent: f0.absent,
        val_f_present: f0.present,
    }];

    for epoch in 1..=cfg.max_epochs {
        order_rng.shuffle(&mut samples);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in samples.chunks(cfg.batch_size) {
            let batch = ds.batch(chunk, ups)?;
            let targets: Vec<Vec<f64>> = (0..spec.heads)
                .map(|h| {
                    chunk
                        .iter()
                        .map(|s| ds.target_value(s.recording, target, h, regress))
                        .collect()
                })
                .collect();
            let mut g = Graph::new();
            let bound = g.bind(&model.params);
            let outs = model.forward(&mut g, &bound, &batch, Mode::Train(&mut dropout_rng))?;
            let loss = model.loss(&mut g, &outs, &targets, weights.as_ref().map(|w| &w[..]))?;
            loss_sum += g.value(loss).data()[0];
            batches += 1;
            g.backward(loss)?;
            let grads = g.param_grads(&bound, &model.params);
            drop(g);
            adam_step(&mut model.params, &grads, &mut state, &cfg.adam)?;
        }
        let snapshot = model.quantized();
        let f = validation_score(&snapshot, ds, target, cfg.selection_vote)?;
        log.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_weighted_f: f.weighted,
            val_f_absent: f.absent,
            val_f_present: f.present,
        });
        if f.weighted > best_f {
            best_f = f.weighted;
            best_epoch = epoch;
            best = snapshot;
        }
    }

    Ok(TrainedItemModel {
        target,
        model: best,
        hyperparams,
        best_epoch,
        validation_weighted_f: best_f,
        training_log: log,
        single_class_train_split: single_class,
    })
}

/// One scale item with a single classification (or regression) head.
pub fn train_item(
    spec: &ModelSpec,
    item_index: usize,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainedItemModel> {
    train_model(spec, Target::Item(item_index), ds, cfg)
}

/// Dedicated depression-detection model (`total >= threshold`).
pub fn train_depression_model(
    spec: &ModelSpec,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainedItemModel> {
    train_model(spec, Target::Depression, ds, cfg)
}

/// The `n` trial configurations a seeded search visits, in order.
pub fn sample_trials(space: &SearchSpace, n: usize, seed: u64) -> Vec<Hyperparams> {
    // Separate stream from training so that every trial trains from the same initialization.
    let mut rng = Rng::seed_from(seed ^ 0x5EA2_C400_0000_0001);
    (0..n)
        .map(|_| Hyperparams {
            use_batchnorm: space.use_batchnorm[rng.below(space.use_batchnorm.len())],
            dropout_rate: space.dropout_rate[rng.below(space.dropout_rate.len())],
            l2_lambda: space.l2_lambda[rng.below(space.l2_lambda.len())],
        })
        .collect()
}

/// Applies a trial's hyper-parameters to a spec and training config.
pub fn apply_trial(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    hp: Hyperparams,
) -> (ModelSpec, TrainConfig) {
    let mut s = spec.clone();
    s.use_batchnorm = hp.use_batchnorm;
    s.dropout_rate = hp.dropout_rate;
    let mut c = cfg.clone();
    c.adam.l2_lambda = hp.l2_lambda;
    (s, c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best: TrainedItemModel,
    pub best_trial: usize,
    /// `(hyper-parameters, validation weighted F)` per trial.
    pub trials: Vec<(Hyperparams, f64)>,
}

/// Random search over `cfg.search_space`; the highest validation F wins, ties to the
/// earlier trial.
pub fn random_search(
    spec: &ModelSpec,
    target: Target,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<SearchResult> {
    if cfg.n_search_trials == 0 {
        return Err(Error::InvalidConfig(
            "n_search_trials must be at least 1".into(),
        ));
    }
    cfg.validate()?;
    let mut best: Option<(usize, TrainedItemModel)> = None;
    let mut trials = Vec::with_capacity(cfg.n_search_trials);
    for (i, hp) in sample_trials(&cfg.search_space, cfg.n_search_trials, cfg.seed)
        .into_iter()
        .enumerate()
    {
        let (s, c) = apply_trial(spec, cfg, hp);
        let trained = train_model(&s, target, ds, &c)?;
        trials.push((hp, trained.validation_weighted_f));
        if best
            .as_ref()
            .is_none_or(|(_, b)| trained.validation_weighted_f > b.validation_weighted_f)
        {
            best = Some((i, trained));
        }
    }
    let (best_trial, best) = best.expect("at least one trial");
    Ok(SearchResult {
        best,
        best_trial,
        trials,
    })
}
