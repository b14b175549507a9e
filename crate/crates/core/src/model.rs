//! Spectrogram and functional-feature models: a three-branch strided CNN trunk
//! (or a dense encoder), optional LSTM over ten windows, and per-item heads.

use std::fmt;
use std::str::FromStr;

use itemvoice_tensor::{
    lstm_step, BatchNormStats, BoundParams, Checkpoint, Graph, LstmWeights, ParamSet, Rng, Tensor,
    Var,
};
use serde::{Deserialize, Serialize};

use crate::dsp::LogMelSpectrogram;
use crate::error::{Error, Result};
use crate::segment::SegmentSequence;

pub const EMBEDDING_DIM: usize = 156;
pub const LSTM_HIDDEN: usize = 64;
pub const ENCODER_HIDDEN: usize = 128;
const STRIDE: (usize, usize) = (2, 2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SpecCnn,
    SpecCnnLstm,
    EgemapsCnn,
    EgemapsCnnLstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::SpecCnn,
        ModelKind::SpecCnnLstm,
        ModelKind::EgemapsCnn,
        ModelKind::EgemapsCnnLstm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::SpecCnn => "spec_cnn",
            ModelKind::SpecCnnLstm => "spec_cnn_lstm",
            ModelKind::EgemapsCnn => "egemaps_cnn",
            ModelKind::EgemapsCnnLstm => "egemaps_cnn_lstm",
        }
    }

    pub fn uses_spectrograms(self) -> bool {
        matches!(self, ModelKind::SpecCnn | ModelKind::SpecCnnLstm)
    }

    pub fn is_sequence(self) -> bool {
        matches!(self, ModelKind::SpecCnnLstm | ModelKind::EgemapsCnnLstm)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify,
    Regress,
}

/// One parallel branch: `channels.len()` strided convolutions with a square kernel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub kernel: usize,
    pub padding: usize,
    pub channels: Vec<usize>,
}

impl BranchConfig {
    pub fn out_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnTrunkConfig {
    pub branches: Vec<BranchConfig>,
    pub input_frames: usize,
    pub input_mels: usize,
}

impl Default for CnnTrunkConfig {
    fn default() -> Self {
        let branch = |k: usize| BranchConfig {
            kernel: k,
            padding: k / 2,
            channels: vec![16, 52],
        };
        Self {
            branches: vec![branch(3), branch(5), branch(7)],
            input_frames: 200,
            input_mels: 64,
        }
    }
}

impl CnnTrunkConfig {
    pub fn embedding_dim(&self) -> usize {
        self.branches.iter().map(BranchConfig::out_channels).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.len() != 3 {
            return Err(Error::InvalidConfig(format!(
                "the trunk has exactly 3 branches, got {}",
                self.branches.len()
            )));
        }
        for (i, b) in self.branches.iter().enumerate() {
            if b.kernel == 0 || b.channels.is_empty() || b.channels.contains(&0) {
                return Err(Error::InvalidConfig(format!(
                    "branch {i} needs a kernel and non-zero channels"
                )));
            }
            let (mut h, mut w) = (self.input_frames, self.input_mels);
            for _ in &b.channels {
                h = itemvoice_tensor::conv2d_output_extent(h, b.kernel, STRIDE.0, b.padding)
                    .ok_or_else(|| {
                        Error::InvalidConfig(format!("branch {i} kernel does not fit"))
                    })?;
                w = itemvoice_tensor::conv2d_output_extent(w, b.kernel, STRIDE.1, b.padding)
                    .ok_or_else(|| {
                        Error::InvalidConfig(format!("branch {i} kernel does not fit"))
                    })?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub task: Task,
    pub heads: usize,
    pub use_batchnorm: bool,
    pub dropout_rate: f64,
    pub trunk: CnnTrunkConfig,
    pub functional_dim: usize,
    pub encoder_hidden: usize,
    pub lstm_hidden: usize,
    pub sequence_len: usize,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, task: Task, heads: usize) -> Self {
        Self {
            kind,
            task,
            heads,
            use_batchnorm: false,
            dropout_rate: 0.0,
            trunk: CnnTrunkConfig::default(),
            functional_dim: crate::corpus::DEFAULT_FUNCTIONAL_DIM,
            encoder_hidden: ENCODER_HIDDEN,
            lstm_hidden: LSTM_HIDDEN,
            sequence_len: crate::segment::SEQUENCE_LEN,
        }
    }

    /// Shared by the trunk and the functional encoder, which mirrors its width.
    pub fn embedding_dim(&self) -> usize {
        self.trunk.embedding_dim()
    }

    /// Units (windows) consumed per sample.
    pub fn units_per_sample(&self) -> usize {
        if self.kind.is_sequence() {
            self.sequence_len
        } else {
            1
        }
    }

    /// Shape of one unit: `[frames, mels]` or `[functional_dim]`.
    pub fn unit_shape(&self) -> Vec<usize> {
        if self.kind.uses_spectrograms() {
            vec![self.trunk.input_frames, self.trunk.input_mels]
        } else {
            vec![self.functional_dim]
        }
    }

    pub fn outputs_per_head(&self) -> usize {
        match self.task {
            Task::Classify => 2,
            Task::Regress => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::InvalidConfig("at least one head".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.sequence_len == 0
            || self.lstm_hidden == 0
            || self.functional_dim == 0
            || self.encoder_hidden == 0
        {
            return Err(Error::InvalidConfig("zero-sized model dimension".into()));
        }
        self.trunk.validate()
    }
}

/// A batch for [`Model::forward`]. `units` holds distinct windows stacked along the
/// first axis (`U x frames x mels` or `U x dim`); each sample lists the unit rows it
/// reads, in time order. Overlapping sequences share units.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub units: Tensor,
    pub samples: Vec<Vec<usize>>,
}

/// Output of one head for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadOutput {
    Probs { absent: f64, present: f64 },
    Score(f64),
}

impl HeadOutput {
    /// Probability of "present"; regression scores are clamped to `[0, 1]`.
    pub fn present_prob(&self) -> f64 {
        match *self {
            HeadOutput::Probs { present, .. } => present,
            HeadOutput::Score(s) => s.clamp(0.0, 1.0),
        }
    }

    pub fn pair(&self) -> (f64, f64) {
        let p = self.present_prob();
        match *self {
            HeadOutput::Probs { absent, present } => (absent, present),
            HeadOutput::Score(_) => (1.0 - p, p),
        }
    }
}

/// Training-time switches of a forward pass.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub bn: Option<BatchNormStats>,
}

fn branch_param(b: usize, d: usize, what: &str) -> String {
    format!("trunk.b{b}.conv{d}.{what}")
}

fn head_param(h: usize, what: &str) -> String {
    format!("head{h}.{what}")
}

impl Model {
    /// Xavier-uniform weights, zero biases, LSTM forget-gate bias 1.
    pub fn init(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut p = ParamSet::new();
        let emb = spec.embedding_dim();
        if spec.kind.uses_spectrograms() {
            for (b, br) in spec.trunk.branches.iter().enumerate() {
                let mut in_ch = 1;
                for (d, &out) in br.channels.iter().enumerate() {
                    let area = br.kernel * br.kernel;
                    p.insert(
                        branch_param(b, d, "weight"),
                        Tensor::xavier_uniform(
                            &[out, in_ch, br.kernel, br.kernel],
                            in_ch * area,
                            out * area,
                            rng,
                        ),
                    );
                    p.insert(branch_param(b, d, "bias"), Tensor::zeros(&[out]));
                    in_ch = out;
                }
            }
        } else {
            let (d, hdim) = (spec.functional_dim, spec.encoder_hidden);
            p.insert(
                "enc.fc1.weight",
                Tensor::xavier_uniform(&[hdim, d], d, hdim, rng),
            );
            p.insert("enc.fc1.bias", Tensor::zeros(&[hdim]));
            p.insert(
                "enc.fc2.weight",
                Tensor::xavier_uniform(&[emb, hdim], hdim, emb, rng),
            );
            p.insert("enc.fc2.bias", Tensor::zeros(&[emb]));
        }
        if spec.use_batchnorm {
            p.insert("bn.gamma", Tensor::full(&[emb], 1.0));
            p.insert("bn.beta", Tensor::zeros(&[emb]));
        }
        let mut head_in = emb;
        if spec.kind.is_sequence() {
            let hid = spec.lstm_hidden;
            p.insert(
                "lstm.w_ih",
                Tensor::xavier_uniform(&[4 * hid, emb], emb, 4 * hid, rng),
            );
            p.insert(
                "lstm.w_hh",
                Tensor::xavier_uniform(&[4 * hid, hid], hid, 4 * hid, rng),
            );
            let mut bias = Tensor::zeros(&[4 * hid]);
            bias.data_mut()[hid..2 * hid]
                .iter_mut()
                .for_each(|v| *v = 1.0);
            p.insert("lstm.bias", bias);
            head_in = hid;
        }
        let outs = spec.outputs_per_head();
        for h in 0..spec.heads {
            p.insert(
                head_param(h, "weight"),
                Tensor::xavier_uniform(&[outs, head_in], head_in, outs, rng),
            );
            p.insert(head_param(h, "bias"), Tensor::zeros(&[outs]));
        }
        let bn = spec.use_batchnorm.then(|| BatchNormStats::new(emb));
        Ok(Self {
            spec,
            params: p,
            bn,
        })
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let us = batch.units.shape();
        let want = self.spec.unit_shape();
        if us.len() != want.len() + 1 || us[1..] != want[..] {
            return Err(if self.spec.kind.uses_spectrograms() {
                Error::ShapeMismatch(format!("units {us:?}, expected N x {want:?}"))
            } else {
                Error::DimensionMismatch {
                    expected: self.spec.functional_dim,
                    found: us.last().copied().unwrap_or(0),
                }
            });
        }
        if batch.samples.is_empty() {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        for s in &batch.samples {
            if s.len() != self.spec.units_per_sample() {
                return Err(Error::BadSequenceLength {
                    expected: self.spec.units_per_sample(),
                    actual: s.len(),
                });
            }
            if let Some(&bad) = s.iter().find(|&&u| u >= us[0]) {
                return Err(Error::ShapeMismatch(format!("unit {bad} out of {}", us[0])));
            }
        }
        Ok(())
    }

    /// Trunk or encoder output for every unit, `U x 156`, before normalization.
    pub fn embed_units(&self, g: &mut Graph, bound: &BoundParams, units: Var) -> Result<Var> {
        if self.spec.kind.uses_spectrograms() {
            let s = g.shape(units).to_vec();
            let x = g.reshape(units, &[s[0], 1, s[1], s[2]])?;
            let mut parts = Vec::with_capacity(self.spec.trunk.branches.len());
            for (b, br) in self.spec.trunk.branches.iter().enumerate() {
                let mut y = x;
                for d in 0..br.channels.len() {
                    let k = bound.get(&branch_param(b, d, "weight"))?;
                    let bias = bound.get(&branch_param(b, d, "bias"))?;
                    y = g.conv2d(y, k, Some(bias), STRIDE, (br.padding, br.padding))?;
                    y = g.relu(y);
                }
                parts.push(g.global_avg_pool(y)?);
            }
            Ok(g.concat(&parts)?)
        } else {
            let h = g.linear(
                units,
                bound.get("enc.fc1.weight")?,
                Some(bound.get("enc.fc1.bias")?),
            )?;
            let h = g.relu(h);
            let e = g.linear(
                h,
                bound.get("enc.fc2.weight")?,
                Some(bound.get("enc.fc2.bias")?),
            )?;
            Ok(g.relu(e))
        }
    }

    /// Builds the forward graph; returns one `B x outputs` node per head.
    /// Training mode updates the batch-norm running statistics.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        bound: &BoundParams,
        batch: &Batch,
        mode: Mode<'_>,
    ) -> Result<Vec<Var>> {
        let mut bn = self.bn.take();
        let out = self.forward_with(g, bound, batch, mode, bn.as_mut());
        self.bn = bn;
        out
    }

    fn forward_with(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        batch: &Batch,
        mut mode: Mode<'_>,
        bn: Option<&mut BatchNormStats>,
    ) -> Result<Vec<Var>> {
        self.check_batch(batch)?;
        let train = matches!(mode, Mode::Train(_));
        let units = g.input(batch.units.clone());
        let mut emb = self.embed_units(g, bound, units)?;
        if let Some(stats) = bn {
            emb = g.batch_norm(
                emb,
                bound.get("bn.gamma")?,
                bound.get("bn.beta")?,
                stats,
                train,
            )?;
        }
        let rate = self.spec.dropout_rate;
        if let Mode::Train(rng) = &mut mode {
            emb = g.dropout(emb, rate, rng, true)?;
        }
        let features = if self.spec.kind.is_sequence() {
            let hid = self.spec.lstm_hidden;
            let b = batch.samples.len();
            let w = LstmWeights {
                w_ih: bound.get("lstm.w_ih")?,
                w_hh: bound.get("lstm.w_hh")?,
                bias: bound.get("lstm.bias")?,
            };
            let mut h = g.input(Tensor::zeros(&[b, hid]));
            let mut c = g.input(Tensor::zeros(&[b, hid]));
            for t in 0..self.spec.sequence_len {
                let rows: Vec<usize> = batch.samples.iter().map(|s| s[t]).collect();
                let x = g.gather_rows(emb, &rows)?;
                (h, c) = lstm_step(g, x, h, c, &w)?;
            }
            if let Mode::Train(rng) = &mut mode {
                h = g.dropout(h, rate, rng, true)?;
            }
            h
        } else {
            let rows: Vec<usize> = batch.samples.iter().map(|s| s[0]).collect();
            g.gather_rows(emb, &rows)?
        };
        (0..self.spec.heads)
            .map(|h| {
                let w = bound.get(&head_param(h, "weight"))?;
                let b = bound.get(&head_param(h, "bias"))?;
                Ok(g.linear(features, w, Some(b))?)
            })
            .collect()
    }

    /// Mean over heads of NLL (classification, `targets` in {0, 1}) or MSE (regression).
    pub fn loss(
        &self,
        g: &mut Graph,
        outputs: &[Var],
        targets: &[Vec<f64>],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        if outputs.len() != targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} heads, {} target lists",
                outputs.len(),
                targets.len()
            )));
        }
        let mut per_head = Vec::with_capacity(outputs.len());
        for (&out, t) in outputs.iter().zip(targets) {
            let l = match self.spec.task {
                Task::Classify => {
                    let lp = g.log_softmax(out)?;
                    let cls: Vec<usize> = t.iter().map(|&v| usize::from(v > 0.5)).collect();
                    g.weighted_nll_loss(lp, &cls, class_weights)?
                }
                Task::Regress => g.mse_loss(out, t)?,
            };
            per_head.push(l);
        }
        Ok(g.mean_of(&per_head)?)
    }

    /// Eval-mode outputs, `[sample][head]`.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<Vec<HeadOutput>>> {
        let mut g = Graph::new();
        let bound = g.bind(&self.params);
        let mut bn = self.bn.clone();
        let outs = self.forward_with(&mut g, &bound, batch, Mode::Eval, bn.as_mut())?;
        let n = batch.samples.len();
        let mut result = vec![Vec::with_capacity(self.spec.heads); n];
        for out in outs {
            let vals = g.value(out).data().to_vec();
            for (i, r) in result.iter_mut().enumerate() {
                r.push(match self.spec.task {
                    Task::Classify => {
                        let (a, b) = (vals[2 * i], vals[2 * i + 1]);
                        let m = a.max(b);
                        let (ea, eb) = ((a - m).exp(), (b - m).exp());
                        HeadOutput::Probs {
                            absent: ea / (ea + eb),
                            present: eb / (ea + eb),
                        }
                    }
                    Task::Regress => HeadOutput::Score(vals[i]),
                });
            }
        }
        Ok(result)
    }

    /// Trunk (or encoder) embedding of one spectrogram.
    pub fn cnn_embed(&self, spectrogram: &LogMelSpectrogram) -> Result<Vec<f64>> {
        if !self.spec.kind.uses_spectrograms() {
            return Err(Error::InvalidConfig(format!(
                "{} has no convolutional trunk",
                self.spec.kind
            )));
        }
        let units = spectrogram_units(std::slice::from_ref(spectrogram))?;
        let mut g = Graph::new();
        let bound = g.bind(&self.params);
        let u = g.input(units);
        let e = self.embed_units(&mut g, &bound, u)?;
        Ok(g.value(e).data().to_vec())
    }

    fn single(&self, units: Tensor) -> Result<Vec<HeadOutput>> {
        let n = units.shape()[0];
        let batch = Batch {
            units,
            samples: vec![(0..n).collect()],
        };
        Ok(self.predict(&batch)?.remove(0))
    }

    pub fn cnn_forward(&self, spectrogram: &LogMelSpectrogram) -> Result<HeadOutput> {
        self.require(ModelKind::SpecCnn)?;
        Ok(self.single(spectrogram_units(std::slice::from_ref(spectrogram))?)?[0])
    }

    pub fn cnn_lstm_forward(&self, seq: &SegmentSequence) -> Result<HeadOutput> {
        self.require(ModelKind::SpecCnnLstm)?;
        Ok(self.sequence_forward(&seq.spectrograms)?[0])
    }

    fn sequence_forward(&self, spectrograms: &[LogMelSpectrogram]) -> Result<Vec<HeadOutput>> {
        if spectrograms.len() != self.spec.sequence_len {
            return Err(Error::BadSequenceLength {
                expected: self.spec.sequence_len,
                actual: spectrograms.len(),
            });
        }
        self.single(spectrogram_units(spectrograms)?)
    }

    /// One functional vector (CNN variant) or `sequence_len` of them (LSTM variant).
    pub fn egemaps_forward(&self, vectors: &[Vec<f64>]) -> Result<HeadOutput> {
        if self.spec.kind.uses_spectrograms() {
            return Err(Error::InvalidConfig(format!(
                "{} expects spectrograms",
                self.spec.kind
            )));
        }
        Ok(self.functional_forward(vectors)?[0])
    }

    fn functional_forward(&self, vectors: &[Vec<f64>]) -> Result<Vec<HeadOutput>> {
        let want = self.spec.units_per_sample();
        if vectors.len() != want {
            return Err(Error::BadSequenceLength {
                expected: want,
                actual: vectors.len(),
            });
        }
        self.single(functional_units(vectors, self.spec.functional_dim)?)
    }

    /// Every head's output for one sample: spectrograms or functional vectors.
    pub fn multitask_forward(&self, sample: &SampleInput<'_>) -> Result<Vec<HeadOutput>> {
        match sample {
            SampleInput::Spectrograms(s) if self.spec.kind.uses_spectrograms() => {
                if self.spec.kind.is_sequence() {
                    self.sequence_forward(s)
                } else if s.len() != 1 {
                    Err(Error::BadSequenceLength {
                        expected: 1,
                        actual: s.len(),
                    })
                } else {
                    self.single(spectrogram_units(s)?)
                }
            }
            SampleInput::Functionals(v) if !self.spec.kind.uses_spectrograms() => {
                self.functional_forward(v)
            }
            _ => Err(Error::InvalidConfig(format!(
                "input type does not match {}",
                self.spec.kind
            ))),
        }
    }

    fn require(&self, kind: ModelKind) -> Result<()> {
        if self.spec.kind != kind {
            return Err(Error::InvalidConfig(format!(
                "model is {}, not {kind}",
                self.spec.kind
            )));
        }
        Ok(())
    }

    /// Copy with parameters and running statistics rounded to `f32`, i.e. exactly what a
    /// checkpoint stores.
    pub fn quantized(&self) -> Model {
        let mut m = self.clone();
        m.params.quantize_f32();
        if let Some(bn) = &mut m.bn {
            bn.mean
                .iter_mut()
                .chain(bn.var.iter_mut())
                .for_each(|v| *v = *v as f32 as f64);
        }
        m
    }

    /// Checkpoint with the spec (and `extra`) as JSON metadata.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let meta = serde_json::to_string(&CheckpointMeta {
            spec: self.spec.clone(),
            extra,
        })?;
        let mut tensors = self.params.clone();
        if let Some(bn) = &self.bn {
            let n = bn.mean.len();
            tensors.insert(BN_MEAN, Tensor::new(&[n], bn.mean.clone())?);
            tensors.insert(BN_VAR, Tensor::new(&[n], bn.var.clone())?);
        }
        Ok(Checkpoint {
            kind: self.spec.kind.as_str().to_string(),
            meta,
            tensors,
        })
    }

    /// Rebuilds a model from a checkpoint; returns it with the `extra` metadata.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Model, serde_json::Value)> {
        let meta: CheckpointMeta = serde_json::from_str(&ck.meta)?;
        if meta.spec.kind.as_str() != ck.kind {
            return Err(Error::InvalidConfig(format!(
                "checkpoint kind `{}` disagrees with its spec ({})",
                ck.kind, meta.spec.kind
            )));
        }
        let template = Model::init(meta.spec.clone(), &mut Rng::seed_from(0))?;
        let mut params = ParamSet::new();
        for (name, t) in template.params.iter() {
            let stored = ck
                .tensors
                .get(name)
                .ok_or_else(|| Error::InvalidConfig(format!("checkpoint lacks tensor `{name}`")))?;
            if stored.shape() != t.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}`: checkpoint {:?}, spec {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            params.insert(name, stored.clone());
        }
        let bn = match template.bn {
            None => None,
            Some(mut s) => {
                let get = |n: &str| {
                    ck.tensors
                        .get(n)
                        .map(|t| t.data().to_vec())
                        .ok_or_else(|| Error::InvalidConfig(format!("checkpoint lacks `{n}`")))
                };
                s.mean = get(BN_MEAN)?;
                s.var = get(BN_VAR)?;
                Some(s)
            }
        };
        Ok((
            Model {
                spec: meta.spec,
                params,
                bn,
            },
            meta.extra,
        ))
    }
}

const BN_MEAN: &str = "bn.running_mean";
const BN_VAR: &str = "bn.running_var";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    spec: ModelSpec,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Input of one sample for [`Model::multitask_forward`].
pub enum SampleInput<'a> {
    Spectrograms(&'a [LogMelSpectrogram]),
    Functionals(&'a [Vec<f64>]),
}

/// Stacks spectrograms into `N x frames x mels`.
pub fn spectrogram_units(specs: &[LogMelSpectrogram]) -> Result<Tensor> {
    let first = specs
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no spectrograms".into()))?;
    let (f, m) = (first.n_frames, first.n_mels);
    let mut data = Vec::with_capacity(specs.len() * f * m);
    for s in specs {
        if (s.n_frames, s.n_mels) != (f, m) {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram {}x{} among {f}x{m}",
                s.n_frames, s.n_mels
            )));
        }
        data.extend_from_slice(&s.values);
    }
    Ok(Tensor::new(&[specs.len(), f, m], data)?)
}

/// Stacks functional vectors into `N x dim`.
pub fn functional_units(vectors: &[Vec<f64>], dim: usize) -> Result<Tensor> {
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: v.len(),
        });
    }
    if vectors.is_empty() {
        return Err(Error::ShapeMismatch("no functional vectors".into()));
    }
    Ok(Tensor::new(&[vectors.len(), dim], vectors.concat())?)
}
