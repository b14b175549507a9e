//! Run configuration file (TOML).
//!
//! ```toml
//! scale = "madrs"                 # madrs | phq8
//! features = "spectrogram"        # spectrogram | egemaps
//! model = "spec_cnn_lstm"         # spec_cnn | spec_cnn_lstm | egemaps_cnn | egemaps_cnn_lstm
//! task = "classify"               # classify | regress
//! manifest = "manifest.csv"       # relative paths resolve against the config file
//! functionals = "functionals.csv" # egemaps only
//! functional_dim = 88
//! cache_dir = "cache"             # optional spectrogram caches from `extract`
//! out_dir = "run"
//! items = [10]                    # optional; default every item
//! depression_model = true
//! multitask = false
//! seed = 0                        # ITEMVOICE_SEED overrides
//!
//! [train]
//! batch_size = 32
//! max_epochs = 100
//! alpha = 0.0005
//! beta1 = 0.9
//! beta2 = 0.999
//! epsilon = 1e-8
//! l2_lambda = 1e-4
//! use_batchnorm = false
//! dropout_rate = 0.0
//! n_search_trials = 8
//! class_weighting = false
//! selection_vote = "soft"
//! [train.search_space]
//! use_batchnorm = [true, false]
//! dropout_rate = [0.0, 0.1, 0.3, 0.5]
//! l2_lambda = [0.0, 1e-5, 1e-4, 1e-3]
//!
//! [trunk]
//! kernels = [3, 5, 7]
//! channels = [16, 52]
//!
//! [segmentation]
//! drop_last = false
//! standardize = false
//!
//! [vote]
//! method = "soft"                 # hard | soft
//! combination = "auto"            # auto | mean_prob | count_threshold:K
//! ```

use std::path::{Path, PathBuf};

use itemvoice_core::corpus::{ScaleDefinition, ScaleName};
use itemvoice_core::dataset::{DatasetOptions, FeatureKind};
use itemvoice_core::model::{BranchConfig, CnnTrunkConfig, ModelKind, ModelSpec, Task};
use itemvoice_core::train::{SearchSpace, TrainConfig};
use itemvoice_core::vote::{CombinationRule, VoteMethod};
use itemvoice_core::{Error, Result};
use itemvoice_tensor::AdamConfig;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "ITEMVOICE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub l2_lambda: f64,
    pub use_batchnorm: bool,
    pub dropout_rate: f64,
    pub n_search_trials: usize,
    pub class_weighting: bool,
    pub selection_vote: VoteMethod,
    pub search_space: SearchSpace,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            alpha: t.adam.alpha,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            epsilon: t.adam.epsilon,
            l2_lambda: t.adam.l2_lambda,
            use_batchnorm: false,
            dropout_rate: 0.0,
            n_search_trials: t.n_search_trials,
            class_weighting: t.class_weighting,
            selection_vote: t.selection_vote,
            search_space: t.search_space,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrunkSection {
    pub kernels: Vec<usize>,
    pub channels: Vec<usize>,
}

impl Default for TrunkSection {
    fn default() -> Self {
        let d = CnnTrunkConfig::default();
        Self {
            kernels: d.branches.iter().map(|b| b.kernel).collect(),
            channels: d.branches[0].channels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoteSection {
    pub method: VoteMethod,
    /// `auto` picks the rule on the validation split.
    pub combination: String,
}

impl Default for VoteSection {
    fn default() -> Self {
        Self {
            method: VoteMethod::Soft,
            combination: "auto".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scale: String,
    pub features: FeatureKind,
    pub model: ModelKind,
    pub task: Task,
    pub manifest: PathBuf,
    pub functionals: Option<PathBuf>,
    pub functional_dim: usize,
    pub cache_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub items: Option<Vec<usize>>,
    pub depression_model: bool,
    pub multitask: bool,
    pub seed: u64,
    pub train: TrainSection,
    pub trunk: TrunkSection,
    pub segmentation: DatasetOptions,
    pub vote: VoteSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scale: "madrs".into(),
            features: FeatureKind::Spectrogram,
            model: ModelKind::SpecCnnLstm,
            task: Task::Classify,
            manifest: PathBuf::from("manifest.csv"),
            functionals: None,
            functional_dim: itemvoice_core::corpus::DEFAULT_FUNCTIONAL_DIM,
            cache_dir: None,
            out_dir: PathBuf::from("run"),
            items: None,
            depression_model: true,
            multitask: false,
            seed: 0,
            train: TrainSection::default(),
            trunk: TrunkSection::default(),
            segmentation: DatasetOptions::default(),
            vote: VoteSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config file, resolves relative paths against its directory and
    /// applies `ITEMVOICE_SEED`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.out_dir);
        self.functionals.as_mut().map(fix);
        self.cache_dir.as_mut().map(fix);
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| {
                Error::InvalidConfig(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))
            })?;
        }
        Ok(())
    }

    pub fn scale_definition(&self) -> Result<ScaleDefinition> {
        Ok(ScaleDefinition::from_name(self.scale.parse::<ScaleName>()?))
    }

    pub fn combination(&self) -> Result<Option<CombinationRule>> {
        if self.vote.combination == "auto" {
            Ok(None)
        } else {
            self.vote.combination.parse().map(Some)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            adam: AdamConfig {
                beta1: t.beta1,
                beta2: t.beta2,
                alpha: t.alpha,
                epsilon: t.epsilon,
                l2_lambda: t.l2_lambda,
            },
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            seed: self.seed,
            search_space: t.search_space.clone(),
            n_search_trials: t.n_search_trials,
            class_weighting: t.class_weighting,
            selection_vote: t.selection_vote,
        }
    }

    pub fn model_spec(&self, heads: usize) -> ModelSpec {
        let mut spec = ModelSpec::new(self.model, self.task, heads);
        spec.use_batchnorm = self.train.use_batchnorm;
        spec.dropout_rate = self.train.dropout_rate;
        spec.functional_dim = self.functional_dim;
        spec.trunk.branches = self
            .trunk
            .kernels
            .iter()
            .map(|&k| BranchConfig {
                kernel: k,
                padding: k / 2,
                channels: self.trunk.channels.clone(),
            })
            .collect();
        spec
    }

    /// Checks cross-field consistency and that input paths exist.
    pub fn validate(&self) -> Result<()> {
        let scale = self.scale_definition()?;
        let wants_spec = self.model.uses_spectrograms();
        if wants_spec != (self.features == FeatureKind::Spectrogram) {
            return Err(Error::InvalidConfig(format!(
                "model {} is incompatible with {:?} features",
                self.model, self.features
            )));
        }
        if !self.manifest.exists() {
            return Err(Error::InvalidConfig(format!(
                "manifest {} does not exist",
                self.manifest.display()
            )));
        }
        if self.features == FeatureKind::Egemaps {
            match &self.functionals {
                Some(p) if p.exists() => {}
                Some(p) => {
                    return Err(Error::InvalidConfig(format!(
                        "functionals {} does not exist",
                        p.display()
                    )))
                }
                None => {
                    return Err(Error::InvalidConfig(
                        "egemaps features need `functionals`".into(),
                    ))
                }
            }
        }
        if let Some(items) = &self.items {
            if let Some(bad) = items.iter().find(|&&i| i == 0 || i > scale.n_items()) {
                return Err(Error::InvalidConfig(format!(
                    "item {bad} outside 1..={}",
                    scale.n_items()
                )));
            }
        }
        self.combination()?;
        self.model_spec(1).validate()?;
        self.train_config().validate()
    }

    pub fn selected_items(&self, scale: &ScaleDefinition) -> Vec<usize> {
        self.items
            .clone()
            .unwrap_or_else(|| (1..=scale.n_items()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
        let t = cfg.train_config();
        assert_eq!(
            (t.adam.beta1, t.adam.beta2, t.adam.alpha),
            (0.9, 0.999, 0.0005)
        );
        assert_eq!(t.batch_size, 32);
        assert_eq!(t.max_epochs, 100);
        assert_eq!(cfg.model_spec(1).trunk, CnnTrunkConfig::default());
    }

    #[test]
    fn partial_file() {
        let cfg = RunConfig::parse(
            "scale = \"phq8\"\nmodel = \"egemaps_cnn\"\nfeatures = \"egemaps\"\n[train]\nmax_epochs = 3\n[vote]\ncombination = \"count_threshold:4\"\n",
        )
        .unwrap();
        assert_eq!(cfg.scale_definition().unwrap().n_items(), 8);
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(
            cfg.combination().unwrap(),
            Some(CombinationRule::CountThreshold(4))
        );
        assert!(RunConfig::parse("bogus = 1").is_err());
    }
}
