//! Subcommand implementations. Each returns what it wrote so callers and tests can
//! inspect the outputs without re-reading them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use itemvoice_core::corpus::{
    import_functionals, load_wav, parse_manifest, Manifest, ScaleDefinition, Split,
};
use itemvoice_core::dataset::{cache_path, Dataset, DatasetOptions, FeatureKind, Target};
use itemvoice_core::dsp::{write_cache, FeatureExtractor};
use itemvoice_core::model::Model;
use itemvoice_core::segment::{grid_geometry, RecordingFeatures};
use itemvoice_core::synth::{generate, SynthConfig};
use itemvoice_core::timeline::export_timeline;
use itemvoice_core::train::{
    load_trained, predict_recording, random_search, train_model, CheckpointExtra, TrainedItemModel,
};
use itemvoice_core::vote::{
    choose_rule, combine_items, f_scores, vote, CombinationRule, EvalReport, FScores, ItemDecision,
    ReportRow, VoteMethod,
};
use itemvoice_core::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

pub fn item_checkpoint(dir: &Path, item: usize) -> PathBuf {
    dir.join(format!("item_{item:02}.ivck"))
}

pub fn depression_checkpoint(dir: &Path) -> PathBuf {
    dir.join("depression.ivck")
}

pub fn multitask_checkpoint(dir: &Path) -> PathBuf {
    dir.join("multitask.ivck")
}

// ---------------------------------------------------------------------------
// extract

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractRow {
    pub recording_id: String,
    pub n_frames: usize,
    pub n_segments: usize,
}

/// Writes `<id>.ivms` for every manifest row plus `summary.csv`.
pub fn cmd_extract(
    manifest: &Manifest,
    out_dir: &Path,
    drop_last: bool,
) -> Result<Vec<ExtractRow>> {
    if manifest.rows.is_empty() {
        return Err(Error::EmptyManifest);
    }
    create_dir(out_dir)?;
    let ex = FeatureExtractor::standard();
    let mut rows = Vec::with_capacity(manifest.rows.len());
    for row in &manifest.rows {
        let rec = load_wav(&manifest.audio_path(row))?.with_ids(&row.recording_id, &row.speaker_id);
        let feats = RecordingFeatures::extract(&rec, &ex)?;
        write_cache(&cache_path(out_dir, &row.recording_id), &feats.spectrogram)?;
        let n_segments = grid_geometry(feats.duration_s, drop_last)
            .map(|g| g.n_segments)
            .or_else(|e| {
                if matches!(e, Error::TooShort { .. }) {
                    Ok(0)
                } else {
                    Err(e)
                }
            })?;
        rows.push(ExtractRow {
            recording_id: row.recording_id.clone(),
            n_frames: feats.spectrogram.n_frames,
            n_segments,
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidCsv(e.to_string()))?;
    write_file(&out_dir.join("summary.csv"), bytes)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// shared loading

pub fn load_manifest(cfg: &RunConfig) -> Result<Manifest> {
    parse_manifest(&cfg.manifest, &cfg.scale_definition()?)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let manifest = load_manifest(cfg)?;
    match cfg.features {
        FeatureKind::Spectrogram => Dataset::from_manifest(
            &manifest,
            &FeatureExtractor::standard(),
            cfg.cache_dir.as_deref(),
            cfg.segmentation,
        ),
        FeatureKind::Egemaps => {
            let path = cfg.functionals.as_ref().ok_or_else(|| {
                Error::InvalidConfig("egemaps features need `functionals`".into())
            })?;
            Dataset::from_functionals(
                &manifest,
                &import_functionals(path, cfg.functional_dim)?,
                cfg.segmentation,
            )
        }
    }
}

// ---------------------------------------------------------------------------
// train / search

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainedSummary {
    pub name: String,
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub validation_weighted_f: f64,
    pub single_class_train_split: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub trials: Vec<TrialSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialSummary {
    pub use_batchnorm: bool,
    pub dropout_rate: f64,
    pub l2_lambda: f64,
    pub validation_weighted_f: f64,
}

#[derive(Debug, Default)]
pub struct TrainOutcome {
    pub trained: Vec<TrainedSummary>,
    /// `(model name, error)` for every target that failed.
    pub failures: Vec<(String, Error)>,
}

impl TrainOutcome {
    /// The first failure, if any, so the exit code reflects it.
    pub fn into_result(mut self) -> Result<Vec<TrainedSummary>> {
        if self.failures.is_empty() {
            Ok(self.trained)
        } else {
            Err(self.failures.swap_remove(0).1)
        }
    }
}

fn targets(cfg: &RunConfig, scale: &ScaleDefinition) -> Vec<(String, Target, PathBuf)> {
    let dir = &cfg.out_dir;
    if cfg.multitask {
        return vec![(
            "multitask".into(),
            Target::AllItems,
            multitask_checkpoint(dir),
        )];
    }
    let mut out: Vec<_> = cfg
        .selected_items(scale)
        .into_iter()
        .map(|i| {
            (
                format!("item_{i:02}"),
                Target::Item(i),
                item_checkpoint(dir, i),
            )
        })
        .collect();
    if cfg.depression_model {
        out.push((
            "depression".into(),
            Target::Depression,
            depression_checkpoint(dir),
        ));
    }
    out
}

fn save_trained(
    trained: &TrainedItemModel,
    name: &str,
    path: &Path,
    trials: Vec<TrialSummary>,
) -> Result<TrainedSummary> {
    trained.save(path)?;
    write_file(
        &path.with_file_name(format!("{name}_log.csv")),
        trained.log_csv(),
    )?;
    Ok(TrainedSummary {
        name: name.to_string(),
        checkpoint: path.to_path_buf(),
        best_epoch: trained.best_epoch,
        validation_weighted_f: trained.validation_weighted_f,
        single_class_train_split: trained.single_class_train_split,
        trials,
    })
}

/// Trains every configured target (or runs a random search per target when `search`),
/// writing a checkpoint and an epoch log each and `train_summary.json`.
pub fn cmd_train(cfg: &RunConfig, search: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let scale = cfg.scale_definition()?;
    let ds = load_dataset(cfg)?;
    create_dir(&cfg.out_dir)?;
    let tc = cfg.train_config();
    let mut outcome = TrainOutcome::default();
    for (name, target, path) in targets(cfg, &scale) {
        let spec = cfg.model_spec(target.heads(&scale));
        let result = if search {
            random_search(&spec, target, &ds, &tc).and_then(|r| {
                let trials = r
                    .trials
                    .iter()
                    .map(|(hp, f)| TrialSummary {
                        use_batchnorm: hp.use_batchnorm,
                        dropout_rate: hp.dropout_rate,
                        l2_lambda: hp.l2_lambda,
                        validation_weighted_f: *f,
                    })
                    .collect();
                save_trained(&r.best, &name, &path, trials)
            })
        } else {
            train_model(&spec, target, &ds, &tc)
                .and_then(|t| save_trained(&t, &name, &path, Vec::new()))
        };
        match result {
            Ok(s) => outcome.trained.push(s),
            Err(e) => outcome.failures.push((name, e)),
        }
    }
    let summary = serde_json::json!({
        "trained": outcome.trained,
        "failed": outcome.failures.iter().map(|(n, e)| serde_json::json!({"name": n, "error": e.to_string()})).collect::<Vec<_>>(),
    });
    let file = if search {
        "search_summary.json"
    } else {
        "train_summary.json"
    };
    write_file(
        &cfg.out_dir.join(file),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// evaluate

/// A loaded model with the target it was trained for.
struct Loaded {
    model: Model,
    target: Target,
}

fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let (model, extra): (Model, CheckpointExtra) = load_trained(path)?;
    Ok(Loaded {
        model,
        target: extra.target,
    })
}

/// Per-item hard and soft decisions for one recording.
type ItemVotes = Vec<(ItemDecision, ItemDecision)>;

/// Loads the item models found for `cfg` (multitask if configured) and returns a
/// closure-free list of `(model, head)` per item.
fn item_models(cfg: &RunConfig, dir: &Path, items: &[usize]) -> Result<Vec<Loaded>> {
    if cfg.multitask {
        return Ok(vec![load_checkpoint(&multitask_checkpoint(dir))?]);
    }
    items
        .iter()
        .map(|&i| load_checkpoint(&item_checkpoint(dir, i)))
        .collect()
}

fn recording_votes(
    models: &[Loaded],
    ds: &Dataset,
    rec: usize,
    items: &[usize],
) -> Result<ItemVotes> {
    let mut grids = Vec::new();
    for m in models {
        grids.extend(predict_recording(&m.model, ds, rec, m.target)?);
    }
    items
        .iter()
        .map(|&i| {
            let g = grids
                .iter()
                .find(|g| g.item_index == i)
                .ok_or_else(|| Error::InvalidConfig(format!("no model predicts item {i}")))?;
            Ok((vote(g, VoteMethod::Hard)?, vote(g, VoteMethod::Soft)?))
        })
        .collect()
}

fn split_votes(
    models: &[Loaded],
    ds: &Dataset,
    split: Split,
    items: &[usize],
) -> Result<Vec<(usize, ItemVotes)>> {
    let recs = ds.in_split(split);
    if recs.is_empty() {
        return Err(Error::EmptySplit(split));
    }
    recs.into_iter()
        .map(|r| Ok((r, recording_votes(models, ds, r, items)?)))
        .collect()
}

fn pick(v: &(ItemDecision, ItemDecision), method: VoteMethod) -> &ItemDecision {
    match method {
        VoteMethod::Hard => &v.0,
        VoteMethod::Soft => &v.1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOutcome {
    pub report: EvalReport,
    pub report_path: PathBuf,
    /// Combination rule per voting method (hard, soft) when a combination row was produced.
    pub rules: Option<(CombinationRule, CombinationRule)>,
}

pub fn depression_label(scale: &ScaleDefinition) -> String {
    format!(
        "Depression Detection (total score >= {})",
        scale.depression_threshold
    )
}

/// Scores item models, the depression model and the item combination on `split` and
/// writes `report_<split>.csv` next to the checkpoints.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoints: &Path, split: Split) -> Result<EvaluateOutcome> {
    cfg.validate()?;
    let scale = cfg.scale_definition()?;
    let items = cfg.selected_items(&scale);
    let models = item_models(cfg, checkpoints, &items)?;
    let ds = load_dataset(cfg)?;
    let test = split_votes(&models, &ds, split, &items)?;

    let mut rows = Vec::new();
    for (k, &item) in items.iter().enumerate() {
        let labels: Vec<bool> = test
            .iter()
            .map(|(r, _)| ds.label(*r, Target::Item(item), 0))
            .collect();
        let score = |m: VoteMethod| -> Result<FScores> {
            let preds: Vec<bool> = test.iter().map(|(_, v)| pick(&v[k], m).present).collect();
            f_scores(&preds, &labels)
        };
        rows.push(ReportRow {
            label: scale.item_label(item),
            item_index: Some(item),
            hard: score(VoteMethod::Hard)?,
            soft: score(VoteMethod::Soft)?,
        });
    }

    let dep_labels: Vec<bool> = test
        .iter()
        .map(|(r, _)| ds.label(*r, Target::Depression, 0))
        .collect();
    let dep_path = depression_checkpoint(checkpoints);
    if cfg.depression_model && !cfg.multitask {
        let dep = load_checkpoint(&dep_path)?;
        let mut hard = Vec::new();
        let mut soft = Vec::new();
        for (r, _) in &test {
            let grid = &predict_recording(&dep.model, &ds, *r, dep.target)?[0];
            hard.push(vote(grid, VoteMethod::Hard)?.present);
            soft.push(vote(grid, VoteMethod::Soft)?.present);
        }
        rows.push(ReportRow {
            label: depression_label(&scale),
            item_index: None,
            hard: f_scores(&hard, &dep_labels)?,
            soft: f_scores(&soft, &dep_labels)?,
        });
    }

    let mut rules = None;
    if items.len() == scale.n_items() {
        let configured = cfg.combination()?;
        let val = match configured {
            Some(_) => Vec::new(),
            None => split_votes(&models, &ds, Split::Val, &items)?,
        };
        let mut per_method = Vec::new();
        for m in VoteMethod::ALL {
            let rule = match configured {
                Some(r) => r,
                None => {
                    let examples: Vec<(Vec<ItemDecision>, bool)> = val
                        .iter()
                        .map(|(r, v)| {
                            (
                                v.iter().map(|d| *pick(d, m)).collect(),
                                ds.label(*r, Target::Depression, 0),
                            )
                        })
                        .collect();
                    choose_rule(&examples, scale.n_items())?.0
                }
            };
            let preds = test
                .iter()
                .map(|(_, v)| {
                    let d: Vec<ItemDecision> = v.iter().map(|d| *pick(d, m)).collect();
                    Ok(combine_items(&d, scale.n_items(), rule)?.depressed)
                })
                .collect::<Result<Vec<bool>>>()?;
            per_method.push((rule, f_scores(&preds, &dep_labels)?));
        }
        let (hard, soft) = (per_method[0], per_method[1]);
        rows.push(ReportRow {
            label: format!("Depression from items ({} / {})", hard.0, soft.0),
            item_index: None,
            hard: hard.1,
            soft: soft.1,
        });
        rules = Some((hard.0, soft.0));
    }

    let report = EvalReport { rows };
    let report_path = checkpoints.join(format!("report_{split}.csv"));
    report.write(&report_path)?;
    Ok(EvaluateOutcome {
        report,
        report_path,
        rules,
    })
}

// ---------------------------------------------------------------------------
// predict / timeline

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemPrediction {
    pub item_index: usize,
    pub item_name: String,
    pub n_segments: usize,
    pub hard_present: bool,
    pub soft_present: bool,
    pub mean_present_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub recording_id: String,
    pub duration_s: f64,
    pub items: Vec<ItemPrediction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depression: Option<ItemPrediction>,
}

fn single_recording(
    wav: &Path,
    scale: &ScaleDefinition,
    options: DatasetOptions,
) -> Result<Dataset> {
    let id = wav
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("recording")
        .to_string();
    let rec = load_wav(wav)?.with_ids(id, "unknown");
    Dataset::from_recording(&rec, &FeatureExtractor::standard(), scale, options)
}

fn item_prediction(
    model: &Loaded,
    ds: &Dataset,
    scale: &ScaleDefinition,
    head: usize,
) -> Result<ItemPrediction> {
    let grid = predict_recording(&model.model, ds, 0, model.target)?.swap_remove(head);
    let soft = vote(&grid, VoteMethod::Soft)?;
    let name = match model.target {
        Target::Depression => depression_label(scale),
        _ => scale
            .item_name(grid.item_index)
            .unwrap_or("item")
            .to_string(),
    };
    Ok(ItemPrediction {
        item_index: grid.item_index,
        item_name: name,
        n_segments: grid.n_segments(),
        hard_present: vote(&grid, VoteMethod::Hard)?.present,
        soft_present: soft.present,
        mean_present_prob: soft.aggregate_present_prob,
    })
}

/// Item and depression decisions for one WAV file from spectrogram checkpoints.
pub fn cmd_predict(cfg: &RunConfig, checkpoints: &Path, wav: &Path) -> Result<Prediction> {
    if cfg.features != FeatureKind::Spectrogram {
        return Err(Error::InvalidConfig(
            "predict works on audio and needs a spectrogram model".into(),
        ));
    }
    let scale = cfg.scale_definition()?;
    let items = cfg.selected_items(&scale);
    let ds = single_recording(wav, &scale, cfg.segmentation)?;
    let models = item_models(cfg, checkpoints, &items)?;
    let mut out = Vec::new();
    for m in &models {
        for h in 0..m.model.spec.heads {
            out.push(item_prediction(m, &ds, &scale, h)?);
        }
    }
    out.retain(|p| items.contains(&p.item_index));
    let dep_path = depression_checkpoint(checkpoints);
    let depression = if cfg.depression_model && !cfg.multitask {
        Some(item_prediction(
            &load_checkpoint(&dep_path)?,
            &ds,
            &scale,
            0,
        )?)
    } else {
        None
    };
    let rec = &ds.recordings[0];
    Ok(Prediction {
        recording_id: rec.recording_id.clone(),
        duration_s: rec.duration_s,
        items: out,
        depression,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineOutcome {
    pub json_path: PathBuf,
    pub svg_path: PathBuf,
    pub n_columns: usize,
}

/// JSON and SVG timeline of one item of one WAV file. `item` selects the head of a
/// multi-task checkpoint and is checked against single-item checkpoints.
pub fn cmd_timeline(
    checkpoint: &Path,
    wav: &Path,
    item: Option<usize>,
    scale: &ScaleDefinition,
    out_dir: &Path,
    drop_last: bool,
) -> Result<TimelineOutcome> {
    let loaded = load_checkpoint(checkpoint)?;
    if !loaded.model.spec.kind.uses_spectrograms() {
        return Err(Error::InvalidConfig(
            "timeline needs a spectrogram checkpoint".into(),
        ));
    }
    let options = DatasetOptions {
        drop_last,
        ..Default::default()
    };
    let ds = single_recording(wav, scale, options)?;
    let grids = predict_recording(&loaded.model, &ds, 0, loaded.target)?;
    let grid = match (item, loaded.target) {
        (Some(i), _) => grids
            .into_iter()
            .find(|g| g.item_index == i)
            .ok_or_else(|| Error::InvalidConfig(format!("checkpoint does not predict item {i}")))?,
        (None, Target::AllItems) => {
            return Err(Error::InvalidConfig(
                "multi-task checkpoint needs --item".into(),
            ))
        }
        (None, _) => grids.into_iter().next().expect("one head"),
    };
    let name = match loaded.target {
        Target::Depression => depression_label(scale),
        _ => scale
            .item_name(grid.item_index)
            .unwrap_or("item")
            .to_string(),
    };
    let doc = export_timeline(&grid, &name, None)?;
    create_dir(out_dir)?;
    let stem = format!("{}_item{:02}", doc.recording_id, doc.item_index);
    let json_path = out_dir.join(format!("{stem}.json"));
    let svg_path = out_dir.join(format!("{stem}.svg"));
    write_file(&json_path, doc.to_json()? + "\n")?;
    write_file(&svg_path, doc.to_svg())?;
    Ok(TimelineOutcome {
        json_path,
        svg_path,
        n_columns: doc.segments.len(),
    })
}

// ---------------------------------------------------------------------------
// synth

/// Generates the synthetic corpus and a `config.toml` that trains on it.
pub fn cmd_synth(out_dir: &Path, scale_name: &str, synth: &SynthConfig) -> Result<PathBuf> {
    let cfg = RunConfig {
        scale: scale_name.to_string(),
        functionals: Some(PathBuf::from("functionals.csv")),
        ..RunConfig::default()
    };
    let scale = cfg.scale_definition()?;
    generate(out_dir, &scale, synth)?;
    let path = out_dir.join("config.toml");
    let mut text =
        String::from("# Generated for the synthetic corpus; paths are relative to this file.\n");
    let _ = write!(text, "{}", cfg.to_toml()?);
    write_file(&path, text)?;
    Ok(path)
}
