//! Per-recording model inputs (4 s spectrogram windows or functional vectors),
//! sample indexing, and batch assembly.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use itemvoice_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    binarize_labels, load_wav, FunctionalFeatureVector, ItemLabel, Manifest, Recording,
    RecordingLabels, ScaleDefinition, Split,
};
use crate::dsp::{read_cache, FeatureExtractor, LogMelSpectrogram};
use crate::error::{Error, Result};
use crate::model::{Batch, ModelSpec};
use crate::segment::{geometry_with_span, GridGeometry, RecordingFeatures, HOP_S, WINDOW_S};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Spectrogram,
    Egemaps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetOptions {
    pub drop_last: bool,
    /// Standardize every 4 s spectrogram to zero mean and unit variance.
    pub standardize: bool,
}

/// One recording's inputs. Unit `k` covers seconds `[k, k + 4)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingData {
    pub recording_id: String,
    pub speaker_id: String,
    pub split: Split,
    pub duration_s: f64,
    pub n_units: usize,
    /// `n_units x unit_len`, every value representable in `f32`.
    pub units: Vec<f64>,
    pub labels: RecordingLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scale: ScaleDefinition,
    pub feature: FeatureKind,
    pub unit_shape: Vec<usize>,
    pub options: DatasetOptions,
    pub recordings: Vec<RecordingData>,
}

/// Cache file of one recording inside an extraction directory.
pub fn cache_path(dir: &Path, recording_id: &str) -> PathBuf {
    dir.join(format!("{recording_id}.ivms"))
}

/// What a model is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "target", content = "item")]
pub enum Target {
    /// One scale item, 1-based.
    Item(usize),
    /// `total >= threshold`.
    Depression,
    /// Every item of the scale, one head each.
    AllItems,
}

impl Target {
    pub fn heads(&self, scale: &ScaleDefinition) -> usize {
        match self {
            Target::AllItems => scale.n_items(),
            _ => 1,
        }
    }

    /// Item index reported for head `h` (0 for the depression target).
    pub fn head_item(&self, h: usize) -> usize {
        match self {
            Target::Item(i) => *i,
            Target::Depression => 0,
            Target::AllItems => h + 1,
        }
    }

    pub fn validate(&self, scale: &ScaleDefinition) -> Result<()> {
        if let Target::Item(i) = self {
            if *i == 0 || *i > scale.n_items() {
                return Err(Error::InvalidConfig(format!(
                    "item {i} outside 1..={} of {:?}",
                    scale.n_items(),
                    scale.name
                )));
            }
        }
        Ok(())
    }
}

/// Position of one training/evaluation sample: recording and first unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub recording: usize,
    pub start: usize,
}

fn quantize(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

impl Dataset {
    /// Spectrogram windows for every manifest row, read from `cache_dir` when a
    /// cache file exists there and computed from the audio otherwise.
    pub fn from_manifest(
        manifest: &Manifest,
        ex: &FeatureExtractor,
        cache_dir: Option<&Path>,
        options: DatasetOptions,
    ) -> Result<Self> {
        let labels = binarize_labels(manifest);
        let mut recordings = Vec::with_capacity(manifest.rows.len());
        for row in &manifest.rows {
            let cached = cache_dir
                .map(|d| cache_path(d, &row.recording_id))
                .filter(|p| p.exists());
            let feats = match cached {
                Some(p) => {
                    let spec = read_cache(&p, &row.recording_id)?;
                    let duration = spec.n_frames as f64 / ex.frames_per_second();
                    RecordingFeatures::from_spectrogram(spec, ex, duration)?
                }
                None => {
                    let rec = load_wav(&manifest.audio_path(row))?
                        .with_ids(&row.recording_id, &row.speaker_id);
                    RecordingFeatures::extract(&rec, ex)?
                }
            };
            recordings.push(Self::recording_data(
                &row.recording_id,
                &row.speaker_id,
                row.split,
                &feats,
                ex,
                options,
                labels[&row.recording_id].clone(),
            )?);
        }
        Ok(Self {
            scale: manifest.scale.clone(),
            feature: FeatureKind::Spectrogram,
            unit_shape: vec![
                WINDOW_S as usize * ex.frames_per_second() as usize,
                ex.bank.n_mels,
            ],
            options,
            recordings,
        })
    }

    /// A single unlabelled recording (labels are all-absent placeholders), for prediction.
    pub fn from_recording(
        rec: &Recording,
        ex: &FeatureExtractor,
        scale: &ScaleDefinition,
        options: DatasetOptions,
    ) -> Result<Self> {
        let feats = RecordingFeatures::extract(rec, ex)?;
        let labels = RecordingLabels {
            items: (1..=scale.n_items())
                .map(|i| ItemLabel {
                    item_index: i,
                    raw_score: 0,
                    present: false,
                })
                .collect(),
            total: 0,
            depressed: false,
        };
        let data = Self::recording_data(
            &rec.id,
            &rec.speaker_id,
            Split::Test,
            &feats,
            ex,
            options,
            labels,
        )?;
        Ok(Self {
            scale: scale.clone(),
            feature: FeatureKind::Spectrogram,
            unit_shape: vec![feats.frames_per_window, ex.bank.n_mels],
            options,
            recordings: vec![data],
        })
    }

    fn recording_data(
        id: &str,
        speaker: &str,
        split: Split,
        feats: &RecordingFeatures,
        ex: &FeatureExtractor,
        options: DatasetOptions,
        labels: RecordingLabels,
    ) -> Result<RecordingData> {
        let n_units = feats.n_windows();
        if n_units == 0 {
            return Err(Error::TooShort {
                needed_s: WINDOW_S,
                actual_s: feats.duration_s,
            });
        }
        let mut units = Vec::with_capacity(n_units * feats.frames_per_window * ex.bank.n_mels);
        for k in 0..n_units {
            let mut w: LogMelSpectrogram = feats.window(k)?;
            if options.standardize {
                w.standardize();
            }
            units.extend_from_slice(&w.values);
        }
        quantize(&mut units);
        Ok(RecordingData {
            recording_id: id.to_string(),
            speaker_id: speaker.to_string(),
            split,
            duration_s: feats.duration_s,
            n_units,
            units,
            labels,
        })
    }

    /// Functional vectors grouped per manifest row; window indices must run `0..n`.
    pub fn from_functionals(
        manifest: &Manifest,
        vectors: &[FunctionalFeatureVector],
        options: DatasetOptions,
    ) -> Result<Self> {
        let dim = vectors
            .first()
            .map(|v| v.values.len())
            .ok_or_else(|| Error::InvalidCsv("no functional vectors".into()))?;
        let mut by_rec: HashMap<&str, BTreeMap<usize, &[f64]>> = HashMap::new();
        for v in vectors {
            if v.values.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.values.len(),
                });
            }
            if by_rec
                .entry(&v.recording_id)
                .or_default()
                .insert(v.window_index, &v.values)
                .is_some()
            {
                return Err(Error::InvalidCsv(format!(
                    "recording `{}` repeats window {}",
                    v.recording_id, v.window_index
                )));
            }
        }
        let labels = binarize_labels(manifest);
        let mut recordings = Vec::with_capacity(manifest.rows.len());
        for row in &manifest.rows {
            let windows = by_rec.get(row.recording_id.as_str()).ok_or_else(|| {
                Error::InvalidCsv(format!("no functionals for `{}`", row.recording_id))
            })?;
            if windows.keys().enumerate().any(|(i, &k)| i != k) {
                return Err(Error::InvalidCsv(format!(
                    "windows of `{}` are not numbered 0..{}",
                    row.recording_id,
                    windows.len()
                )));
            }
            let mut units: Vec<f64> = windows.values().flat_map(|v| v.iter().copied()).collect();
            quantize(&mut units);
            recordings.push(RecordingData {
                recording_id: row.recording_id.clone(),
                speaker_id: row.speaker_id.clone(),
                split: row.split,
                duration_s: (windows.len() - 1) as f64 * HOP_S + WINDOW_S,
                n_units: windows.len(),
                units,
                labels: labels[&row.recording_id].clone(),
            });
        }
        Ok(Self {
            scale: manifest.scale.clone(),
            feature: FeatureKind::Egemaps,
            unit_shape: vec![dim],
            options,
            recordings,
        })
    }

    pub fn unit_len(&self) -> usize {
        self.unit_shape.iter().product()
    }

    pub fn in_split(&self, split: Split) -> Vec<usize> {
        (0..self.recordings.len())
            .filter(|&i| self.recordings[i].split == split)
            .collect()
    }

    pub fn check_compatible(&self, spec: &ModelSpec) -> Result<()> {
        let want = if spec.kind.uses_spectrograms() {
            FeatureKind::Spectrogram
        } else {
            FeatureKind::Egemaps
        };
        if want != self.feature {
            return Err(Error::InvalidConfig(format!(
                "{} cannot read {:?} features",
                spec.kind, self.feature
            )));
        }
        if spec.unit_shape() != self.unit_shape {
            return Err(if self.feature == FeatureKind::Egemaps {
                Error::DimensionMismatch {
                    expected: spec.functional_dim,
                    found: self.unit_shape[0],
                }
            } else {
                Error::ShapeMismatch(format!(
                    "model expects {:?}, data has {:?}",
                    spec.unit_shape(),
                    self.unit_shape
                ))
            });
        }
        Ok(())
    }

    /// Voting grid of one recording for a model reading `units_per_sample` windows.
    pub fn geometry(&self, recording: usize, units_per_sample: usize) -> Result<GridGeometry> {
        let span = WINDOW_S + (units_per_sample - 1) as f64 * HOP_S;
        let r = &self.recordings[recording];
        let mut g = geometry_with_span(r.duration_s, span, self.options.drop_last)?;
        // Durations from cached frames or functionals can disagree with the unit count
        // at the sub-second level; the unit count is authoritative.
        let available = r.n_units + 1 - units_per_sample.min(r.n_units + 1);
        let available = available - usize::from(self.options.drop_last).min(available);
        if available == 0 {
            return Err(Error::TooShort {
                needed_s: span,
                actual_s: r.duration_s,
            });
        }
        g.n_segments = g.n_segments.min(available);
        Ok(g)
    }

    /// Samples of the given recordings, in recording then time order.
    pub fn samples(&self, recordings: &[usize], units_per_sample: usize) -> Result<Vec<SampleRef>> {
        let mut out = Vec::new();
        for &r in recordings {
            let n = self.geometry(r, units_per_sample)?.n_segments;
            out.extend((0..n).map(|start| SampleRef {
                recording: r,
                start,
            }));
        }
        Ok(out)
    }

    /// Gathers the distinct units read by `samples` into one batch.
    pub fn batch(&self, samples: &[SampleRef], units_per_sample: usize) -> Result<Batch> {
        let len = self.unit_len();
        let mut index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut data = Vec::new();
        let mut rows = Vec::with_capacity(samples.len());
        for s in samples {
            let r = &self.recordings[s.recording];
            if s.start + units_per_sample > r.n_units {
                return Err(Error::ShapeMismatch(format!(
                    "sample at unit {} of `{}` needs {units_per_sample} of {} units",
                    s.start, r.recording_id, r.n_units
                )));
            }
            let row: Vec<usize> = (s.start..s.start + units_per_sample)
                .map(|u| {
                    *index.entry((s.recording, u)).or_insert_with(|| {
                        data.extend_from_slice(&r.units[u * len..(u + 1) * len]);
                        data.len() / len - 1
                    })
                })
                .collect();
            rows.push(row);
        }
        let mut shape = vec![index.len()];
        shape.extend_from_slice(&self.unit_shape);
        Ok(Batch {
            units: Tensor::new(&shape, data)?,
            samples: rows,
        })
    }

    /// Training target of head `h` for a recording: `0/1` for classification,
    /// raw item score (or total) for regression.
    pub fn target_value(&self, recording: usize, target: Target, h: usize, regress: bool) -> f64 {
        let l = &self.recordings[recording].labels;
        match target {
            Target::Depression => {
                if regress {
                    l.total as f64
                } else {
                    f64::from(u8::from(l.depressed))
                }
            }
            Target::Item(_) | Target::AllItems => {
                let item = &l.items[target.head_item(h) - 1];
                if regress {
                    item.raw_score as f64
                } else {
                    f64::from(u8::from(item.present))
                }
            }
        }
    }

    /// Binary label of head `h` for a recording.
    pub fn label(&self, recording: usize, target: Target, h: usize) -> bool {
        self.target_value(recording, target, h, false) > 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_manifest_str, ScaleDefinition};

    fn manifest() -> Manifest {
        let text = "recording_id,speaker_id,path,split,item_1,item_2,item_3,item_4,item_5,item_6,item_7,item_8\n\
                    a,s1,a.wav,train,1,0,0,0,0,0,0,0\n\
                    b,s2,b.wav,val,0,0,0,0,0,0,0,0\n";
        parse_manifest_str(text, &ScaleDefinition::phq8(), Path::new(".")).unwrap()
    }

    fn functionals(id: &str, n: usize, dim: usize) -> Vec<FunctionalFeatureVector> {
        (0..n)
            .map(|k| FunctionalFeatureVector {
                recording_id: id.into(),
                window_index: k,
                values: vec![k as f64 + 0.1; dim],
            })
            .collect()
    }

    #[test]
    fn functional_dataset_samples_and_batches() {
        let mut v = functionals("a", 12, 4);
        v.extend(functionals("b", 10, 4));
        let ds = Dataset::from_functionals(&manifest(), &v, DatasetOptions::default()).unwrap();
        assert_eq!(ds.unit_shape, vec![4]);
        assert_eq!(ds.recordings[0].duration_s, 15.0);
        assert_eq!(ds.geometry(0, 10).unwrap().n_segments, 3);
        assert_eq!(ds.geometry(1, 10).unwrap().n_segments, 1);
        assert_eq!(ds.geometry(0, 1).unwrap().n_segments, 12);

        let s = ds.samples(&[0], 10).unwrap();
        let b = ds.batch(&s, 10).unwrap();
        // Three overlapping sequences over twelve distinct windows.
        assert_eq!(b.units.shape(), &[12, 4]);
        assert_eq!(b.samples[2], (2..12).collect::<Vec<_>>());
        assert_eq!(b.units.data()[11 * 4], (11.1f32) as f64);

        assert!(ds.label(0, Target::Item(1), 0));
        assert!(!ds.label(0, Target::Item(2), 0));
        assert!(!ds.label(0, Target::Depression, 0));
        assert_eq!(ds.target_value(0, Target::AllItems, 0, true), 1.0);
    }

    #[test]
    fn drop_last_trims_one_segment() {
        let mut v = functionals("a", 12, 4);
        v.extend(functionals("b", 11, 4));
        let opts = DatasetOptions {
            drop_last: true,
            ..Default::default()
        };
        let ds = Dataset::from_functionals(&manifest(), &v, opts).unwrap();
        assert_eq!(ds.geometry(0, 10).unwrap().n_segments, 2);
        assert_eq!(ds.geometry(1, 10).unwrap().n_segments, 1);
    }

    #[test]
    fn functional_gaps_and_missing_recordings() {
        let mut v = functionals("a", 12, 4);
        assert!(Dataset::from_functionals(&manifest(), &v, DatasetOptions::default()).is_err());
        let mut b = functionals("b", 11, 4);
        b.remove(5);
        v.extend(b);
        assert!(matches!(
            Dataset::from_functionals(&manifest(), &v, DatasetOptions::default()),
            Err(Error::InvalidCsv(_))
        ));
    }
}
