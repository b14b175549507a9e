//! Recordings, rating scales, manifests and imported functional features.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The only accepted audio sample rate.
pub const SAMPLE_RATE_HZ: u32 = 16_000;

/// Default eGeMAPS functional count.
pub const DEFAULT_FUNCTIONAL_DIM: usize = 88;

/// A mono recording with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub speaker_id: String,
    pub path: PathBuf,
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Recording {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn with_ids(mut self, id: impl Into<String>, speaker_id: impl Into<String>) -> Self {
        self.id = id.into();
        self.speaker_id = speaker_id.into();
        self
    }
}

fn hound_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        hound::Error::Unsupported => Error::UnsupportedFormat("unsupported WAVE encoding".into()),
        other => Error::CorruptFile {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

/// Reads a 16 kHz mono 16-bit PCM WAV file. Samples are `int16 / 32768`.
///
/// The recording id and speaker id both default to the file stem.
pub fn load_wav(path: &Path) -> Result<Recording> {
    let mut reader = hound::WavReader::open(path).map_err(|e| hound_error(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedFormat("sample_format=float".into()));
    }
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "channels={}",
            spec.channels
        )));
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "bits_per_sample={}",
            spec.bits_per_sample
        )));
    }
    if spec.sample_rate != SAMPLE_RATE_HZ {
        return Err(Error::UnsupportedFormat(format!(
            "sample_rate={}",
            spec.sample_rate
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| hound_error(path, e))?;
    if samples.is_empty() {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: "no audio samples".into(),
        });
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Recording {
        id: stem.clone(),
        speaker_id: stem,
        path: path.to_path_buf(),
        samples,
        sample_rate_hz: spec.sample_rate,
    })
}

/// Writes samples as 16 kHz mono PCM16, rounding `x * 32768` and clamping to the int16 range.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE_HZ,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| hound_error(path, e))?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| hound_error(path, e))?;
    }
    w.finalize().map_err(|e| hound_error(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleName {
    Madrs,
    Phq8,
}

impl std::str::FromStr for ScaleName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "madrs" => Ok(ScaleName::Madrs),
            "phq8" => Ok(ScaleName::Phq8),
            other => Err(Error::InvalidConfig(format!("unknown scale `{other}`"))),
        }
    }
}

/// A clinical rating scale. Item indices are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleDefinition {
    pub name: ScaleName,
    pub items: Vec<(usize, String)>,
    pub item_min: u8,
    pub item_max: u8,
    pub depression_threshold: u32,
}

const MADRS_ITEMS: [&str; 10] = [
    "Apparent sadness",
    "Reported sadness",
    "Inner tension",
    "Reduced sleep",
    "Reduced appetite",
    "Concentration difficulties",
    "Lassitude",
    "Inability to feel",
    "Pessimistic thoughts",
    "Suicidal thoughts",
];

const PHQ8_ITEMS: [&str; 8] = [
    "Little interest",
    "Feeling down",
    "Trouble sleeping",
    "Feeling tired",
    "Poor appetite",
    "Self-disappointment",
    "Concentration difficulties",
    "Restlessness",
];

impl ScaleDefinition {
    pub fn madrs() -> Self {
        Self::build(ScaleName::Madrs, &MADRS_ITEMS, 6)
    }

    pub fn phq8() -> Self {
        Self::build(ScaleName::Phq8, &PHQ8_ITEMS, 3)
    }

    fn build(name: ScaleName, items: &[&str], max: u8) -> Self {
        Self {
            name,
            items: items
                .iter()
                .enumerate()
                .map(|(i, n)| (i + 1, n.to_string()))
                .collect(),
            item_min: 0,
            item_max: max,
            depression_threshold: 10,
        }
    }

    pub fn from_name(name: ScaleName) -> Self {
        match name {
            ScaleName::Madrs => Self::madrs(),
            ScaleName::Phq8 => Self::phq8(),
        }
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn item_name(&self, index: usize) -> Option<&str> {
        self.items
            .iter()
            .find(|(i, _)| *i == index)
            .map(|(_, n)| n.as_str())
    }

    /// Table-style label, e.g. `(10) Suicidal thoughts`.
    pub fn item_label(&self, index: usize) -> String {
        format!("({index}) {}", self.item_name(index).unwrap_or("?"))
    }
}

/// One binarized item: present iff the raw score is positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemLabel {
    pub item_index: usize,
    pub raw_score: u8,
    pub present: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidManifest(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub recording_id: String,
    pub speaker_id: String,
    pub audio_path: PathBuf,
    pub split: Split,
    pub scores: Vec<u8>,
    pub total: Option<u32>,
}

impl ManifestRow {
    pub fn total_score(&self) -> u32 {
        self.total
            .unwrap_or_else(|| self.scores.iter().map(|&s| u32::from(s)).sum())
    }
}

/// A validated manifest. Relative audio paths resolve against `base_dir`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub scale: ScaleDefinition,
    pub base_dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

/// Absent/present counts for one item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Support {
    pub absent: usize,
    pub present: usize,
}

impl Manifest {
    pub fn rows_in(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn audio_path(&self, row: &ManifestRow) -> PathBuf {
        if row.audio_path.is_absolute() {
            row.audio_path.clone()
        } else {
            self.base_dir.join(&row.audio_path)
        }
    }

    /// Per-item supports on one split, in item order.
    pub fn supports(&self, split: Split) -> Vec<Support> {
        let mut out = vec![Support::default(); self.scale.n_items()];
        for row in self.rows_in(split) {
            for (s, &score) in out.iter_mut().zip(&row.scores) {
                if score > 0 {
                    s.present += 1;
                } else {
                    s.absent += 1;
                }
            }
        }
        out
    }

    pub fn header(scale: &ScaleDefinition, with_total: bool) -> Vec<String> {
        let mut h: Vec<String> = ["recording_id", "speaker_id", "path", "split"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((1..=scale.n_items()).map(|i| format!("item_{i}")));
        if with_total {
            h.push("total".into());
        }
        h
    }

    /// Serializes with a `total` column iff every row carries one.
    pub fn to_csv_string(&self) -> Result<String> {
        let with_total = !self.rows.is_empty() && self.rows.iter().all(|r| r.total.is_some());
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::header(&self.scale, with_total))?;
        for r in &self.rows {
            let mut rec = vec![
                r.recording_id.clone(),
                r.speaker_id.clone(),
                r.audio_path.to_string_lossy().into_owned(),
                r.split.to_string(),
            ];
            rec.extend(r.scores.iter().map(u8::to_string));
            if with_total {
                rec.push(r.total.unwrap().to_string());
            }
            w.write_record(rec)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidCsv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("CSV of UTF-8 fields"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?).map_err(|e| Error::io(path, e))
    }
}

/// Parses and validates a manifest file; relative audio paths resolve against its directory.
pub fn parse_manifest(path: &Path, scale: &ScaleDefinition) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest_str(&text, scale, &base)
}

pub fn parse_manifest_str(
    text: &str,
    scale: &ScaleDefinition,
    base_dir: &Path,
) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let required = |name: &str| {
        col(name).ok_or_else(|| Error::InvalidManifest(format!("missing column `{name}`")))
    };
    let id_col = required("recording_id")?;
    let spk_col = required("speaker_id")?;
    let path_col = required("path")?;
    let split_col = required("split")?;
    let item_cols: Vec<Option<usize>> = (1..=scale.n_items())
        .map(|i| col(&format!("item_{i}")))
        .collect();
    if let Some(extra) = header
        .iter()
        .filter_map(|h| h.strip_prefix("item_"))
        .filter_map(|n| n.parse::<usize>().ok())
        .find(|&n| n == 0 || n > scale.n_items())
    {
        return Err(Error::InvalidManifest(format!(
            "column item_{extra} does not belong to a {}-item scale",
            scale.n_items()
        )));
    }
    let total_col = col("total");

    let mut rows = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut speaker_split: HashMap<String, Split> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("").to_string();
        let recording_id = field(id_col);
        if recording_id.is_empty() {
            return Err(Error::InvalidManifest("empty recording_id".into()));
        }
        if !seen_ids.insert(recording_id.clone()) {
            return Err(Error::InvalidManifest(format!(
                "duplicate recording `{recording_id}`"
            )));
        }
        let speaker_id = field(spk_col);
        let split: Split = field(split_col).parse()?;
        match speaker_split.get(&speaker_id) {
            Some(&prev) if prev != split => {
                return Err(Error::SplitLeak {
                    speaker: speaker_id,
                    first: prev,
                    second: split,
                })
            }
            _ => {
                speaker_split.insert(speaker_id.clone(), split);
            }
        }
        let mut scores = Vec::with_capacity(scale.n_items());
        for (k, c) in item_cols.iter().enumerate() {
            let item = k + 1;
            let cell = c.map(&field).unwrap_or_default();
            if cell.is_empty() {
                return Err(Error::MissingScore {
                    recording: recording_id,
                    item,
                });
            }
            let score: i64 = cell.parse().map_err(|_| {
                Error::InvalidManifest(format!(
                    "recording `{recording_id}` item {item}: `{cell}` is not an integer"
                ))
            })?;
            if score < i64::from(scale.item_min) || score > i64::from(scale.item_max) {
                return Err(Error::ScoreOutOfRange {
                    recording: recording_id,
                    item,
                    score,
                    min: scale.item_min,
                    max: scale.item_max,
                });
            }
            scores.push(score as u8);
        }
        let computed: u32 = scores.iter().map(|&s| u32::from(s)).sum();
        let total = match total_col.map(&field).filter(|s| !s.is_empty()) {
            None => None,
            Some(cell) => {
                let stated: u32 = cell.parse().map_err(|_| {
                    Error::InvalidManifest(format!(
                        "recording `{recording_id}` total `{cell}` is not an integer"
                    ))
                })?;
                if stated != computed {
                    return Err(Error::TotalMismatch {
                        recording: recording_id,
                        stated,
                        computed,
                    });
                }
                Some(stated)
            }
        };
        rows.push(ManifestRow {
            recording_id,
            speaker_id,
            audio_path: PathBuf::from(field(path_col)),
            split,
            scores,
            total,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyManifest);
    }
    Ok(Manifest {
        scale: scale.clone(),
        base_dir: base_dir.to_path_buf(),
        rows,
    })
}

/// Binarized targets of one recording.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordingLabels {
    pub items: Vec<ItemLabel>,
    pub total: u32,
    pub depressed: bool,
}

impl RecordingLabels {
    pub fn item(&self, index: usize) -> Option<&ItemLabel> {
        self.items.iter().find(|l| l.item_index == index)
    }
}

/// `present = score > 0` per item; `depressed = total >= threshold`.
pub fn binarize_labels(manifest: &Manifest) -> BTreeMap<String, RecordingLabels> {
    manifest
        .rows
        .iter()
        .map(|row| {
            let items = row
                .scores
                .iter()
                .enumerate()
                .map(|(k, &s)| ItemLabel {
                    item_index: k + 1,
                    raw_score: s,
                    present: s > 0,
                })
                .collect();
            let total = row.total_score();
            (
                row.recording_id.clone(),
                RecordingLabels {
                    items,
                    total,
                    depressed: total >= manifest.scale.depression_threshold,
                },
            )
        })
        .collect()
}

/// Functionals of one analysis window of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalFeatureVector {
    pub recording_id: String,
    pub window_index: usize,
    pub values: Vec<f64>,
}

const ID_COLUMNS: [&str; 3] = ["recording_id", "name", "file"];
const WINDOW_COLUMNS: [&str; 1] = ["window_index"];
const TIME_COLUMNS: [&str; 2] = ["frameTime", "start_s"];

/// Imports functionals from CSV (`,` or `;`, detected from the header line).
///
/// Recognized metadata columns: one of `recording_id`/`name`/`file`, and optionally
/// `window_index` or a start time in seconds (`frameTime`/`start_s`, rounded to
/// the nearest whole second). All other columns are features. Without a window
/// column, windows are numbered in order of appearance per recording. The
/// result is grouped by recording id and ordered by window index.
pub fn import_functionals(
    path: &Path,
    expected_dim: usize,
) -> Result<Vec<FunctionalFeatureVector>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_functionals(&text, expected_dim)
}

pub fn parse_functionals(text: &str, expected_dim: usize) -> Result<Vec<FunctionalFeatureVector>> {
    let first_line = text.lines().next().unwrap_or("");
    let delimiter = if first_line.matches(';').count() > first_line.matches(',').count() {
        b';'
    } else {
        b','
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim_matches('\'').to_string())
        .collect();
    let find = |names: &[&str]| header.iter().position(|h| names.contains(&h.as_str()));
    let id_col = find(&ID_COLUMNS).ok_or_else(|| {
        Error::InvalidCsv("no recording id column (recording_id/name/file)".into())
    })?;
    let window_col = find(&WINDOW_COLUMNS);
    let time_col = if window_col.is_none() {
        find(&TIME_COLUMNS)
    } else {
        None
    };
    let feature_cols: Vec<usize> = (0..header.len())
        .filter(|&c| c != id_col && Some(c) != window_col && Some(c) != time_col)
        .collect();
    if feature_cols.len() != expected_dim {
        return Err(Error::DimensionMismatch {
            expected: expected_dim,
            found: feature_cols.len(),
        });
    }

    let mut by_recording: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let recording_id = record
            .get(id_col)
            .unwrap_or("")
            .trim_matches('\'')
            .to_string();
        let windows = by_recording.entry(recording_id.clone()).or_default();
        let window_index = if let Some(c) = window_col {
            let cell = record.get(c).unwrap_or("");
            cell.parse::<usize>()
                .map_err(|_| Error::InvalidCsv(format!("row {row}: window_index `{cell}`")))?
        } else if let Some(c) = time_col {
            let cell = record.get(c).unwrap_or("");
            let t: f64 = cell
                .parse()
                .map_err(|_| Error::InvalidCsv(format!("row {row}: start time `{cell}`")))?;
            if t.is_nan() || t < 0.0 {
                return Err(Error::InvalidCsv(format!(
                    "row {row}: negative start time {t}"
                )));
            }
            t.round() as usize
        } else {
            windows.len()
        };
        let mut values = Vec::with_capacity(expected_dim);
        for &c in &feature_cols {
            let cell = record.get(c).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| {
                Error::InvalidCsv(format!(
                    "row {row}, column `{}`: `{cell}` is not a number",
                    header[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    row,
                    column: header[c].clone(),
                });
            }
            values.push(v);
        }
        if windows.insert(window_index, values).is_some() {
            return Err(Error::InvalidCsv(format!(
                "row {row}: duplicate window {window_index} for `{recording_id}`"
            )));
        }
    }
    Ok(by_recording
        .into_iter()
        .flat_map(|(id, windows)| {
            windows
                .into_iter()
                .map(move |(w, values)| FunctionalFeatureVector {
                    recording_id: id.clone(),
                    window_index: w,
                    values,
                })
        })
        .collect())
}
