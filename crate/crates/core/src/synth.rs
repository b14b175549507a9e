//! Synthetic two-class corpus: harmonic tones at 110 Hz with 7 Hz amplitude
//! modulation (depressed, every item present) versus 220 Hz with 3 Hz modulation
//! (every item absent), speaker-disjoint train/val/test splits.

use std::path::{Path, PathBuf};

use itemvoice_tensor::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_wav, Manifest, ManifestRow, ScaleDefinition, Split, SAMPLE_RATE_HZ};
use crate::dsp::FeatureExtractor;
use crate::error::{Error, Result};
use crate::segment::RecordingFeatures;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub recordings_per_speaker: usize,
    pub duration_s: f64,
    pub seed: u64,
    /// Speakers per split, in train/val/test order; the rest of `n_speakers` is unused.
    pub speakers_per_split: [usize; 3],
    pub noise_level: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            recordings_per_speaker: 2,
            duration_s: 20.0,
            seed: 7,
            speakers_per_split: [12, 4, 4],
            noise_level: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub functionals_path: PathBuf,
    /// Per recording, the generating class (`true` = low pitch).
    pub classes: Vec<(String, bool)>,
}

pub const FUNCTIONAL_COLUMNS: usize = 88;

fn tone(duration_s: f64, f0: f64, am_hz: f64, noise: f64, rng: &mut Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE_HZ as f64;
    let n = (duration_s * sr).round() as usize;
    let phase: Vec<f64> = (0..6)
        .map(|_| rng.uniform_range(0.0, std::f64::consts::TAU))
        .collect();
    let am_phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let norm: f64 = (1..=6).map(|k| 1.0 / k as f64).sum();
    (0..n)
        .map(|t| {
            let time = t as f64 / sr;
            let harmonics: f64 = (1..=6)
                .map(|k| {
                    (std::f64::consts::TAU * f0 * k as f64 * time + phase[k - 1]).sin() / k as f64
                })
                .sum::<f64>()
                / norm;
            let env = 0.75 + 0.25 * (std::f64::consts::TAU * am_hz * time + am_phase).sin();
            (0.5 * env * harmonics + noise * rng.normal()).clamp(-1.0, 1.0)
        })
        .collect()
}

/// 64 mel-band means followed by 24 mel-band standard deviations per 4 s window.
pub fn window_functionals(values: &[f64], n_mels: usize) -> Vec<f64> {
    let frames = values.len() / n_mels;
    let mut out = Vec::with_capacity(FUNCTIONAL_COLUMNS);
    let col = |m: usize| (0..frames).map(move |f| values[f * n_mels + m]);
    let means: Vec<f64> = (0..n_mels)
        .map(|m| col(m).sum::<f64>() / frames as f64)
        .collect();
    out.extend_from_slice(&means);
    for (m, &mean) in means.iter().enumerate().take(FUNCTIONAL_COLUMNS - n_mels) {
        out.push((col(m).map(|v| (v - mean).powi(2)).sum::<f64>() / frames as f64).sqrt());
    }
    out
}

/// Writes `audio/*.wav`, `manifest.csv` and `functionals.csv` under `out_dir`.
pub fn generate(out_dir: &Path, scale: &ScaleDefinition, cfg: &SynthConfig) -> Result<SynthCorpus> {
    let needed: usize = cfg.speakers_per_split.iter().sum();
    if needed > cfg.n_speakers
        || cfg.speakers_per_split.iter().any(|&n| n < 2)
        || cfg.recordings_per_speaker == 0
    {
        return Err(Error::InvalidConfig(format!(
            "{} speakers cannot fill splits {:?} with both classes",
            cfg.n_speakers, cfg.speakers_per_split
        )));
    }
    let audio_dir = out_dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let ex = FeatureExtractor::standard();
    let mut rng = Rng::seed_from(cfg.seed);
    let n_items = scale.n_items();
    // Smallest per-item score that still puts every low-pitch recording over the threshold.
    let lo = (scale.depression_threshold as usize)
        .div_ceil(n_items)
        .max(1) as u8;
    let hi = lo.max(scale.item_max.min(3));

    let mut rows = Vec::new();
    let mut classes = Vec::new();
    let mut functionals = String::from("name;frameTime");
    for c in 0..FUNCTIONAL_COLUMNS {
        functionals.push_str(&format!(";F{c}"));
    }
    functionals.push('\n');

    let mut speaker = 0;
    for (split, &count) in Split::ALL.iter().zip(&cfg.speakers_per_split) {
        for s in 0..count {
            let low = s % 2 == 0;
            let speaker_id = format!("spk{speaker:02}");
            let jitter = rng.uniform_range(0.95, 1.05);
            for r in 0..cfg.recordings_per_speaker {
                let id = format!("{speaker_id}_r{r}");
                let (f0, am) = if low { (110.0, 7.0) } else { (220.0, 3.0) };
                let samples = tone(cfg.duration_s, f0 * jitter, am, cfg.noise_level, &mut rng);
                let file = PathBuf::from("audio").join(format!("{id}.wav"));
                write_wav(&out_dir.join(&file), &samples)?;
                let scores: Vec<u8> = (0..n_items)
                    .map(|_| {
                        if low {
                            lo + rng.below(usize::from(hi - lo) + 1) as u8
                        } else {
                            0
                        }
                    })
                    .collect();
                let total = scores.iter().map(|&v| u32::from(v)).sum();
                rows.push(ManifestRow {
                    recording_id: id.clone(),
                    speaker_id: speaker_id.clone(),
                    audio_path: file,
                    split: *split,
                    scores,
                    total: Some(total),
                });
                classes.push((id.clone(), low));

                // Functionals from the PCM16-rounded audio, as a reader of the WAV would see it.
                let pcm: Vec<f64> = samples
                    .iter()
                    .map(|v| (v * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0)
                    .collect();
                let rec = crate::corpus::Recording {
                    id: id.clone(),
                    speaker_id: speaker_id.clone(),
                    path: out_dir.join("audio").join(format!("{id}.wav")),
                    samples: pcm,
                    sample_rate_hz: SAMPLE_RATE_HZ,
                };
                let feats = RecordingFeatures::extract(&rec, &ex)?;
                for k in 0..feats.n_windows() {
                    let w = feats.window(k)?;
                    functionals.push_str(&format!("{id};{k}.000000"));
                    for v in window_functionals(&w.values, w.n_mels) {
                        functionals.push_str(&format!(";{}", v as f32));
                    }
                    functionals.push('\n');
                }
            }
            speaker += 1;
        }
    }

    let manifest = Manifest {
        scale: scale.clone(),
        base_dir: out_dir.to_path_buf(),
        rows,
    };
    let manifest_path = out_dir.join("manifest.csv");
    manifest.write(&manifest_path)?;
    let functionals_path = out_dir.join("functionals.csv");
    std::fs::write(&functionals_path, functionals).map_err(|e| Error::io(&functionals_path, e))?;
    Ok(SynthCorpus {
        manifest,
        manifest_path,
        functionals_path,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{binarize_labels, import_functionals, parse_manifest};

    #[test]
    fn small_corpus_is_valid_and_balanced() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_speakers: 6,
            recordings_per_speaker: 1,
            duration_s: 5.0,
            speakers_per_split: [2, 2, 2],
            ..Default::default()
        };
        let scale = ScaleDefinition::madrs();
        let c = generate(dir.path(), &scale, &cfg).unwrap();
        let m = parse_manifest(&c.manifest_path, &scale).unwrap();
        assert_eq!(m, c.manifest);
        let labels = binarize_labels(&m);
        for (id, low) in &c.classes {
            let l = &labels[id];
            assert_eq!(l.depressed, *low);
            assert!(l.items.iter().all(|i| i.present == *low));
        }
        for split in Split::ALL {
            assert_eq!(m.supports(split)[0].present, 1);
        }
        let f = import_functionals(&c.functionals_path, FUNCTIONAL_COLUMNS).unwrap();
        assert_eq!(f.len(), 6 * 2);
        assert_eq!(f[1].window_index, 1);
        let rec = crate::corpus::load_wav(&dir.path().join("audio/spk00_r0.wav")).unwrap();
        assert_eq!(rec.samples.len(), 80_000);
    }
}
