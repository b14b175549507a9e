//! Windowing of recordings into 4 s spectrograms and 13 s spectrogram sequences.

use serde::{Deserialize, Serialize};

use crate::corpus::Recording;
use crate::dsp::{FeatureExtractor, LogMelSpectrogram};
use crate::error::{Error, Result};

pub const WINDOW_S: f64 = 4.0;
pub const HOP_S: f64 = 1.0;
pub const SEQUENCE_LEN: usize = 10;
/// `WINDOW_S + (SEQUENCE_LEN - 1) * HOP_S`
pub const SEGMENT_SPAN_S: f64 = 13.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub recording_duration_s: f64,
    pub segment_span_s: f64,
    pub hop_s: f64,
    pub n_segments: usize,
    pub drop_last: bool,
}

impl GridGeometry {
    pub fn segment_start_s(&self, index: usize) -> f64 {
        index as f64 * self.hop_s
    }
}

/// Number of `span_s` windows at a 1 s hop that fit in `duration_s`, minus one when `drop_last`.
fn window_count(duration_s: f64, span_s: f64, drop_last: bool) -> Result<usize> {
    let needed_s = span_s + if drop_last { HOP_S } else { 0.0 };
    // Tolerate sample-count rounding in durations derived from audio lengths.
    let slack = duration_s - span_s + 1e-9;
    if !duration_s.is_finite() || duration_s + 1e-9 < needed_s {
        return Err(Error::TooShort {
            needed_s,
            actual_s: duration_s,
        });
    }
    let n = (slack / HOP_S).floor() as usize + 1;
    Ok(if drop_last { n - 1 } else { n })
}

/// Voting grid geometry for 13 s segments at a 1 s hop.
pub fn grid_geometry(duration_s: f64, drop_last: bool) -> Result<GridGeometry> {
    geometry_with_span(duration_s, SEGMENT_SPAN_S, drop_last)
}

/// Grid geometry for an arbitrary window span at a 1 s hop.
pub fn geometry_with_span(duration_s: f64, span_s: f64, drop_last: bool) -> Result<GridGeometry> {
    Ok(GridGeometry {
        recording_duration_s: duration_s,
        segment_span_s: span_s,
        hop_s: HOP_S,
        n_segments: window_count(duration_s, span_s, drop_last)?,
        drop_last,
    })
}

/// One CNN-LSTM sample: ten 4 s spectrograms starting one second apart.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSequence {
    pub recording_id: String,
    pub segment_index: usize,
    pub start_s: f64,
    pub spectrograms: Vec<LogMelSpectrogram>,
}

impl SegmentSequence {
    pub fn span_s(&self) -> f64 {
        SEGMENT_SPAN_S
    }
}

fn samples_per_second(rec: &Recording) -> usize {
    rec.sample_rate_hz as usize
}

/// One spectrogram per 4 s window, windows starting at 0, 1, 2, ... s.
/// Each window is analysed on its own.
pub fn make_cnn_samples(rec: &Recording, ex: &FeatureExtractor) -> Result<Vec<LogMelSpectrogram>> {
    let n = window_count(rec.duration_s(), WINDOW_S, false)?;
    let sps = samples_per_second(rec);
    let len = WINDOW_S as usize * sps;
    (0..n)
        .map(|k| ex.extract(&rec.samples[k * sps..k * sps + len], &rec.id, k as f64))
        .collect()
}

/// Log-mel frames of a whole recording, sliceable into 4 s windows.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingFeatures {
    pub spectrogram: LogMelSpectrogram,
    pub frames_per_second: usize,
    pub frames_per_window: usize,
    pub duration_s: f64,
}

impl RecordingFeatures {
    pub fn extract(rec: &Recording, ex: &FeatureExtractor) -> Result<Self> {
        let spectrogram = ex.extract(&rec.samples, &rec.id, 0.0)?;
        Self::from_spectrogram(spectrogram, ex, rec.duration_s())
    }

    /// Wraps a whole-recording spectrogram (e.g. read back from a cache).
    pub fn from_spectrogram(
        spectrogram: LogMelSpectrogram,
        ex: &FeatureExtractor,
        duration_s: f64,
    ) -> Result<Self> {
        let fps = ex.frames_per_second();
        if fps.fract() != 0.0 || ex.stft.hop_ms != ex.stft.frame_length_ms {
            return Err(Error::InvalidConfig(
                "window slicing needs non-overlapping frames and a whole number of frames per second".into(),
            ));
        }
        let fps = fps as usize;
        Ok(Self {
            spectrogram,
            frames_per_second: fps,
            frames_per_window: WINDOW_S as usize * fps,
            duration_s,
        })
    }

    pub fn n_windows(&self) -> usize {
        let full = self
            .spectrogram
            .n_frames
            .saturating_sub(self.frames_per_window);
        if self.spectrogram.n_frames < self.frames_per_window {
            0
        } else {
            full / self.frames_per_second + 1
        }
    }

    /// The 4 s window starting at `k` seconds.
    pub fn window(&self, k: usize) -> Result<LogMelSpectrogram> {
        self.spectrogram
            .slice_frames(k * self.frames_per_second, self.frames_per_window, k as f64)
    }

    pub fn windows(&self) -> Result<Vec<LogMelSpectrogram>> {
        (0..self.n_windows()).map(|k| self.window(k)).collect()
    }
}

/// 13 s sequences starting at 0, 1, 2, ... s; count per [`grid_geometry`].
pub fn make_sequences(
    rec: &Recording,
    ex: &FeatureExtractor,
    drop_last: bool,
) -> Result<Vec<SegmentSequence>> {
    let geom = grid_geometry(rec.duration_s(), drop_last)?;
    let feats = RecordingFeatures::extract(rec, ex)?;
    (0..geom.n_segments)
        .map(|j| {
            Ok(SegmentSequence {
                recording_id: rec.id.clone(),
                segment_index: j,
                start_s: geom.segment_start_s(j),
                spectrograms: (j..j + SEQUENCE_LEN)
                    .map(|k| feats.window(k))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}
