//! Short-time power spectra, HTK mel filterbanks and log-mel spectrograms.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::corpus::SAMPLE_RATE_HZ;
use crate::error::{Error, Result};

pub const N_MELS: usize = 64;
pub const DEFAULT_LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowFunction {
    /// Periodic Hann, `0.5 - 0.5 cos(2πn/N)`.
    Hann,
    Rectangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub sample_rate_hz: u32,
    pub frame_length_ms: f64,
    pub hop_ms: f64,
    pub window: WindowFunction,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: SAMPLE_RATE_HZ,
            frame_length_ms: 20.0,
            hop_ms: 20.0,
            window: WindowFunction::Hann,
            fft_size: 512,
        }
    }
}

impl StftConfig {
    pub fn frame_len(&self) -> usize {
        (self.sample_rate_hz as f64 * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate_hz as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len() == 0 || self.hop_len() == 0 {
            return Err(Error::InvalidConfig(
                "frame and hop must span at least one sample".into(),
            ));
        }
        if self.fft_size < self.frame_len() {
            return Err(Error::InvalidConfig(format!(
                "fft_size {} shorter than frame of {} samples",
                self.fft_size,
                self.frame_len()
            )));
        }
        Ok(())
    }

    /// `floor((n - frame) / hop) + 1`, or 0 when shorter than one frame.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        let frame = self.frame_len();
        if n_samples < frame {
            0
        } else {
            (n_samples - frame) / self.hop_len() + 1
        }
    }

    fn window_coefficients(&self) -> Vec<f64> {
        let n = self.frame_len();
        match self.window {
            WindowFunction::Rectangular => vec![1.0; n],
            WindowFunction::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

/// Row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Frames the signal and returns `|DFT bin|²` for bins `0..=fft_size/2` (frames x bins).
pub fn stft_power(samples: &[f64], cfg: &StftConfig) -> Result<Matrix> {
    cfg.validate()?;
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
    stft_power_with(samples, cfg, &cfg.window_coefficients(), fft.as_ref())
}

fn stft_power_with(
    samples: &[f64],
    cfg: &StftConfig,
    window: &[f64],
    fft: &dyn Fft<f64>,
) -> Result<Matrix> {
    let frame = cfg.frame_len();
    let n_frames = cfg.n_frames(samples.len());
    if n_frames == 0 {
        return Err(Error::TooShort {
            needed_s: frame as f64 / cfg.sample_rate_hz as f64,
            actual_s: samples.len() as f64 / cfg.sample_rate_hz as f64,
        });
    }
    let bins = cfg.n_bins();
    let hop = cfg.hop_len();
    let mut data = Vec::with_capacity(n_frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for f in 0..n_frames {
        let chunk = &samples[f * hop..f * hop + frame];
        for (k, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(if k < frame { chunk[k] * window[k] } else { 0.0 }, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
    }
    Ok(Matrix {
        rows: n_frames,
        cols: bins,
        data,
    })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with peak 1 at centres uniformly spaced on the HTK mel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    /// Centre frequency of each filter.
    pub centers_hz: Vec<f64>,
    /// `n_mels x (fft_size/2 + 1)`
    pub weights: Matrix,
}

pub fn build_mel_filterbank(
    sample_rate: u32,
    fft_size: usize,
    n_mels: usize,
) -> Result<MelFilterbank> {
    if n_mels == 0 {
        return Err(Error::InvalidConfig("n_mels must be at least 1".into()));
    }
    if !fft_size.is_power_of_two() {
        return Err(Error::InvalidConfig(format!(
            "fft_size {fft_size} is not a power of two"
        )));
    }
    let f_min = 0.0;
    let f_max = sample_rate as f64 / 2.0;
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let mut edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    edges[0] = f_min;
    edges[n_mels + 1] = f_max;
    let bins = fft_size / 2 + 1;
    let bin_hz = sample_rate as f64 / fft_size as f64;
    let mut data = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            data[m * bins + k] = w;
        }
        if data[m * bins..(m + 1) * bins].iter().all(|&w| w == 0.0) {
            return Err(Error::DegenerateFilter { index: m });
        }
    }
    Ok(MelFilterbank {
        n_mels,
        f_min_hz: f_min,
        f_max_hz: f_max,
        centers_hz: edges[1..=n_mels].to_vec(),
        weights: Matrix {
            rows: n_mels,
            cols: bins,
            data,
        },
    })
}

/// `ln(max(power · bankᵀ, floor))`, frames x mels.
pub fn log_mel(power: &Matrix, bank: &MelFilterbank, floor: f64) -> Result<Matrix> {
    if power.cols != bank.weights.cols {
        return Err(Error::ShapeMismatch(format!(
            "power has {} bins, filterbank expects {}",
            power.cols, bank.weights.cols
        )));
    }
    let mut data = Vec::with_capacity(power.rows * bank.n_mels);
    for f in 0..power.rows {
        let p = power.row(f);
        for m in 0..bank.n_mels {
            let e: f64 = bank.weights.row(m).iter().zip(p).map(|(w, v)| w * v).sum();
            data.push(e.max(floor).ln());
        }
    }
    Ok(Matrix {
        rows: power.rows,
        cols: bank.n_mels,
        data,
    })
}

/// Log-mel values of one stretch of audio, frames x mels.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub recording_id: String,
    pub start_s: f64,
    pub n_frames: usize,
    pub n_mels: usize,
    pub values: Vec<f64>,
}

impl LogMelSpectrogram {
    /// Frames `[first, first + count)` as a new spectrogram.
    pub fn slice_frames(
        &self,
        first: usize,
        count: usize,
        start_s: f64,
    ) -> Result<LogMelSpectrogram> {
        if first + count > self.n_frames {
            return Err(Error::ShapeMismatch(format!(
                "frames {first}..{} of {}",
                first + count,
                self.n_frames
            )));
        }
        Ok(LogMelSpectrogram {
            recording_id: self.recording_id.clone(),
            start_s,
            n_frames: count,
            n_mels: self.n_mels,
            values: self.values[first * self.n_mels..(first + count) * self.n_mels].to_vec(),
        })
    }

    /// Rounds every value through `f32`, the cache precision.
    pub fn quantize_f32(&mut self) {
        self.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }

    /// Zero mean, unit variance over the whole matrix (no-op scaling when constant).
    pub fn standardize(&mut self) {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        let var = self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        self.values
            .iter_mut()
            .for_each(|v| *v = (*v - mean) * scale);
    }
}

/// Configured STFT + filterbank, built once and shared.
#[derive(Clone)]
pub struct FeatureExtractor {
    pub stft: StftConfig,
    pub bank: MelFilterbank,
    pub floor: f64,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("stft", &self.stft)
            .field("n_mels", &self.bank.n_mels)
            .field("floor", &self.floor)
            .finish()
    }
}

impl FeatureExtractor {
    pub fn new(stft: StftConfig, n_mels: usize) -> Result<Self> {
        stft.validate()?;
        let bank = build_mel_filterbank(stft.sample_rate_hz, stft.fft_size, n_mels)?;
        Ok(Self {
            window: stft.window_coefficients(),
            fft: FftPlanner::new().plan_fft_forward(stft.fft_size),
            stft,
            bank,
            floor: DEFAULT_LOG_FLOOR,
        })
    }

    /// 20 ms Hann frames, 20 ms hop, 512-point FFT, 64 mels.
    pub fn standard() -> Self {
        Self::new(StftConfig::default(), N_MELS).expect("default configuration is valid")
    }

    pub fn frames_per_second(&self) -> f64 {
        1000.0 / self.stft.hop_ms
    }

    pub fn extract(
        &self,
        samples: &[f64],
        recording_id: &str,
        start_s: f64,
    ) -> Result<LogMelSpectrogram> {
        let power = stft_power_with(samples, &self.stft, &self.window, self.fft.as_ref())?;
        let m = log_mel(&power, &self.bank, self.floor)?;
        Ok(LogMelSpectrogram {
            recording_id: recording_id.to_string(),
            start_s,
            n_frames: m.rows,
            n_mels: m.cols,
            values: m.data,
        })
    }
}

pub const CACHE_MAGIC: [u8; 4] = *b"IVMS";
pub const CACHE_VERSION: u32 = 1;

/// Spectrogram cache: `"IVMS"`, `u32` version, `u32` n_frames, `u32` n_mels,
/// `f64` start_s, then `n_frames * n_mels` `f32` values; all little-endian, frame-major.
pub fn write_cache(path: &Path, spec: &LogMelSpectrogram) -> Result<()> {
    let mut out = Vec::with_capacity(24 + spec.values.len() * 4);
    out.extend_from_slice(&CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.n_frames as u32).to_le_bytes());
    out.extend_from_slice(&(spec.n_mels as u32).to_le_bytes());
    out.extend_from_slice(&spec.start_s.to_le_bytes());
    for &v in &spec.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path, recording_id: &str) -> Result<LogMelSpectrogram> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if buf.len() < 24 || buf[..4] != CACHE_MAGIC {
        return Err(corrupt("not a spectrogram cache"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    if u32_at(4) != CACHE_VERSION {
        return Err(corrupt("unsupported cache version"));
    }
    let (n_frames, n_mels) = (u32_at(8) as usize, u32_at(12) as usize);
    let start_s = f64::from_le_bytes(buf[16..24].try_into().unwrap());
    if buf.len() != 24 + n_frames * n_mels * 4 {
        return Err(corrupt("payload length disagrees with header"));
    }
    let values = buf[24..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(LogMelSpectrogram {
        recording_id: recording_id.to_string(),
        start_s,
        n_frames,
        n_mels,
        values,
    })
}
