//! Log-mel spectrogram front end.
//!
//! A waveform is cut into overlapping frames (no centering, no reflect
//! padding, so the frame count is exactly
//! `1 + floor((n_samples - win_length) / hop_length)`), windowed,
//! zero-padded to `n_fft`, and transformed. Power spectra then pass
//! through a triangular mel filterbank and a natural log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::audio::AudioClip;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid frame config: {0}")]
    InvalidConfig(String),
    #[error("negative frequency {0} Hz has no mel value")]
    NegativeFrequency(f64),
    #[error("negative mel value {0} has no frequency")]
    NegativeMel(f64),
    #[error("clip of {samples} samples is shorter than one window ({win_length})")]
    ClipTooShort { samples: usize, win_length: usize },
    #[error("{n_mels} mel filters are too many for this resolution: filter {empty_row} covers no FFT bin")]
    TooManyMels { n_mels: usize, empty_row: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not an FMX1 feature file")]
    BadFeatureFile { path: PathBuf },
}

/// Window applied to each frame before the transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    /// Periodic Hann: `0.5 - 0.5 cos(2 pi n / win_length)`.
    Hann,
    Rectangular,
}

/// Framing and filterbank parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameConfig {
    pub win_length: usize,
    pub hop_length: usize,
    /// Power of two, at least `win_length`.
    pub n_fft: usize,
    pub window: WindowKind,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_epsilon: f64,
}

impl Default for FrameConfig {
    /// 25 ms windows with a 10 ms hop at 16 kHz, 64 mel bands over the
    /// full 0..8 kHz band.
    fn default() -> Self {
        Self {
            win_length: 400,
            hop_length: 160,
            n_fft: 512,
            window: WindowKind::Hann,
            n_mels: 64,
            f_min: 0.0,
            f_max: 8000.0,
            log_epsilon: 1e-10,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let err = |msg: String| Err(FeatureError::InvalidConfig(msg));
        if self.hop_length == 0 || self.hop_length > self.win_length {
            return err(format!(
                "need 0 < hop_length <= win_length, got hop {} win {}",
                self.hop_length, self.win_length
            ));
        }
        if self.n_fft < self.win_length || !self.n_fft.is_power_of_two() {
            return err(format!(
                "n_fft must be a power of two >= win_length, got {}",
                self.n_fft
            ));
        }
        if self.n_mels == 0 {
            return err("n_mels must be >= 1".into());
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max) {
            return err(format!(
                "need 0 <= f_min < f_max, got [{}, {}]",
                self.f_min, self.f_max
            ));
        }
        if !(self.log_epsilon > 0.0) {
            return err(format!("log_epsilon must be > 0, got {}", self.log_epsilon));
        }
        Ok(())
    }

    /// Number of one-sided spectrum bins, `n_fft / 2 + 1`.
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced for a clip of `n_samples`, or None if the clip is
    /// shorter than one window.
    pub fn n_frames(&self, n_samples: usize) -> Option<usize> {
        if n_samples < self.win_length {
            None
        } else {
            Some(1 + (n_samples - self.win_length) / self.hop_length)
        }
    }

    fn window_values(&self) -> Array1<f64> {
        match self.window {
            WindowKind::Rectangular => Array1::ones(self.win_length),
            WindowKind::Hann => Array1::from_shape_fn(self.win_length, |n| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / self.win_length as f64).cos()
            }),
        }
    }
}

/// `mel = 2595 * log10(1 + f / 700)`.
pub fn hz_to_mel(f: f64) -> Result<f64, FeatureError> {
    if f < 0.0 {
        return Err(FeatureError::NegativeFrequency(f));
    }
    Ok(2595.0 * (1.0 + f / 700.0).log10())
}

/// Exact inverse of [`hz_to_mel`].
pub fn mel_to_hz(mel: f64) -> Result<f64, FeatureError> {
    if mel < 0.0 {
        return Err(FeatureError::NegativeMel(mel));
    }
    Ok(700.0 * (10.0f64.powf(mel / 2595.0) - 1.0))
}

/// Triangular mel filters, `n_mels x (n_fft/2 + 1)`, each peaking at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub weights: Array2<f64>,
}

/// A log-mel spectrogram (`n_mels x n_frames`) plus the config that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub meta: FrameConfig,
}

impl FeatureMatrix {
    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }
}

/// Magnitude (not power) of the one-sided DFT per frame:
/// `(n_fft/2 + 1) x n_frames`. Frame `t` covers samples
/// `[t * hop, t * hop + win)`.
pub fn stft_magnitude(clip: &AudioClip, cfg: &FrameConfig) -> Result<Array2<f64>, FeatureError> {
    cfg.validate()?;
    let samples = clip.samples();
    let n_frames = cfg
        .n_frames(samples.len())
        .ok_or(FeatureError::ClipTooShort {
            samples: samples.len(),
            win_length: cfg.win_length,
        })?;

    let window = cfg.window_values();
    let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.n_fft];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    let mut out = Array2::zeros((cfg.n_bins(), n_frames));
    for t in 0..n_frames {
        let start = t * cfg.hop_length;
        for n in 0..cfg.n_fft {
            let v = if n < cfg.win_length {
                samples[start + n] * window[n]
            } else {
                0.0
            };
            buf[n] = Complex64::new(v, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..cfg.n_bins() {
            out[(k, t)] = buf[k].norm();
        }
    }
    Ok(out)
}

/// Builds the triangular filterbank for `cfg` at a given sample rate.
///
/// Filter centers are equally spaced on the mel axis between
/// `hz_to_mel(f_min)` and `hz_to_mel(f_max)`; filter `m` rises from
/// center `m-1` to center `m` and falls to center `m+1`. A filter whose
/// support captures no FFT bin is an error (too many mels for the
/// spectral resolution).
pub fn mel_filterbank(cfg: &FrameConfig, sample_rate: u32) -> Result<FilterBank, FeatureError> {
    cfg.validate()?;
    let nyquist = sample_rate as f64 / 2.0;
    if cfg.f_max > nyquist {
        return Err(FeatureError::InvalidConfig(format!(
            "f_max {} exceeds the Nyquist frequency {nyquist}",
            cfg.f_max
        )));
    }

    let mel_lo = hz_to_mel(cfg.f_min)?;
    let mel_hi = hz_to_mel(cfg.f_max)?;
    let n_points = cfg.n_mels + 2;
    let edges: Vec<f64> = (0..n_points)
        .map(|i| {
            // pin the ends so the band edges are exact, not round-tripped
            if i == 0 {
                cfg.f_min
            } else if i == n_points - 1 {
                cfg.f_max
            } else {
                let mel = mel_lo + (mel_hi - mel_lo) * i as f64 / (n_points - 1) as f64;
                mel_to_hz(mel).expect("mel points are non-negative")
            }
        })
        .collect();

    let n_bins = cfg.n_bins();
    let bin_hz = sample_rate as f64 / cfg.n_fft as f64;
    let mut weights = Array2::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut any = false;
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let rise = (f - lo) / (center - lo);
            let fall = (hi - f) / (hi - center);
            let w = rise.min(fall).max(0.0);
            if w > 0.0 {
                weights[(m, k)] = w;
                any = true;
            }
        }
        if !any {
            return Err(FeatureError::TooManyMels {
                n_mels: cfg.n_mels,
                empty_row: m,
            });
        }
    }
    Ok(FilterBank { weights })
}

/// `ln(filterbank . magnitude^2 + log_epsilon)` for every mel band and
/// frame. Builds the filterbank for the clip's sample rate; use
/// [`log_mel_with_bank`] to reuse a cached one.
pub fn log_mel(clip: &AudioClip, cfg: &FrameConfig) -> Result<FeatureMatrix, FeatureError> {
    let bank = mel_filterbank(cfg, clip.sample_rate())?;
    log_mel_with_bank(clip, cfg, &bank)
}

/// [`log_mel`] against a prebuilt filterbank.
pub fn log_mel_with_bank(
    clip: &AudioClip,
    cfg: &FrameConfig,
    bank: &FilterBank,
) -> Result<FeatureMatrix, FeatureError> {
    let magnitude = stft_magnitude(clip, cfg)?;
    let power = magnitude.mapv(|v| v * v);
    let mut values = bank.weights.dot(&power);
    values.mapv_inplace(|v| (v + cfg.log_epsilon).ln());
    Ok(FeatureMatrix {
        values,
        meta: cfg.clone(),
    })
}

/// Shifts and scales each mel row to mean 0 and population std 1. Rows
/// with std below 1e-8 are only shifted, so constant rows come out as
/// zeros. Idempotent.
pub fn normalize(features: &FeatureMatrix) -> FeatureMatrix {
    let mut values = features.values.clone();
    let n = values.ncols() as f64;
    for mut row in values.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < 1e-8 {
            row.mapv_inplace(|v| v - mean);
        } else {
            row.mapv_inplace(|v| (v - mean) / std);
        }
    }
    FeatureMatrix {
        values,
        meta: features.meta.clone(),
    }
}

const FMX_MAGIC: &[u8; 4] = b"FMX1";

/// Writes features in the flat FMX1 format: magic, u32 `n_mels`, u32
/// `n_frames` (little-endian), then row-major 32-bit floats. Bit-exact
/// across runs for the same input.
pub fn write_fmx(features: &FeatureMatrix, path: &Path) -> Result<(), FeatureError> {
    let io_err = |source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::with_capacity(12 + features.values.len() * 4);
    out.extend_from_slice(FMX_MAGIC);
    out.extend_from_slice(&(features.n_mels() as u32).to_le_bytes());
    out.extend_from_slice(&(features.n_frames() as u32).to_le_bytes());
    for row in features.values.rows() {
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&out).map_err(io_err)
}

/// Reads an FMX1 file back as an `n_mels x n_frames` matrix.
pub fn read_fmx(path: &Path) -> Result<Array2<f64>, FeatureError> {
    let bytes = fs::read(path).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = || FeatureError::BadFeatureFile {
        path: path.to_path_buf(),
    };
    if bytes.len() < 12 || &bytes[0..4] != FMX_MAGIC {
        return Err(bad());
    }
    let n_mels = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n_frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + n_mels * n_frames * 4;
    if bytes.len() != expected {
        return Err(bad());
    }
    let data: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((n_mels, n_frames), data).expect("length checked above"))
}
