//! Waveform I/O and synthesis.
//!
//! The WAV surface is deliberately narrow: RIFF/WAVE, PCM 16-bit
//! little-endian, mono, canonical 44-byte header. Anything else is
//! rejected rather than converted, so files written here are bit-exact
//! and fully round-trippable.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{save_manifest, DatasetError, Gender, ManifestEntry};

/// Canonical sample rate of the pipeline, in Hz.
pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a RIFF/WAVE file")]
    NotWave { path: PathBuf },
    #[error("{path}: unsupported WAV format: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },
    #[error("{path}: truncated data chunk (header claims {expected} bytes, file holds {found})")]
    TruncatedData {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: empty audio")]
    EmptyAudio { path: PathBuf },
    #[error("invalid audio clip: {0}")]
    InvalidClip(String),
    #[error("invalid synthesis spec: {0}")]
    InvalidSynthSpec(String),
    #[error(transparent)]
    Manifest(#[from] DatasetError),
}

/// A mono waveform: samples in `[-1, 1]` plus a sample rate in Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    /// Builds a clip, enforcing that every sample is finite and in
    /// `[-1, 1]` and that the rate is positive.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidClip("sample_rate must be > 0".into()));
        }
        for (i, &s) in samples.iter().enumerate() {
            if !s.is_finite() || !(-1.0..=1.0).contains(&s) {
                return Err(AudioError::InvalidClip(format!(
                    "sample {i} = {s} is outside [-1, 1]"
                )));
            }
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn read_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

fn read_u16(buf: &[u8], at: usize) -> u16 {
    u16::from_le_bytes(buf[at..at + 2].try_into().unwrap())
}

/// Loads a PCM 16-bit mono WAV file.
///
/// Samples are the stored integers divided by 32768, so the decoded
/// values always lie in `[-1, 1)` except for -32768 which maps to -1.
pub fn load_wav(path: &Path) -> Result<AudioClip, AudioError> {
    let bytes = fs::read(path).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotWave {
            path: path.to_path_buf(),
        });
    }

    let unsupported = |reason: String| AudioError::UnsupportedFormat {
        path: path.to_path_buf(),
        reason,
    };

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<(usize, usize)> = None; // (offset, claimed length)
    let mut at = 12;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = read_u32(&bytes, at + 4) as usize;
        let body = at + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(unsupported("fmt chunk too short".into()));
                }
                fmt = Some((
                    read_u16(&bytes, body),
                    read_u16(&bytes, body + 2),
                    read_u32(&bytes, body + 4),
                    read_u16(&bytes, body + 14),
                ));
            }
            b"data" => {
                data = Some((body, size));
            }
            _ => {}
        }
        // Chunks are word-aligned; odd sizes carry a pad byte.
        at = body + size + (size & 1);
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| unsupported("missing fmt chunk".into()))?;
    if format != 1 {
        return Err(unsupported(format!("audio format {format}, want PCM (1)")));
    }
    if channels != 1 {
        return Err(unsupported(format!("{channels} channels, want mono")));
    }
    if bits != 16 {
        return Err(unsupported(format!("{bits} bits per sample, want 16")));
    }
    if rate == 0 {
        return Err(unsupported("sample rate 0".into()));
    }

    let (offset, claimed) = data.ok_or_else(|| unsupported("missing data chunk".into()))?;
    let available = bytes.len().saturating_sub(offset);
    if claimed > available {
        return Err(AudioError::TruncatedData {
            path: path.to_path_buf(),
            expected: claimed,
            found: available,
        });
    }
    if claimed == 0 {
        return Err(AudioError::EmptyAudio {
            path: path.to_path_buf(),
        });
    }
    if claimed % 2 != 0 {
        return Err(unsupported("data chunk has odd byte length".into()));
    }

    let samples = bytes[offset..offset + claimed]
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: rate,
    })
}

/// Writes a clip as PCM 16-bit mono with the canonical 44-byte header.
///
/// Samples are clamped to `[-1, 1]`, scaled by 32768, rounded to
/// nearest, and clamped to the i16 range, which keeps the decode error
/// of a round trip within 1/32768 per sample.
pub fn save_wav(clip: &AudioClip, path: &Path) -> Result<(), AudioError> {
    let n = clip.samples.len();
    let data_size = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round();
        let q = v.clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }

    let mut file = fs::File::create(path).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(&out).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Resamples by linear interpolation. The output length is
/// `round(len * target / source)`; matching rates return the clip as is.
pub fn resample_linear(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::InvalidClip("target_rate must be > 0".into()));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let src = &clip.samples;
    let out_len =
        (src.len() as f64 * target_rate as f64 / clip.sample_rate as f64).round() as usize;
    let step = clip.sample_rate as f64 / target_rate as f64;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * step;
        let lo = (pos.floor() as usize).min(src.len() - 1);
        let hi = (lo + 1).min(src.len() - 1);
        let frac = pos - lo as f64;
        out.push(src[lo] * (1.0 - frac) + src[hi] * frac);
    }
    Ok(AudioClip {
        samples: out,
        sample_rate: target_rate,
    })
}

/// A pure tone assigned to one vocabulary token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToneSpec {
    pub freq_hz: f64,
    pub duration_s: f64,
}

/// Recipe for a synthetic tone-sequence dataset.
///
/// Each utterance is a random sequence of vocabulary tokens rendered as
/// sine tones separated by silence, with uniform noise on top. Speakers
/// differ by a small fundamental-frequency offset so that
/// speaker-disjoint splits are meaningful.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_utterances: usize,
    /// Inclusive range of tokens per utterance.
    pub tokens_per_utterance: (usize, usize),
    pub vocabulary: Vec<String>,
    pub tone_map: BTreeMap<String, ToneSpec>,
    pub noise_amplitude: f64,
    pub seed: u64,
    pub n_speakers: usize,
    pub sample_rate: u32,
}

/// Minimum spacing between distinct token frequencies: two FFT bins at
/// the default frame configuration (n_fft 512 at 16 kHz).
pub const MIN_TONE_SPACING_HZ: f64 = 2.0 * CANONICAL_SAMPLE_RATE as f64 / 512.0;

/// Per-speaker shift of every tone frequency, in Hz.
const SPEAKER_FREQ_OFFSET_HZ: f64 = 3.0;

const TONE_AMPLITUDE: f64 = 0.35;
const GAP_S: f64 = 0.06;
const EDGE_SILENCE_S: f64 = 0.05;

impl Default for SynthSpec {
    fn default() -> Self {
        let letters = ["a", "b", "c", "d", "e"];
        let mut tone_map = BTreeMap::new();
        for (i, letter) in letters.iter().enumerate() {
            tone_map.insert(
                letter.to_string(),
                ToneSpec {
                    freq_hz: 400.0 + 120.0 * i as f64,
                    duration_s: 0.12,
                },
            );
        }
        Self {
            n_utterances: 20,
            tokens_per_utterance: (2, 4),
            vocabulary: letters.iter().map(|s| s.to_string()).collect(),
            tone_map,
            noise_amplitude: 0.01,
            seed: 0,
            n_speakers: 4,
            sample_rate: CANONICAL_SAMPLE_RATE,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<(), AudioError> {
        let err = |msg: String| Err(AudioError::InvalidSynthSpec(msg));
        if self.vocabulary.is_empty() {
            return err("vocabulary is empty".into());
        }
        if self.n_speakers == 0 {
            return err("n_speakers must be > 0".into());
        }
        if self.sample_rate == 0 {
            return err("sample_rate must be > 0".into());
        }
        if self.tokens_per_utterance.0 > self.tokens_per_utterance.1
            || self.tokens_per_utterance.0 == 0
        {
            return err(format!(
                "bad tokens_per_utterance range {:?}",
                self.tokens_per_utterance
            ));
        }
        if !(self.noise_amplitude >= 0.0) {
            return err("noise_amplitude must be >= 0".into());
        }
        for tok in &self.vocabulary {
            match self.tone_map.get(tok) {
                None => return err(format!("token {tok:?} has no tone_map entry")),
                Some(t) if t.freq_hz <= 0.0 || t.duration_s <= 0.0 => {
                    return err(format!("token {tok:?} has non-positive tone parameters"))
                }
                _ => {}
            }
        }
        let mut freqs: Vec<(f64, &String)> = self
            .vocabulary
            .iter()
            .map(|t| (self.tone_map[t].freq_hz, t))
            .collect();
        freqs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for pair in freqs.windows(2) {
            if pair[1].0 - pair[0].0 < MIN_TONE_SPACING_HZ {
                return err(format!(
                    "tones for {:?} and {:?} are {:.1} Hz apart, need at least {MIN_TONE_SPACING_HZ} Hz",
                    pair[0].1, pair[1].1, pair[1].0 - pair[0].0
                ));
            }
        }
        Ok(())
    }

    fn speaker_id(idx: usize) -> String {
        format!("spk{idx:02}")
    }

    fn speaker_gender(idx: usize) -> Gender {
        if idx % 2 == 0 {
            Gender::M
        } else {
            Gender::F
        }
    }
}

/// Renders one utterance: tones with silent gaps, plus uniform noise.
fn render_utterance(
    spec: &SynthSpec,
    tokens: &[String],
    speaker_idx: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let rate = spec.sample_rate as f64;
    let offset = speaker_idx as f64 * SPEAKER_FREQ_OFFSET_HZ;
    let edge = (EDGE_SILENCE_S * rate).round() as usize;
    let gap = (GAP_S * rate).round() as usize;

    let mut samples = vec![0.0f64; edge];
    for (i, tok) in tokens.iter().enumerate() {
        if i > 0 {
            samples.extend(std::iter::repeat_n(0.0, gap));
        }
        let tone = spec.tone_map[tok];
        let n = (tone.duration_s * rate).round() as usize;
        let freq = tone.freq_hz + offset;
        for t in 0..n {
            samples.push(TONE_AMPLITUDE * (2.0 * std::f64::consts::PI * freq * t as f64 / rate).sin());
        }
    }
    samples.extend(std::iter::repeat_n(0.0, edge));

    if spec.noise_amplitude > 0.0 {
        for s in &mut samples {
            *s += rng.random_range(-spec.noise_amplitude..=spec.noise_amplitude);
        }
    }
    for s in &mut samples {
        *s = s.clamp(-1.0, 1.0);
    }
    samples
}

/// Generates the dataset under `out_dir`: one WAV per utterance plus a
/// `manifest.jsonl`. Deterministic for a fixed spec: repeated calls are
/// byte-identical. Speaker ids rotate round-robin over `n_speakers`.
pub fn synth_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<ManifestEntry>, AudioError> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|source| AudioError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entries = Vec::with_capacity(spec.n_utterances);
    for u in 0..spec.n_utterances {
        let speaker_idx = u % spec.n_speakers;
        let n_tokens = rng.random_range(spec.tokens_per_utterance.0..=spec.tokens_per_utterance.1);
        let tokens: Vec<String> = (0..n_tokens)
            .map(|_| spec.vocabulary.choose(&mut rng).unwrap().clone())
            .collect();
        let samples = render_utterance(spec, &tokens, speaker_idx, &mut rng);
        let clip = AudioClip::new(samples, spec.sample_rate)?;

        let filename = format!("utt_{u:05}.wav");
        save_wav(&clip, &out_dir.join(&filename))?;
        entries.push(ManifestEntry {
            audio_filepath: filename,
            duration: clip.duration_s(),
            text: tokens.join(" "),
            speaker: SynthSpec::speaker_id(speaker_idx),
            gender: SynthSpec::speaker_gender(speaker_idx),
        });
    }

    save_manifest(&entries, &out_dir.join("manifest.jsonl"))?;
    Ok(entries)
}
