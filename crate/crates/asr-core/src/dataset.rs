//! Manifests, transcripts, vocabularies, and speaker-disjoint splits.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::LabelSequence;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {reason}")]
    Line {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("text {0:?} is empty after normalization")]
    EmptyAfterNormalization(String),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("out-of-vocabulary unit {unit:?} in {text:?}")]
    OutOfVocabulary { unit: String, text: String },
    #[error("label id {id} is out of range for a vocabulary of {n_tokens} tokens")]
    BadLabelId { id: usize, n_tokens: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
}

/// Speaker gender as recorded in the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    M,
    F,
    Unknown,
}

/// One utterance: a WAV path (relative to the manifest), its duration in
/// seconds, the transcript, and speaker metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub audio_filepath: String,
    pub duration: f64,
    pub text: String,
    pub speaker: String,
    pub gender: Gender,
}

/// Reads a JSON-Lines manifest. Blank lines are not allowed; every
/// validation error names the 1-based line it came from.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DatasetError> {
    let content = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut entries = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let lineno = idx + 1;
        let fail = |reason: String| DatasetError::Line {
            path: path.to_path_buf(),
            line: lineno,
            reason,
        };
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        if !(entry.duration > 0.0) {
            return Err(fail(format!("non-positive duration {}", entry.duration)));
        }
        normalize_text(&entry.text).map_err(|e| fail(e.to_string()))?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Writes entries as JSON Lines (UTF-8, LF). Field order is fixed, so the
/// output is byte-reproducible.
pub fn save_manifest(entries: &[ManifestEntry], path: &Path) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for entry in entries {
        serde_json::to_writer(&mut out, entry).expect("manifest entries always serialize");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&out).map_err(io_err)
}

/// Lowercases, strips everything outside `[a-z, space, apostrophe]`, and
/// collapses whitespace runs. Errors if nothing is left.
pub fn normalize_text(text: &str) -> Result<String, DatasetError> {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.to_lowercase().chars() {
        if c.is_ascii_lowercase() || c == '\'' {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            out.push(c);
            pending_space = false;
        } else if c.is_whitespace() {
            pending_space = true;
        }
        // everything else is dropped
    }
    if out.is_empty() {
        return Err(DatasetError::EmptyAfterNormalization(text.to_string()));
    }
    Ok(out)
}

/// Modeling unit for transcripts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabUnit {
    Char,
    Word,
}

/// An ordered token inventory. Tokens are sorted and unique; the CTC
/// blank is implicit at index `tokens.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    unit: VocabUnit,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(unit: VocabUnit, mut tokens: Vec<String>) -> Self {
        tokens.sort();
        tokens.dedup();
        Self { unit, tokens }
    }

    pub fn unit(&self) -> VocabUnit {
        self.unit
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of the CTC blank: one past the last real token.
    pub fn blank(&self) -> usize {
        self.tokens.len()
    }

    /// Output dimension of an acoustic model over this vocabulary,
    /// i.e. `|V| + 1` including the blank.
    pub fn n_outputs(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.tokens.binary_search_by(|t| t.as_str().cmp(token)).ok()
    }
}

/// Builds the sorted distinct token inventory over the normalized
/// transcripts of `entries`.
pub fn build_vocab(entries: &[ManifestEntry], unit: VocabUnit) -> Result<Vocabulary, DatasetError> {
    if entries.is_empty() {
        return Err(DatasetError::EmptyCorpus);
    }
    let mut set = BTreeSet::new();
    for entry in entries {
        let text = normalize_text(&entry.text)?;
        match unit {
            VocabUnit::Char => {
                for c in text.chars() {
                    set.insert(c.to_string());
                }
            }
            VocabUnit::Word => {
                for w in text.split_whitespace() {
                    set.insert(w.to_string());
                }
            }
        }
    }
    Ok(Vocabulary {
        unit,
        tokens: set.into_iter().collect(),
    })
}

/// Encodes normalized text into label ids. Every unit must be in the
/// vocabulary; the offender is named otherwise.
pub fn encode_transcript(text: &str, vocab: &Vocabulary) -> Result<LabelSequence, DatasetError> {
    let oov = |unit: String| DatasetError::OutOfVocabulary {
        unit,
        text: text.to_string(),
    };
    let mut ids = Vec::new();
    match vocab.unit {
        VocabUnit::Char => {
            for c in text.chars() {
                let s = c.to_string();
                ids.push(vocab.id_of(&s).ok_or_else(|| oov(s))?);
            }
        }
        VocabUnit::Word => {
            for w in text.split_whitespace() {
                ids.push(vocab.id_of(w).ok_or_else(|| oov(w.to_string()))?);
            }
        }
    }
    Ok(LabelSequence::new(ids, vocab.len()).expect("ids are in range by construction"))
}

/// Inverse of [`encode_transcript`] on in-vocabulary text.
pub fn decode_ids(ids: &[usize], vocab: &Vocabulary) -> Result<String, DatasetError> {
    let mut parts = Vec::with_capacity(ids.len());
    for &id in ids {
        let token = vocab.tokens.get(id).ok_or(DatasetError::BadLabelId {
            id,
            n_tokens: vocab.len(),
        })?;
        parts.push(token.as_str());
    }
    Ok(match vocab.unit {
        VocabUnit::Char => parts.concat(),
        VocabUnit::Word => parts.join(" "),
    })
}

/// Integer speaker quotas for each split via largest-remainder
/// apportionment, with every split guaranteed at least one speaker.
fn speaker_quotas(n: usize, fractions: (f64, f64, f64)) -> [usize; 3] {
    let fs = [fractions.0, fractions.1, fractions.2];
    let raw: Vec<f64> = fs.iter().map(|f| f * n as f64).collect();
    let mut quotas: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())));
    let mut left = n - quotas.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        quotas[i] += 1;
        left -= 1;
    }
    // Splits may not end up empty; steal from the largest quota.
    for i in 0..3 {
        while quotas[i] == 0 {
            let donor = (0..3).max_by_key(|&j| quotas[j]).unwrap();
            quotas[donor] -= 1;
            quotas[i] += 1;
        }
    }
    [quotas[0], quotas[1], quotas[2]]
}

/// Partitions entries into (train, dev, test) with disjoint speaker sets.
///
/// Speakers (not utterances) are shuffled by the seed and assigned one at
/// a time to the split whose speaker deficit is largest, so the speaker
/// counts always match the largest-remainder quotas of the fractions.
/// Every utterance follows its speaker.
pub fn split_by_speaker(
    entries: &[ManifestEntry],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<[Vec<ManifestEntry>; 3], DatasetError> {
    let err = |msg: String| Err(DatasetError::InvalidSplit(msg));
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return err(format!("fractions must all be positive, got {fractions:?}"));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return err(format!("fractions must sum to 1, got {fractions:?}"));
    }

    let speakers: BTreeSet<&str> = entries.iter().map(|e| e.speaker.as_str()).collect();
    let mut speakers: Vec<&str> = speakers.into_iter().collect();
    if speakers.len() < 3 {
        return err(format!(
            "need at least 3 distinct speakers for 3 splits, got {}",
            speakers.len()
        ));
    }

    let quotas = speaker_quotas(speakers.len(), fractions);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    speakers.shuffle(&mut rng);

    let mut assigned: [Vec<&str>; 3] = Default::default();
    for speaker in speakers {
        let split = (0..3)
            .max_by(|&i, &j| {
                let di = quotas[i] as isize - assigned[i].len() as isize;
                let dj = quotas[j] as isize - assigned[j].len() as isize;
                di.cmp(&dj).then(j.cmp(&i)) // ties go to the lowest index
            })
            .unwrap();
        assigned[split].push(speaker);
    }

    let mut out: [Vec<ManifestEntry>; 3] = Default::default();
    for entry in entries {
        let split = (0..3)
            .find(|&i| assigned[i].iter().any(|s| *s == entry.speaker))
            .unwrap();
        out[split].push(entry.clone());
    }
    Ok(out)
}

/// Names of splits, aligned with [`split_by_speaker`]'s output order.
pub const SPLIT_NAMES: [&str; 3] = ["train", "dev", "test"];

/// One warning per non-empty split whose entries all share one gender.
pub fn single_gender_warnings(splits: &[Vec<ManifestEntry>; 3]) -> Vec<String> {
    let mut warnings = Vec::new();
    for (split, name) in splits.iter().zip(SPLIT_NAMES) {
        if let Some(first) = split.first() {
            if split.iter().all(|e| e.gender == first.gender) {
                warnings.push(format!(
                    "split {name:?} contains only speakers of gender {:?}",
                    first.gender
                ));
            }
        }
    }
    warnings
}
