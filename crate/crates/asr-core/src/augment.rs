//! SpecAugment-style masking on feature matrices.

use rand::Rng;

use crate::features::FeatureMatrix;

/// Value written into masked rows and columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[allow(clippy::exhaustive_enums)]
pub enum MaskFill {
    Zero,
    /// Mean over all entries of the input matrix.
    UtteranceMean,
}

/// Masking policy: how many frequency and time masks to draw and how
/// wide each may be. Widths wider than the matrix are clipped at
/// application time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub n_freq_masks: usize,
    /// Maximum masked mel rows per frequency mask.
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    /// Maximum masked frames per time mask.
    pub max_time_width: usize,
    pub fill: MaskFill,
}

impl Default for AugmentPolicy {
    /// One mild mask per axis: up to 8 mel rows, up to 10 frames.
    fn default() -> Self {
        Self {
            n_freq_masks: 1,
            max_freq_width: 8,
            n_time_masks: 1,
            max_time_width: 10,
            fill: MaskFill::Zero,
        }
    }
}

impl AugmentPolicy {
    /// A policy that never masks anything.
    pub fn identity() -> Self {
        Self {
            n_freq_masks: 0,
            max_freq_width: 0,
            n_time_masks: 0,
            max_time_width: 0,
            fill: MaskFill::Zero,
        }
    }
}

/// Applies the policy: for each mask a width `w ~ Uniform{0..max_width}`
/// and a start `~ Uniform{0..extent-w}` select rows (frequency masks)
/// or columns (time masks) replaced by the fill value. Frequency masks
/// are drawn before time masks; everything is deterministic given the
/// rng state, and unmasked entries are bit-identical to the input.
pub fn spec_augment<R: Rng>(
    features: &FeatureMatrix,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> FeatureMatrix {
    let (n_mels, n_frames) = features.values.dim();
    let fill = match policy.fill {
        MaskFill::Zero => 0.0,
        MaskFill::UtteranceMean => features.values.sum() / features.values.len() as f64,
    };

    let mut values = features.values.clone();
    for _ in 0..policy.n_freq_masks {
        let max_w = policy.max_freq_width.min(n_mels);
        let w = rng.random_range(0..=max_w);
        let start = rng.random_range(0..=n_mels - w);
        for row in start..start + w {
            for t in 0..n_frames {
                values[(row, t)] = fill;
            }
        }
    }
    for _ in 0..policy.n_time_masks {
        let max_w = policy.max_time_width.min(n_frames);
        let w = rng.random_range(0..=max_w);
        let start = rng.random_range(0..=n_frames - w);
        for col in start..start + w {
            for m in 0..n_mels {
                values[(m, col)] = fill;
            }
        }
    }

    FeatureMatrix {
        values,
        meta: features.meta.clone(),
    }
}
