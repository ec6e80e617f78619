//! A from-scratch, CPU-only CTC speech recognition pipeline.
//!
//! The crate covers the whole path from waveform to transcript:
//!
//! * [`audio`] — WAV I/O, resampling, and a synthetic tone-based dataset
//!   generator so the pipeline can be exercised without a speech corpus.
//! * [`features`] — short-time Fourier transform, mel filterbanks, and
//!   normalized log-mel feature matrices.
//! * [`augment`] — SpecAugment-style time/frequency masking.
//! * [`model`] — Jasper- and QuartzNet-style 1D convolutional acoustic
//!   models with hand-written forward and backward passes.
//! * [`ctc`] — CTC loss via the forward–backward algorithm, plus greedy
//!   and prefix beam-search decoders.
//! * [`optim`] — the NovoGrad optimizer and the epoch training loop.
//! * [`metrics`] — word error rate with a full substitution/deletion/
//!   insertion breakdown.
//! * [`dataset`] — JSON-Lines manifests, text normalization, vocabularies,
//!   and speaker-disjoint splits.
//!
//! Everything is deterministic given a seed and runs single-threaded at
//! desk scale; there is no GPU code and no external ML runtime.

#[cfg(test)]
pub(crate) mod test_support;

pub mod audio;
pub mod augment;
pub mod ctc;
pub mod dataset;
pub mod features;
pub mod metrics;
pub mod model;
pub mod optim;

// The book chapters double as doctests so their examples cannot rot.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            pub mod $name {}
        };
    }

    chapter!(intro, "../../../book/src/intro.md");
    chapter!(features, "../../../book/src/features.md");
    chapter!(augmentation, "../../../book/src/augmentation.md");
    chapter!(models, "../../../book/src/models.md");
    chapter!(ctc, "../../../book/src/ctc.md");
    chapter!(training, "../../../book/src/training.md");
    chapter!(evaluation, "../../../book/src/evaluation.md");
    chapter!(data, "../../../book/src/data.md");
}
