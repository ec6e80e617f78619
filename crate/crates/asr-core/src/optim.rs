//! NovoGrad and the epoch training loop.
//!
//! NovoGrad is Adam-shaped but keeps a single scalar second moment per
//! tensor instead of one per element, which is where its smaller memory
//! footprint comes from. Per tensor `l` with gradient `g_l`:
//!
//! ```text
//! v_l <- |g_l|^2                      on the first step
//! v_l <- b2 * v_l + (1 - b2)*|g_l|^2  afterwards
//! u_l  = g_l / (sqrt(v_l) + eps) + wd * w_l
//! m_l <- u_l                          on the first step
//! m_l <- b1 * m_l + u_l               afterwards
//! w_l <- w_l - lr * m_l
//! ```
//!
//! Weight decay applies to convolution weights only, never to biases or
//! batch-norm gains/shifts.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::augment::{spec_augment, AugmentPolicy};
use crate::ctc::{ctc_loss, greedy_decode, log_softmax, CtcError, LabelSequence};
use crate::dataset::{decode_ids, encode_transcript, normalize_text, ManifestEntry, Vocabulary};
use crate::features::{log_mel_with_bank, mel_filterbank, normalize, FeatureMatrix, FrameConfig};
use crate::metrics::{edit_ops, tokenize, WerBreakdown};
use crate::model::{
    forward_eval, forward_train, model_backward, GradientStore, ModelConfig, ModelError,
    ParameterStore, TensorStore,
};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error("invalid hyperparameters: {0}")]
    BadHyper(String),
    #[error("non-finite gradient in tensor {0:?}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("manifest line {line}: {message}")]
    Data { line: usize, message: String },
    #[error(
        "manifest line {line}: infeasible utterance: labels need {needed} output frames, model \
         yields {available}"
    )]
    InfeasibleUtterance {
        line: usize,
        needed: usize,
        available: usize,
    },
    #[error("cannot train: {0} split has no utterances")]
    EmptySplit(&'static str),
    #[error("epoch callback failed: {0}")]
    Sink(String),
}

/// NovoGrad hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptHyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            weight_decay: 0.001,
            beta1: 0.95,
            beta2: 0.5,
            epsilon: 1e-8,
        }
    }
}

impl OptHyper {
    fn validate(&self) -> Result<(), OptimError> {
        let err = |msg: String| Err(OptimError::BadHyper(msg));
        if !(self.learning_rate >= 0.0) {
            return err(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return err(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return err(format!("{name} must be in [0, 1), got {beta}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return err(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// Optimizer state: a full-shape first moment per tensor, one scalar
/// second moment per tensor, and the step counter.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    first_moments: TensorStore,
    second_moments: BTreeMap<String, f64>,
    steps: u64,
}

impl OptState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moments(&self) -> &TensorStore {
        &self.first_moments
    }

    pub fn second_moments(&self) -> &BTreeMap<String, f64> {
        &self.second_moments
    }
}

fn decay_applies(name: &str) -> bool {
    name.ends_with(".weight") || name.ends_with(".depthwise") || name.ends_with(".pointwise")
}

/// One NovoGrad update over every learnable tensor. Buffers (running
/// statistics) are owned by batch norm and skipped here. The step
/// counter advances even at `learning_rate == 0`.
pub fn novograd_step(
    params: &mut ParameterStore,
    grads: &GradientStore,
    state: &mut OptState,
    hp: &OptHyper,
) -> Result<(), OptimError> {
    hp.validate()?;
    params.same_layout(grads)?;
    let first_step = state.steps == 0;

    let names: Vec<String> = params
        .names()
        .filter(|n| !TensorStore::is_buffer(n))
        .cloned()
        .collect();
    for name in names {
        let grad = grads.get(&name)?;
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGradient(name));
        }

        let norm_sq: f64 = grad.iter().map(|&v| v * v).sum();
        let v = if first_step {
            norm_sq
        } else {
            hp.beta2 * state.second_moments[&name] + (1.0 - hp.beta2) * norm_sq
        };
        let denom = v.sqrt() + hp.epsilon;

        let weights = params.get_mut(&name)?;
        let decay = if decay_applies(&name) { hp.weight_decay } else { 0.0 };
        let mut update = grad.mapv(|g| g / denom);
        if decay != 0.0 {
            update.zip_mut_with(weights, |u, &w| *u += decay * w);
        }
        let moment = if first_step {
            update
        } else {
            let mut m = state.first_moments.get(&name)?.clone();
            m.zip_mut_with(&update, |m, &u| *m = hp.beta1 * *m + u);
            m
        };
        weights.zip_mut_with(&moment, |w, &m| *w -= hp.learning_rate * m);

        state.first_moments.insert(name.clone(), moment);
        state.second_moments.insert(name, v);
    }
    state.steps += 1;
    Ok(())
}

/// One utterance prepared for training or evaluation.
#[derive(Debug, Clone)]
pub struct TrainItem {
    /// Normalized log-mel features.
    pub features: FeatureMatrix,
    pub labels: LabelSequence,
    /// Reference transcript split into WER tokens.
    pub ref_words: Vec<String>,
    /// 1-based line in the source manifest, for error reports.
    pub line: usize,
}

/// Loads, resamples, featurizes, and encodes every manifest entry.
/// Audio paths are resolved relative to `base_dir` (normally the
/// manifest's directory). Errors carry the 1-based manifest line.
pub fn prepare_items(
    entries: &[ManifestEntry],
    base_dir: &Path,
    frame_cfg: &FrameConfig,
    vocab: &Vocabulary,
    model_config: &ModelConfig,
) -> Result<Vec<TrainItem>, OptimError> {
    let bank = mel_filterbank(frame_cfg, crate::audio::CANONICAL_SAMPLE_RATE)
        .map_err(|e| OptimError::Data {
            line: 0,
            message: e.to_string(),
        })?;
    let mut items = Vec::with_capacity(entries.len());
    for (idx, entry) in entries.iter().enumerate() {
        let line = idx + 1;
        let data_err = |message: String| OptimError::Data { line, message };

        let clip = crate::audio::load_wav(&base_dir.join(&entry.audio_filepath))
            .map_err(|e| data_err(e.to_string()))?;
        let clip = crate::audio::resample_linear(&clip, crate::audio::CANONICAL_SAMPLE_RATE)
            .map_err(|e| data_err(e.to_string()))?;
        let features = log_mel_with_bank(&clip, frame_cfg, &bank)
            .map_err(|e| data_err(e.to_string()))?;
        let features = normalize(&features);

        let text = normalize_text(&entry.text).map_err(|e| data_err(e.to_string()))?;
        let labels = encode_transcript(&text, vocab).map_err(|e| data_err(e.to_string()))?;
        let needed = labels.min_frames();
        let available = model_config.output_frames(features.n_frames());
        if needed > available {
            return Err(OptimError::InfeasibleUtterance {
                line,
                needed,
                available,
            });
        }

        items.push(TrainItem {
            features,
            labels,
            ref_words: tokenize(&text),
            line,
        });
    }
    Ok(items)
}

/// Knobs of one training run.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub hp: OptHyper,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Masking applied on the fly to training features, fresh draws per
    /// epoch; `None` trains on clean features.
    pub augment: Option<AugmentPolicy>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            hp: OptHyper::default(),
            batch_size: 8,
            epochs: 5,
            seed: 0,
            augment: None,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: &'static str,
    /// Mean CTC loss per utterance. For the train split this comes from
    /// the training pass itself; for dev from an eval-mode pass.
    pub loss: f64,
    /// Pooled word error rate of an end-of-epoch eval-mode pass over
    /// the split, so the value reflects the epoch's final parameters.
    pub wer: f64,
}

/// Runs `epochs` of shuffled mini-batch training: forward, CTC loss
/// (mean over the batch), backward, NovoGrad. After each epoch the
/// train and dev records go to `on_epoch` together with the current
/// parameters; return `ControlFlow::Break(())` to stop early.
///
/// Fully deterministic for a fixed seed on a single thread.
pub fn train_loop(
    config: &ModelConfig,
    params: &mut ParameterStore,
    vocab: &Vocabulary,
    train_items: &[TrainItem],
    dev_items: &[TrainItem],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&[EpochRecord; 2], &ParameterStore) -> Result<ControlFlow<()>, OptimError>,
) -> Result<Vec<EpochRecord>, OptimError> {
    opts.hp.validate()?;
    if opts.epochs == 0 {
        return Ok(Vec::new());
    }
    if train_items.is_empty() {
        return Err(OptimError::EmptySplit("train"));
    }
    if dev_items.is_empty() {
        return Err(OptimError::EmptySplit("dev"));
    }
    for item in train_items {
        let needed = item.labels.min_frames();
        let available = config.output_frames(item.features.n_frames());
        if needed > available {
            return Err(OptimError::InfeasibleUtterance {
                line: item.line,
                needed,
                available,
            });
        }
    }
    let batch_size = opts.batch_size.max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut state = OptState::new();
    let mut records = Vec::with_capacity(opts.epochs * 2);

    for epoch in 1..=opts.epochs {
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let feats = match &opts.augment {
                        Some(policy) => spec_augment(&train_items[i].features, policy, &mut rng),
                        None => train_items[i].features.clone(),
                    };
                    feats.values
                })
                .collect();

            let (logits, cache) = forward_train(config, params, &batch, &mut rng)?;
            let mut d_logits = Vec::with_capacity(chunk.len());
            for (&i, item_logits) in chunk.iter().zip(&logits) {
                let item = &train_items[i];
                let log_probs = log_softmax(item_logits.view());
                let (loss, grad) = ctc_loss(log_probs.view(), &item.labels)?;
                if !loss.is_finite() {
                    return Err(OptimError::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                    });
                }
                loss_sum += loss;
                d_logits.push(grad / chunk.len() as f64);
            }
            let grads = model_backward(config, params, &cache, &d_logits)?;
            novograd_step(params, &grads, &mut state, &opts.hp)?;
        }

        let (_, train_wer) = evaluate(config, params, vocab, train_items, batch_size)?;
        let train_record = EpochRecord {
            epoch,
            split: "train",
            loss: loss_sum / train_items.len() as f64,
            wer: train_wer,
        };
        let (dev_loss, dev_wer) = evaluate(config, params, vocab, dev_items, batch_size)?;
        let dev_record = EpochRecord {
            epoch,
            split: "dev",
            loss: dev_loss,
            wer: dev_wer,
        };

        let pair = [train_record, dev_record];
        let flow = on_epoch(&pair, params)?;
        records.extend(pair);
        if flow == ControlFlow::Break(()) {
            break;
        }
    }
    Ok(records)
}

/// Eval-mode pass over a split: mean CTC loss and pooled greedy WER.
pub fn evaluate(
    config: &ModelConfig,
    params: &ParameterStore,
    vocab: &Vocabulary,
    items: &[TrainItem],
    batch_size: usize,
) -> Result<(f64, f64), OptimError> {
    if items.is_empty() {
        return Err(OptimError::EmptySplit("eval"));
    }
    let mut loss_sum = 0.0;
    let mut pooled = WerBreakdown::default();
    for chunk in items.chunks(batch_size.max(1)) {
        let batch: Vec<_> = chunk.iter().map(|item| item.features.values.clone()).collect();
        let logits = forward_eval(config, params, &batch)?;
        for (item, item_logits) in chunk.iter().zip(&logits) {
            let log_probs = log_softmax(item_logits.view());
            let (loss, _) = ctc_loss(log_probs.view(), &item.labels)?;
            loss_sum += loss;
            let decoded = greedy_decode(log_probs.view())?;
            let hyp_text = decode_ids(decoded.ids.ids(), vocab)
                .expect("greedy ids are always in vocabulary");
            pooled.absorb(&edit_ops(&item.ref_words, &tokenize(&hyp_text)));
        }
    }
    Ok((
        loss_sum / items.len() as f64,
        pooled.errors() as f64 / pooled.reference_len as f64,
    ))
}
