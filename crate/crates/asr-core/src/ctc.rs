//! Connectionist Temporal Classification: loss, gradients, and decoders.
//!
//! All dynamic programming runs in log space on `f64`, with
//! `f64::NEG_INFINITY` as the exact representation of probability zero.
//! The blank symbol always occupies the last column of a score matrix,
//! so a matrix over a vocabulary of `|V|` tokens has `|V| + 1` columns.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CtcError {
    #[error("label id {id} out of range for a vocabulary of {vocab_size} tokens")]
    BadLabelId { id: usize, vocab_size: usize },
    #[error("{frames} frames cannot emit this label sequence (needs at least {needed})")]
    InfeasibleLabels { frames: usize, needed: usize },
    #[error("score matrix needs at least 2 columns (tokens plus blank), got {0}")]
    TooFewColumns(usize),
}

/// A blank-free sequence of label ids in `[0, |V|)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence {
    ids: Vec<usize>,
}

impl LabelSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self, CtcError> {
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(CtcError::BadLabelId { id, vocab_size });
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Fewest frames that can emit this sequence: one per label plus a
    /// separating blank per adjacent repeat.
    pub fn min_frames(&self) -> usize {
        let repeats = self.ids.windows(2).filter(|w| w[0] == w[1]).count();
        self.ids.len() + repeats
    }
}

/// The blank-interleaved form `blank, l1, blank, l2, ..., blank` used by
/// the forward–backward recursion. Length is `2L + 1`.
#[derive(Debug, Clone)]
pub struct ExtendedLabels {
    ids: Vec<usize>,
}

impl ExtendedLabels {
    pub fn new(labels: &LabelSequence, blank: usize) -> Self {
        let mut ids = Vec::with_capacity(2 * labels.len() + 1);
        ids.push(blank);
        for &l in labels.ids() {
            ids.push(l);
            ids.push(blank);
        }
        Self { ids }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }
}

/// A decode hypothesis: label ids plus their log-domain score.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub ids: LabelSequence,
    pub score: f64,
}

/// log(exp(a) + exp(b)) without overflow; -inf is absorbing.
pub(crate) fn log_sum_exp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Row-wise log-softmax with max subtraction. Each output row exponentiates
/// and sums to 1.
pub fn log_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - log_norm);
    }
    out
}

/// CTC negative log-likelihood of `labels` under per-frame log
/// probabilities, together with the gradient of the loss with respect to
/// the pre-softmax logits.
///
/// `log_probs` is `T x (|V|+1)` with the blank last; rows must already be
/// normalized (see [`log_softmax`]). Infeasible targets (more labels than
/// the frames can emit) are an error rather than an infinite loss.
pub fn ctc_loss(
    log_probs: ArrayView2<f64>,
    labels: &LabelSequence,
) -> Result<(f64, Array2<f64>), CtcError> {
    let (frames, n_classes) = log_probs.dim();
    if n_classes < 2 {
        return Err(CtcError::TooFewColumns(n_classes));
    }
    let blank = n_classes - 1;
    if let Some(&id) = labels.ids().iter().find(|&&id| id >= blank) {
        return Err(CtcError::BadLabelId {
            id,
            vocab_size: blank,
        });
    }
    let needed = labels.min_frames().max(1);
    if frames < needed {
        return Err(CtcError::InfeasibleLabels { frames, needed });
    }

    let ext = ExtendedLabels::new(labels, blank);
    let ids = ext.ids();
    let s_len = ids.len();
    let lp = |t: usize, s: usize| log_probs[(t, ids[s])];

    // Forward variables: alpha[t][s] includes the emission at frame t.
    let mut alpha = Array2::from_elem((frames, s_len), f64::NEG_INFINITY);
    alpha[(0, 0)] = lp(0, 0);
    if s_len > 1 {
        alpha[(0, 1)] = lp(0, 1);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1, s)];
            if s >= 1 {
                acc = log_sum_exp2(acc, alpha[(t - 1, s - 1)]);
            }
            if s >= 2 && ids[s] != blank && ids[s] != ids[s - 2] {
                acc = log_sum_exp2(acc, alpha[(t - 1, s - 2)]);
            }
            alpha[(t, s)] = acc + lp(t, s);
        }
    }

    let log_p = if s_len > 1 {
        log_sum_exp2(alpha[(frames - 1, s_len - 1)], alpha[(frames - 1, s_len - 2)])
    } else {
        alpha[(frames - 1, 0)]
    };
    let loss = -log_p;

    // Backward variables, same emission convention as alpha, so that
    // alpha * beta double-counts the emission at (t, s).
    let mut beta = Array2::from_elem((frames, s_len), f64::NEG_INFINITY);
    beta[(frames - 1, s_len - 1)] = lp(frames - 1, s_len - 1);
    if s_len > 1 {
        beta[(frames - 1, s_len - 2)] = lp(frames - 1, s_len - 2);
    }
    for t in (0..frames.saturating_sub(1)).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1, s)];
            if s + 1 < s_len {
                acc = log_sum_exp2(acc, beta[(t + 1, s + 1)]);
            }
            if s + 2 < s_len && ids[s] != blank && ids[s] != ids[s + 2] {
                acc = log_sum_exp2(acc, beta[(t + 1, s + 2)]);
            }
            beta[(t, s)] = acc + lp(t, s);
        }
    }

    // d loss / d logit[t][k] = softmax[t][k] - sum_{s: l'_s = k} of the
    // posterior mass passing through (t, s).
    let mut grad = Array2::zeros((frames, n_classes));
    let mut class_mass = vec![f64::NEG_INFINITY; n_classes];
    for t in 0..frames {
        class_mass.fill(f64::NEG_INFINITY);
        for s in 0..s_len {
            let joint = alpha[(t, s)] + beta[(t, s)];
            class_mass[ids[s]] = log_sum_exp2(class_mass[ids[s]], joint);
        }
        for k in 0..n_classes {
            let y = log_probs[(t, k)].exp();
            let posterior = if class_mass[k] == f64::NEG_INFINITY {
                0.0
            } else {
                // alpha*beta carries the emission twice; divide once by y
                // and once by p (log_p) to get the posterior.
                (class_mass[k] - log_p - log_probs[(t, k)]).exp()
            };
            grad[(t, k)] = y - posterior;
        }
    }

    Ok((loss, grad))
}

/// Greedy (max) decoding: per-frame argmax with ties broken toward the
/// lowest index, then collapse adjacent repeats and drop blanks. The
/// score is the sum of the chosen per-frame log probabilities.
pub fn greedy_decode(log_probs: ArrayView2<f64>) -> Result<DecodeResult, CtcError> {
    let (_, n_classes) = log_probs.dim();
    if n_classes < 2 {
        return Err(CtcError::TooFewColumns(n_classes));
    }
    let blank = n_classes - 1;

    let mut ids = Vec::new();
    let mut score = 0.0;
    let mut prev = blank;
    for row in log_probs.rows() {
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        score += row[best];
        if best != blank && best != prev {
            ids.push(best);
        }
        prev = best;
    }
    Ok(DecodeResult {
        ids: LabelSequence::new(ids, blank).expect("blanks are never emitted"),
        score,
    })
}

#[derive(Debug, Clone, Copy)]
struct PrefixScore {
    /// Log probability of the prefix through paths ending in blank.
    blank: f64,
    /// Log probability through paths ending in the prefix's last label.
    non_blank: f64,
}

impl PrefixScore {
    const NONE: Self = Self {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(&self) -> f64 {
        log_sum_exp2(self.blank, self.non_blank)
    }
}

/// Prefix beam search over the CTC marginal.
///
/// Each surviving prefix carries separate blank-ending and
/// label-ending log probabilities; prefixes reached by multiple paths
/// merge their mass. The top `beam_width` prefixes by total probability
/// survive each frame, and the best prefix is returned with its marginal
/// log probability. With a beam wide enough to hold every prefix this is
/// exact. Beams are kept in a `BTreeMap` so merge order, and therefore
/// the result, is deterministic.
pub fn beam_decode(
    log_probs: ArrayView2<f64>,
    beam_width: usize,
) -> Result<DecodeResult, CtcError> {
    let (_, n_classes) = log_probs.dim();
    if n_classes < 2 {
        return Err(CtcError::TooFewColumns(n_classes));
    }
    let blank = n_classes - 1;
    let beam_width = beam_width.max(1);

    let mut beams: BTreeMap<Vec<usize>, PrefixScore> = BTreeMap::new();
    beams.insert(
        Vec::new(),
        PrefixScore {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    );

    for row in log_probs.rows() {
        let mut next: BTreeMap<Vec<usize>, PrefixScore> = BTreeMap::new();
        for (prefix, score) in &beams {
            let total = score.total();

            // Emit blank: same prefix, now blank-ending.
            let entry = next.entry(prefix.clone()).or_insert(PrefixScore::NONE);
            entry.blank = log_sum_exp2(entry.blank, total + row[blank]);

            for k in 0..blank {
                let lp_k = row[k];
                if prefix.last() == Some(&k) {
                    // Repeating the last label without a separating blank
                    // stays on the same prefix.
                    let entry = next.entry(prefix.clone()).or_insert(PrefixScore::NONE);
                    entry.non_blank = log_sum_exp2(entry.non_blank, score.non_blank + lp_k);

                    // Extending requires the previous paths to end in blank.
                    let mut extended = prefix.clone();
                    extended.push(k);
                    let entry = next.entry(extended).or_insert(PrefixScore::NONE);
                    entry.non_blank = log_sum_exp2(entry.non_blank, score.blank + lp_k);
                } else {
                    let mut extended = prefix.clone();
                    extended.push(k);
                    let entry = next.entry(extended).or_insert(PrefixScore::NONE);
                    entry.non_blank = log_sum_exp2(entry.non_blank, total + lp_k);
                }
            }
        }

        if next.len() > beam_width {
            let mut ranked: Vec<(Vec<usize>, PrefixScore)> = next.into_iter().collect();
            // Descending score; the BTreeMap already fixed lexicographic
            // order among equals.
            ranked.sort_by(|a, b| b.1.total().total_cmp(&a.1.total()));
            ranked.truncate(beam_width);
            next = ranked.into_iter().collect();
        }
        beams = next;
    }

    let (ids, score) = beams
        .into_iter()
        .map(|(prefix, score)| (prefix, score.total()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one beam always survives");
    Ok(DecodeResult {
        ids: LabelSequence::new(ids, blank).expect("beam prefixes never contain blank"),
        score,
    })
}
