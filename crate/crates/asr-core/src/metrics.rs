//! Word error rate with a full edit-operation breakdown.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("WER is undefined for an empty reference")]
    EmptyReference,
}

/// Counts from a minimum-edit alignment of a reference against a
/// hypothesis. `reference_len = substitutions + deletions + correct`
/// always holds, and `substitutions + deletions + insertions` is the
/// Levenshtein distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub correct: usize,
    pub reference_len: usize,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Pools another breakdown into this one (corpus aggregation).
    pub fn absorb(&mut self, other: &WerBreakdown) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.correct += other.correct;
        self.reference_len += other.reference_len;
    }
}

/// Minimum-edit alignment by full-matrix dynamic programming with unit
/// costs. When several alignments are optimal, the backtrace prefers
/// substitution over insertion over deletion, so the breakdown is
/// deterministic; the total error count is tie-independent.
pub fn edit_ops<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> WerBreakdown {
    let r = reference.len();
    let h = hypothesis.len();
    let mut dist = vec![vec![0usize; h + 1]; r + 1];
    for (i, row) in dist.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=h {
        dist[0][j] = j;
    }
    for i in 1..=r {
        for j in 1..=h {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            dist[i][j] = (dist[i - 1][j - 1] + sub_cost)
                .min(dist[i][j - 1] + 1)
                .min(dist[i - 1][j] + 1);
        }
    }

    let mut b = WerBreakdown {
        reference_len: r,
        ..Default::default()
    };
    let (mut i, mut j) = (r, h);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dist[i][j] == dist[i - 1][j - 1] + sub_cost {
                if sub_cost == 0 {
                    b.correct += 1;
                } else {
                    b.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && dist[i][j] == dist[i][j - 1] + 1 {
            b.insertions += 1;
            j -= 1;
        } else {
            b.deletions += 1;
            i -= 1;
        }
    }
    b
}

/// `(S + D + I) / N`. Errors when the reference is empty; insertions can
/// push the value past 1.
pub fn wer(breakdown: &WerBreakdown) -> Result<f64, MetricsError> {
    if breakdown.reference_len == 0 {
        return Err(MetricsError::EmptyReference);
    }
    Ok(breakdown.errors() as f64 / breakdown.reference_len as f64)
}

/// Pooled corpus WER: total errors over total reference length, not the
/// mean of per-pair rates.
pub fn corpus_wer<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64, MetricsError> {
    let mut pooled = WerBreakdown::default();
    for (reference, hypothesis) in pairs {
        pooled.absorb(&edit_ops(reference, hypothesis));
    }
    wer(&pooled)
}

/// Splits text into WER tokens: lowercase, whitespace-separated, with
/// leading and trailing punctuation stripped from each word. Words that
/// are all punctuation disappear.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|word| {
            let trimmed = word
                .trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
                .to_lowercase();
            (!trimmed.is_empty()).then_some(trimmed)
        })
        .collect()
}
