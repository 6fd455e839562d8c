use std::collections::HashMap;

use crate::error::{Error, Result};

/// Upper bounds (1-based, inclusive) of the position buckets; the last
/// bucket is open.
pub const POSITION_BUCKETS: [usize; 5] = [10, 20, 30, 40, 50];
/// Lower bounds of the training-frequency buckets.
pub const FREQUENCY_BUCKETS: [usize; 5] = [0, 1, 10, 100, 1000];

#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub label: String,
    pub correct: usize,
    pub total: usize,
}

impl Bucket {
    fn new(label: String) -> Self {
        Self {
            label,
            correct: 0,
            total: 0,
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Σ|hyp| / Σ|ref|.
    pub length_ratio: f64,
    /// Fraction of reference positions whose token the hypothesis
    /// reproduces at the same position.
    pub accuracy: f64,
    pub by_position: Vec<Bucket>,
    pub by_frequency: Vec<Bucket>,
    /// Corpus BLEU-4 on a 0–100 scale.
    pub bleu: f64,
}

fn position_bucket(pos: usize) -> usize {
    POSITION_BUCKETS
        .iter()
        .position(|&hi| pos <= hi)
        .unwrap_or(POSITION_BUCKETS.len())
}

fn frequency_bucket(freq: usize) -> usize {
    FREQUENCY_BUCKETS.iter().rposition(|&lo| freq >= lo).unwrap_or(0)
}

/// Length, accuracy and BLEU statistics of decoded hypotheses.
/// `train_freq[id]` is the training-set frequency of target token `id`.
pub fn eval_metrics(hyps: &[Vec<usize>], refs: &[Vec<usize>], train_freq: &[usize]) -> Result<EvalReport> {
    if hyps.is_empty() || hyps.len() != refs.len() {
        return Err(Error::Invalid(format!(
            "need equal, non-empty hypothesis and reference sets (got {} and {})",
            hyps.len(),
            refs.len()
        )));
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if ref_len == 0 {
        return Err(Error::Invalid("references are all empty".into()));
    }

    let mut lo = 1;
    let mut by_position: Vec<Bucket> = POSITION_BUCKETS
        .iter()
        .map(|&hi| {
            let b = Bucket::new(format!("{lo}-{hi}"));
            lo = hi + 1;
            b
        })
        .collect();
    by_position.push(Bucket::new(format!("{lo}+")));
    let mut by_frequency: Vec<Bucket> = FREQUENCY_BUCKETS
        .iter()
        .enumerate()
        .map(|(i, &lo)| match FREQUENCY_BUCKETS.get(i + 1) {
            Some(&next) => Bucket::new(format!("{lo}-{}", next - 1)),
            None => Bucket::new(format!("{lo}+")),
        })
        .collect();

    let mut correct = 0;
    for (h, r) in hyps.iter().zip(refs) {
        for (i, &tok) in r.iter().enumerate() {
            let hit = h.get(i) == Some(&tok);
            correct += hit as usize;
            let pb = &mut by_position[position_bucket(i + 1)];
            pb.total += 1;
            pb.correct += hit as usize;
            let fb = &mut by_frequency[frequency_bucket(train_freq.get(tok).copied().unwrap_or(0))];
            fb.total += 1;
            fb.correct += hit as usize;
        }
    }
    Ok(EvalReport {
        length_ratio: hyp_len as f64 / ref_len as f64,
        accuracy: correct as f64 / ref_len as f64,
        by_position,
        by_frequency,
        bleu: corpus_bleu(hyps, refs)?,
    })
}

fn ngram_counts<T: Eq + std::hash::Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 (uniform weights, clipped counts, brevity penalty)
/// on a 0–100 scale. Zero when any n-gram precision is zero.
pub fn corpus_bleu<T: Eq + std::hash::Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.is_empty() || hyps.len() != refs.len() {
        return Err(Error::Invalid("BLEU needs equal, non-empty hypothesis and reference sets".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if c == 0 || matches.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| (matches[i] as f64 / totals[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * log_p.exp())
}
