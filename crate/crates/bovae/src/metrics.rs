//! Text-level evaluation: sentence BLEU, ROUGE-L, transfer accuracy, the
//! per-sentence style transfer score, and average output length.
//!
//! All values are reported on a 0..100 scale except accuracies and lengths.
//! Pad tokens are stripped before any counting, and a sequence that is empty
//! after stripping scores zero rather than erroring, since greedy decoding
//! can legitimately produce nothing.

use std::collections::HashMap;

use crate::autoencoder::Autoencoder;
use crate::error::{Error, Result};
use crate::heads::LatentHead;
use crate::vocab::{TokenSequence, PAD};

pub const BLEU_MAX_ORDER: usize = 4;

fn content(seq: &TokenSequence) -> Vec<usize> {
    seq.ids.iter().copied().filter(|&id| id != PAD).collect()
}

fn ngram_counts(ids: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if ids.len() >= n {
        for w in ids.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU in [0, 100]: geometric mean of 1..4-gram modified
/// precisions times the brevity penalty. Orders 2..4 use add-1 smoothing;
/// unigram precision is left raw, so fully disjoint sentences score 0.
pub fn sentence_bleu(hyp: &TokenSequence, reference: &TokenSequence) -> f64 {
    let h = content(hyp);
    let r = content(reference);
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=BLEU_MAX_ORDER {
        let hc = ngram_counts(&h, n);
        let rc = ngram_counts(&r, n);
        let total: usize = hc.values().sum();
        let matched: usize = hc
            .iter()
            .map(|(gram, &c)| c.min(rc.get(gram).copied().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let precision = (log_sum / BLEU_MAX_ORDER as f64).exp();
    let bp = if h.len() >= r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / h.len() as f64).exp()
    };
    100.0 * precision * bp
}

fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    // One-row DP over b.
    let mut row = vec![0usize; b.len() + 1];
    for &x in a {
        let mut prev = 0;
        for (j, &y) in b.iter().enumerate() {
            let cur = row[j + 1];
            row[j + 1] = if x == y { prev + 1 } else { row[j + 1].max(row[j]) };
            prev = cur;
        }
    }
    row[b.len()]
}

/// ROUGE-L in [0, 100]: balanced F1 of LCS-based precision and recall.
pub fn rouge_l(hyp: &TokenSequence, reference: &TokenSequence) -> f64 {
    let h = content(hyp);
    let r = content(reference);
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&h, &r);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / h.len() as f64;
    let rec = lcs as f64 / r.len() as f64;
    100.0 * 2.0 * p * rec / (p + rec)
}

/// Fraction of predictions the classifier places in `target` class after
/// encoding. A prediction that is empty (nothing decoded) counts as a miss.
pub fn transfer_accuracy(
    predictions: &[TokenSequence],
    target: usize,
    head: &LatentHead,
    ae: &Autoencoder,
) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut hits = 0usize;
    for pred in predictions {
        if pred.is_empty() {
            continue;
        }
        if head.classify(&ae.latent(pred)?)? == target {
            hits += 1;
        }
    }
    Ok(hits as f64 / predictions.len() as f64)
}

/// One evaluated example; aggregates over records are plain means.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub input: TokenSequence,
    pub prediction: TokenSequence,
    pub reference: Option<TokenSequence>,
    /// Classifier hit on the target class.
    pub accurate: bool,
    /// BLEU between prediction and input.
    pub self_bleu: f64,
    /// ROUGE-L between prediction and reference; 0 when no reference.
    pub rouge: f64,
    pub length: usize,
}

impl EvalRecord {
    /// Computes the text metrics; the accuracy bit is the caller's verdict.
    pub fn new(
        input: TokenSequence,
        prediction: TokenSequence,
        reference: Option<TokenSequence>,
        accurate: bool,
    ) -> Self {
        let self_bleu = sentence_bleu(&prediction, &input);
        let rouge = reference.as_ref().map_or(0.0, |r| rouge_l(&prediction, r));
        let length = prediction.len();
        EvalRecord { input, prediction, reference, accurate, self_bleu, rouge, length }
    }
}

/// Mean over records of accuracy-bit times self-BLEU, the per-sentence
/// transfer score.
pub fn style_score(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let total: f64 =
        records.iter().map(|r| if r.accurate { r.self_bleu } else { 0.0 }).sum();
    Ok(total / records.len() as f64)
}

/// Mean prediction length in tokens; an empty prediction counts as 0.
pub fn avg_length(predictions: &[TokenSequence]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(predictions.iter().map(|p| p.len() as f64).sum::<f64>() / predictions.len() as f64)
}
