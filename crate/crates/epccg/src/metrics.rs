//! Machine evaluation: sentence and corpus BLEU with brevity penalty,
//! ROUGE-1/2/L, and the aspect-match rate. All metrics consume tokenizer
//! output, never raw strings.
//!
//! Smoothing convention (frozen by the oracle tests): clipped precisions use
//! add-one smoothing for orders >= 2 when the count or the denominator is
//! zero; a zero unigram match count short-circuits to 0.

use std::collections::HashMap;
use std::fs;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeler::{classify_text, SubstituteSet};
use crate::tokenizer::Vocab;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n && n > 0 {
        for w in tokens.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and the candidate n-gram total for one order.
fn clipped_counts<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> (u64, u64) {
    let cand = ngram_counts(candidate, n);
    let reference = ngram_counts(reference, n);
    let total: u64 = cand.values().sum();
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, total)
}

fn precision(order: usize, matched: u64, total: u64) -> Option<f64> {
    if order == 1 && matched == 0 {
        return None; // nothing matched at all
    }
    if matched == 0 || total == 0 {
        Some((matched + 1) as f64 / (total + 1) as f64)
    } else {
        Some(matched as f64 / total as f64)
    }
}

fn brevity_penalty(candidate_len: u64, reference_len: u64) -> f64 {
    if candidate_len < reference_len {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    } else {
        1.0
    }
}

/// Sentence BLEU-n: geometric mean of clipped modified precisions for orders
/// 1..=n times the brevity penalty. An empty candidate scores 0.
pub fn bleu_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::Argument("bleu order must be >= 1".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for i in 1..=n {
        let (matched, total) = clipped_counts(candidate, reference, i);
        match precision(i, matched, total) {
            Some(p) => log_sum += p.ln(),
            None => return Ok(0.0),
        }
    }
    let geo = (log_sum / n as f64).exp();
    Ok(geo * brevity_penalty(candidate.len() as u64, reference.len() as u64))
}

/// Corpus-level BLEU in [0,100]: clipped counts are summed across the corpus
/// before the precisions are taken (not a mean of sentence scores), with a
/// corpus-level brevity penalty.
pub fn corpus_bleu<T: Eq + Hash>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    corpus_bleu_with_counts(pairs).map(|(score, _)| score)
}

pub fn corpus_bleu_with_counts<T: Eq + Hash>(
    pairs: &[(Vec<T>, Vec<T>)],
) -> Result<(f64, Vec<[u64; 2]>)> {
    if pairs.is_empty() {
        return Err(Error::Argument("corpus_bleu needs at least one pair".into()));
    }
    let mut tallies = vec![[0u64; 2]; 4];
    let mut cand_len = 0u64;
    let mut ref_len = 0u64;
    for (cand, reference) in pairs {
        cand_len += cand.len() as u64;
        ref_len += reference.len() as u64;
        for (i, tally) in tallies.iter_mut().enumerate() {
            let (m, t) = clipped_counts(cand, reference, i + 1);
            tally[0] += m;
            tally[1] += t;
        }
    }
    if cand_len == 0 {
        return Ok((0.0, tallies));
    }
    let mut log_sum = 0.0;
    for (i, tally) in tallies.iter().enumerate() {
        match precision(i + 1, tally[0], tally[1]) {
            Some(p) => log_sum += p.ln(),
            None => return Ok((0.0, tallies)),
        }
    }
    let geo = (log_sum / 4.0).exp();
    Ok((100.0 * geo * brevity_penalty(cand_len, ref_len), tallies))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rouge {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Rouge {
    fn from_pr(p: f64, r: f64) -> Rouge {
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        Rouge { precision: p, recall: r, f1 }
    }

    fn zero() -> Rouge {
        Rouge { precision: 0.0, recall: 0.0, f1: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeVariant {
    One,
    Two,
    L,
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1/2 (clipped n-gram overlap) or ROUGE-L (longest common
/// subsequence), as precision/recall/F1. Two empty inputs score zero.
pub fn rouge<T: Eq + Hash>(candidate: &[T], reference: &[T], variant: RougeVariant) -> Rouge {
    match variant {
        RougeVariant::One | RougeVariant::Two => {
            let n = if variant == RougeVariant::One { 1 } else { 2 };
            let (matched, cand_total) = clipped_counts(candidate, reference, n);
            let ref_total = reference.len().saturating_sub(n - 1) as u64;
            if cand_total == 0 || ref_total == 0 {
                return Rouge::zero();
            }
            Rouge::from_pr(matched as f64 / cand_total as f64, matched as f64 / ref_total as f64)
        }
        RougeVariant::L => {
            if candidate.is_empty() || reference.is_empty() {
                return Rouge::zero();
            }
            let lcs = lcs_len(candidate, reference) as f64;
            Rouge::from_pr(lcs / candidate.len() as f64, lcs / reference.len() as f64)
        }
    }
}

/// Fraction of generations whose classifier-predicted aspect equals the
/// requested one.
pub fn aspect_match_rate(
    generations: &[(String, String)], // (text, desired aspect)
    sets: &[SubstituteSet],
    vocab: &Vocab,
) -> Result<f64> {
    if generations.is_empty() {
        return Err(Error::Argument("aspect_match_rate needs at least one generation".into()));
    }
    let matched = generations
        .iter()
        .filter(|(text, desired)| {
            classify_text(text, sets, vocab).0.as_deref() == Some(desired.as_str())
        })
        .count();
    Ok(matched as f64 / generations.len() as f64)
}

/// The full machine-evaluation report, mirroring the metric columns of the
/// generation-quality tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub rouge_1: Rouge,
    pub rouge_2: Rouge,
    pub rouge_l: Rouge,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub corpus_bleu: f64,
    pub aspect_match: f64,
    /// Corpus-level clipped [matched, total] tallies for orders 1..4.
    pub counts: Vec<[u64; 2]>,
}

/// Sentence metrics averaged over pairs plus the corpus-level BLEU.
pub fn evaluate<T: Eq + Hash>(pairs: &[(Vec<T>, Vec<T>)], aspect_match: f64) -> Result<ScoreReport> {
    if pairs.is_empty() {
        return Err(Error::Argument("evaluate needs at least one pair".into()));
    }
    let n = pairs.len() as f64;
    let mut bleu = [0.0f64; 4];
    let mut rouges = [[0.0f64; 3]; 3];
    for (cand, reference) in pairs {
        for (i, b) in bleu.iter_mut().enumerate() {
            *b += bleu_n(cand, reference, i + 1)?;
        }
        for (slot, variant) in
            [RougeVariant::One, RougeVariant::Two, RougeVariant::L].into_iter().enumerate()
        {
            let r = rouge(cand, reference, variant);
            rouges[slot][0] += r.precision;
            rouges[slot][1] += r.recall;
            rouges[slot][2] += r.f1;
        }
    }
    let (corpus, counts) = corpus_bleu_with_counts(pairs)?;
    let mean_rouge = |slot: usize| Rouge {
        precision: rouges[slot][0] / n,
        recall: rouges[slot][1] / n,
        f1: rouges[slot][2] / n,
    };
    Ok(ScoreReport {
        config_hash: None,
        rouge_1: mean_rouge(0),
        rouge_2: mean_rouge(1),
        rouge_l: mean_rouge(2),
        bleu_1: bleu[0] / n,
        bleu_2: bleu[1] / n,
        bleu_3: bleu[2] / n,
        bleu_4: bleu[3] / n,
        corpus_bleu: corpus,
        aspect_match,
        counts,
    })
}

pub fn write_report(report: &ScoreReport, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}
