//! Phrase-vocabulary construction: frequent-n-gram seed phrases plus a
//! PMI x boundary-entropy mining pass, merged over the base grapheme set.
//!
//! Candidates are contiguous grapheme n-grams inside sentence segments.
//! Plain spaces may occur inside a candidate; sentence punctuation, tabs and
//! newlines are hard boundaries.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::text::{graphemes, is_hard_boundary, is_whitespace, nfc};

#[derive(Debug, Clone)]
pub struct SeedConfig {
    /// Minimum occurrences for a candidate to qualify.
    pub min_count: usize,
    /// Maximum phrase length in grapheme units.
    pub max_len: usize,
    pub stopwords: BTreeSet<String>,
}

impl SeedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_count < 2 {
            return Err(Error::Config("min_count must be >= 2".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhraseSource {
    Seed,
    Mined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhraseEntry {
    pub phrase: String,
    pub score: f64,
    pub source: PhraseSource,
}

/// The merged phrase vocabulary plus the corpus grapheme inventory the
/// tokenizer falls back to.
#[derive(Debug, Clone, Default)]
pub struct PhraseVocab {
    pub entries: Vec<PhraseEntry>,
    pub base_units: BTreeSet<String>,
}

/// One stopword per line; blank lines and `#` comments are skipped.
pub fn load_stopwords(path: &Path) -> Result<BTreeSet<String>> {
    let content = fs::read_to_string(path)?;
    Ok(content
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// The text units the vocabulary is built from: every copy text plus the
/// product fields (title, brand, "name value" per attribute, type, OCR).
pub fn phrase_documents(corpus: &Corpus) -> Vec<String> {
    let mut docs: Vec<String> = corpus.copies.iter().map(|c| nfc(&c.text)).collect();
    for p in &corpus.products {
        docs.push(nfc(&p.title));
        docs.push(nfc(&p.brand));
        docs.push(nfc(&p.product_type));
        for (name, value) in &p.attributes {
            docs.push(nfc(&format!("{name} {value}")));
        }
        if !p.ocr.is_empty() {
            docs.push(nfc(&p.ocr));
        }
    }
    docs
}

fn segments(doc: &str) -> Vec<Vec<&str>> {
    let mut segs = Vec::new();
    let mut cur = Vec::new();
    for g in graphemes(doc) {
        if is_hard_boundary(g) {
            if !cur.is_empty() {
                segs.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(g);
        }
    }
    if !cur.is_empty() {
        segs.push(cur);
    }
    segs
}

struct CandidateIndex {
    counts: HashMap<String, u32>,
    unit_counts: HashMap<String, u64>,
    total_units: u64,
}

fn collect_candidates(docs: &[String], max_len: usize) -> CandidateIndex {
    let mut counts: HashMap<String, u32> = HashMap::new();
    let mut unit_counts: HashMap<String, u64> = HashMap::new();
    let mut total_units = 0u64;
    for doc in docs {
        for seg in segments(doc) {
            for g in &seg {
                if !is_whitespace(g) {
                    *unit_counts.entry((*g).to_string()).or_default() += 1;
                    total_units += 1;
                }
            }
            for start in 0..seg.len() {
                if is_whitespace(seg[start]) {
                    continue;
                }
                let mut cand = String::from(seg[start]);
                for end in start + 1..seg.len().min(start + max_len) {
                    cand.push_str(seg[end]);
                    if is_whitespace(seg[end]) {
                        continue; // may still extend, but never end on a space
                    }
                    *counts.entry(cand.clone()).or_default() += 1;
                }
            }
        }
    }
    CandidateIndex { counts, unit_counts, total_units }
}

fn boundary_words(candidate: &str) -> (&str, &str) {
    let first = candidate.split(' ').next().unwrap_or(candidate);
    let last = candidate.rsplit(' ').next().unwrap_or(candidate);
    (first, last)
}

fn qualifies(candidate: &str, count: u32, config: &SeedConfig) -> bool {
    if (count as usize) < config.min_count {
        return false;
    }
    let (first, last) = boundary_words(candidate);
    !config.stopwords.contains(first) && !config.stopwords.contains(last)
}

/// Qualifying candidates with counts, before maximal-match dedup.
pub fn seed_candidates(corpus: &Corpus, config: &SeedConfig) -> Result<Vec<(String, u32)>> {
    config.validate()?;
    let docs = phrase_documents(corpus);
    let index = collect_candidates(&docs, config.max_len);
    let mut out: Vec<(String, u32)> = index
        .counts
        .into_iter()
        .filter(|(c, n)| qualifies(c, *n, config))
        .collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// Frequent-n-gram seed phrases, sorted by count (desc) then lexicographic.
///
/// Maximal-match dedup: an n-gram whose occurrences all sit inside one fixed
/// longer span (same count) never stands alone. That containment shows up
/// locally as a single fixed non-boundary neighbor grapheme carrying the
/// candidate's full count on one side, which is what we test; segment
/// boundaries count as independent evidence, not as containment.
pub fn extract_seed_phrases(corpus: &Corpus, config: &SeedConfig) -> Result<Vec<String>> {
    let candidates = seed_candidates(corpus, config)?;
    let docs = phrase_documents(corpus);
    let qualifying: BTreeSet<String> = candidates.iter().map(|(c, _)| c.clone()).collect();
    let (left, right) = neighbor_distributions(&docs, &qualifying, config.max_len);

    let absorbed = |cand: &str, count: u32| -> bool {
        for side in [&left, &right] {
            if let Some(neighbors) = side.get(cand) {
                if neighbors.iter().any(|(g, &c)| g != "<b>" && c == count) {
                    return true;
                }
            }
        }
        false
    };
    Ok(candidates
        .into_iter()
        .filter(|(c, n)| !absorbed(c, *n))
        .map(|(c, _)| c)
        .collect())
}

#[derive(Debug, Clone)]
pub struct ScoredPhrase {
    pub phrase: String,
    pub score: f64,
}

#[derive(Debug, Clone)]
#[cfg_attr(not(test), allow(dead_code))]
struct CandidateScore {
    phrase: String,
    pmi: f64,
    h_left: f64,
    h_right: f64,
    branching_max: usize,
    score: f64,
}

fn entropy(counts: &HashMap<String, u32>) -> f64 {
    let total: f64 = counts.values().map(|&c| c as f64).sum();
    let mut h = 0.0;
    for &c in counts.values() {
        let p = c as f64 / total;
        h -= p * p.ln();
    }
    h
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

type NeighborCounts = HashMap<String, HashMap<String, u32>>;

/// Nearest non-space grapheme on each side of every occurrence of each
/// candidate, with "<b>" marking segment boundaries.
fn neighbor_distributions(
    docs: &[String],
    candidates: &BTreeSet<String>,
    max_len: usize,
) -> (NeighborCounts, NeighborCounts) {
    let mut left: NeighborCounts = HashMap::new();
    let mut right: NeighborCounts = HashMap::new();
    for doc in docs {
        for seg in segments(doc) {
            for start in 0..seg.len() {
                if is_whitespace(seg[start]) {
                    continue;
                }
                let mut cand = String::from(seg[start]);
                for end in start + 1..seg.len().min(start + max_len) {
                    cand.push_str(seg[end]);
                    if is_whitespace(seg[end]) {
                        continue;
                    }
                    if let Some(key) = candidates.get(cand.as_str()) {
                        let l = seg[..start]
                            .iter()
                            .rev()
                            .find(|g| !is_whitespace(g))
                            .copied()
                            .unwrap_or("<b>");
                        let r = seg[end + 1..]
                            .iter()
                            .find(|g| !is_whitespace(g))
                            .copied()
                            .unwrap_or("<b>");
                        *left.entry(key.clone()).or_default().entry(l.to_string()).or_default() +=
                            1;
                        *right.entry(key.clone()).or_default().entry(r.to_string()).or_default() +=
                            1;
                    }
                }
            }
        }
    }
    (left, right)
}

fn score_candidates(docs: &[String], config: &SeedConfig, exclude: &BTreeSet<String>) -> Vec<CandidateScore> {
    let index = collect_candidates(docs, config.max_len);
    let qualifying: BTreeSet<String> = index
        .counts
        .iter()
        .filter(|(c, n)| qualifies(c, **n, config) && !exclude.contains(*c))
        .map(|(c, _)| c.clone())
        .collect();
    if qualifying.is_empty() {
        return Vec::new();
    }
    let (left, right) = neighbor_distributions(docs, &qualifying, config.max_len);

    let total = index.total_units as f64;
    let pmi_of = |phrase: &str| -> f64 {
        let p_phrase = index.counts[phrase] as f64 / total;
        let mut denom = 0.0f64;
        for g in graphemes(phrase) {
            if is_whitespace(g) {
                continue;
            }
            denom += (index.unit_counts[g] as f64 / total).ln();
        }
        p_phrase.ln() - denom
    };

    let pmis: Vec<(String, f64)> = qualifying.iter().map(|c| (c.clone(), pmi_of(c))).collect();
    let mean = pmis.iter().map(|(_, p)| p).sum::<f64>() / pmis.len() as f64;
    let var = pmis.iter().map(|(_, p)| (p - mean).powi(2)).sum::<f64>() / pmis.len() as f64;
    let std = var.sqrt();

    pmis.into_iter()
        .map(|(phrase, pmi)| {
            let z = if std > 1e-12 { (pmi - mean) / std } else { 0.0 };
            let lc = &left[phrase.as_str()];
            let rc = &right[phrase.as_str()];
            let (h_left, h_right) = (entropy(lc), entropy(rc));
            let branching_max = lc.len().max(rc.len());
            let factor = if branching_max >= 2 {
                h_left.min(h_right) / (branching_max as f64).ln()
            } else {
                0.0
            };
            let score = (sigmoid(z) * factor).clamp(0.0, 1.0);
            CandidateScore { phrase, pmi, h_left, h_right, branching_max, score }
        })
        .collect()
}

/// Quality-scored phrase mining. Seeds pass through with score 1.0; other
/// candidates score sigmoid(z(PMI)) * min(H_left, H_right)/ln(branching_max)
/// and are dropped below `threshold`.
pub fn mine_phrases(
    corpus: &Corpus,
    seeds: &[String],
    config: &SeedConfig,
    threshold: f64,
) -> Result<Vec<ScoredPhrase>> {
    config.validate()?;
    let docs = phrase_documents(corpus);
    let seed_set: BTreeSet<String> = seeds.iter().cloned().collect();
    let mut out: Vec<ScoredPhrase> = seeds
        .iter()
        .map(|s| ScoredPhrase { phrase: s.clone(), score: 1.0 })
        .collect();
    let mut scored: Vec<ScoredPhrase> = score_candidates(&docs, config, &seed_set)
        .into_iter()
        .filter(|c| c.score >= threshold)
        .map(|c| ScoredPhrase { phrase: c.phrase, score: c.score })
        .collect();
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.phrase.cmp(&b.phrase)));
    out.extend(scored);
    Ok(out)
}

/// Merges seeds and mined phrases (dedup keeps the max score, seed label
/// wins on ties) over the corpus grapheme inventory.
pub fn build_vocab(corpus: &Corpus, seeds: &[String], mined: &[ScoredPhrase]) -> PhraseVocab {
    let mut base_units = BTreeSet::new();
    for doc in phrase_documents(corpus) {
        for g in graphemes(&doc) {
            if !is_whitespace(g) {
                base_units.insert(g.to_string());
            }
        }
    }
    let mut best: HashMap<String, PhraseEntry> = HashMap::new();
    for s in seeds {
        best.insert(
            s.clone(),
            PhraseEntry { phrase: s.clone(), score: 1.0, source: PhraseSource::Seed },
        );
    }
    for m in mined {
        match best.get(&m.phrase) {
            Some(e) if e.score >= m.score => {}
            _ => {
                best.insert(
                    m.phrase.clone(),
                    PhraseEntry {
                        phrase: m.phrase.clone(),
                        score: m.score,
                        source: PhraseSource::Mined,
                    },
                );
            }
        }
    }
    let mut entries: Vec<PhraseEntry> = best.into_values().collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.phrase.cmp(&b.phrase)));
    PhraseVocab { entries, base_units }
}

/// One line per entry: `phrase<TAB>score<TAB>source`.
pub fn write_vocab_tsv(vocab: &PhraseVocab, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in &vocab.entries {
        let source = match e.source {
            PhraseSource::Seed => "seed",
            PhraseSource::Mined => "mined",
        };
        writeln!(w, "{}\t{}\t{}", e.phrase, e.score, source)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_vocab_tsv(path: &Path) -> Result<Vec<PhraseEntry>> {
    let content = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let err = |m: &str| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: m.to_string(),
        };
        if parts.len() != 3 {
            return Err(err("expected phrase<TAB>score<TAB>source"));
        }
        let score: f64 = parts[1].parse().map_err(|_| err("bad score"))?;
        let source = match parts[2] {
            "seed" => PhraseSource::Seed,
            "mined" => PhraseSource::Mined,
            _ => return Err(err("source must be seed or mined")),
        };
        entries.push(PhraseEntry { phrase: parts[0].to_string(), score, source });
    }
    Ok(entries)
}
