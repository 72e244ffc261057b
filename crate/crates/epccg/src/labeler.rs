//! Weak supervision from aspect names alone: pretrain a bidirectional masked
//! LM on the copy texts, mine substitute words by masking each aspect name
//! and pooling the model's predictions, then label every copy by coverage
//! of the substitute sets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{build_prefix_mask, forward, ModelConfig};
use crate::num::Scalar;
use crate::tokenizer::{tokenize, tokenize_to_ids, Vocab, MASK};
use crate::train::{train_step, TrainExample, TrainState};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlmConfig {
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
    /// K: substitute-set size.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_mask_prob() -> f64 {
    0.15
}
fn default_top_k() -> usize {
    50
}

impl MlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Config("mask_prob must be in (0,1)".into()));
        }
        if self.top_k < 1 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        Ok(())
    }
}

/// Number of masked positions for a sequence: ceil(mask_prob * len).
pub fn num_masked(len: usize, mask_prob: f64) -> usize {
    (mask_prob * len as f64).ceil() as usize
}

/// Masked-LM pretraining over the copy texts with a fully bidirectional
/// mask. Returns the trained state and per-epoch mean losses.
pub fn pretrain_mlm<F: Scalar>(
    corpus: &Corpus,
    vocab: &Vocab,
    model_config: &ModelConfig,
    mlm: &MlmConfig,
) -> Result<(TrainState<F>, Vec<f64>)> {
    mlm.validate()?;
    let sequences: Vec<Vec<u32>> = corpus
        .copies
        .iter()
        .map(|c| {
            let mut ids = tokenize_to_ids(&c.text, vocab).ids;
            ids.truncate(model_config.max_positions);
            ids
        })
        .filter(|ids| !ids.is_empty())
        .collect();
    if sequences.is_empty() {
        return Err(Error::Data("corpus tokenizes to no usable sequences".into()));
    }

    let mut state = TrainState::<F>::new(model_config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(mlm.seed);
    let mut epoch_losses = Vec::with_capacity(mlm.epochs);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    for _ in 0..mlm.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(mlm.batch_size) {
            let batch: Vec<TrainExample> = chunk
                .iter()
                .map(|&idx| {
                    let targets = sequences[idx].clone();
                    let n = targets.len();
                    let mut positions: Vec<usize> = (0..n).collect();
                    positions.shuffle(&mut rng);
                    positions.truncate(num_masked(n, mlm.mask_prob));
                    positions.sort_unstable();
                    let mut ids = targets.clone();
                    for &p in &positions {
                        ids[p] = MASK;
                    }
                    Ok(TrainExample {
                        ids,
                        mask: build_prefix_mask(n, n)?,
                        targets,
                        positions,
                    })
                })
                .collect::<Result<_>>()?;
            epoch_loss += train_step(&mut state, &batch, mlm.lr)?.to_f64();
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }
    Ok((state, epoch_losses))
}

/// The top-K tokens the masked LM proposes where an aspect name was masked
/// out; the aspect's lexical signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubstituteSet {
    pub aspect: String,
    /// (token, pooled frequency), frequency descending.
    pub words: Vec<(String, u64)>,
}

impl SubstituteSet {
    pub fn contains(&self, token: &str) -> bool {
        self.words.iter().any(|(w, _)| w == token)
    }
}

/// Predictions pooled per masked position: how many top-`n` lists a token
/// appears in, over every occurrence of the aspect name in the corpus.
const PREDICTIONS_PER_POSITION: usize = 5;

/// Replaces every occurrence of the aspect name's token span with a single
/// [MASK], pools the model's top predictions at the masked positions, and
/// keeps the top-K tokens. The aspect's own tokens, specials and stopwords
/// are never candidates. An aspect that occurs nowhere yields an empty set.
pub fn find_substitutes<F: Scalar>(
    state: &TrainState<F>,
    corpus: &Corpus,
    vocab: &Vocab,
    aspect_name: &str,
    k: usize,
    stopwords: &std::collections::BTreeSet<String>,
) -> Result<SubstituteSet> {
    let aspect_ids = tokenize_to_ids(aspect_name, vocab).ids;
    if aspect_ids.is_empty() {
        return Err(Error::Argument(format!("aspect {aspect_name:?} tokenizes to nothing")));
    }
    let own: HashSet<u32> = aspect_ids.iter().copied().collect();
    let mut pooled: HashMap<u32, u64> = HashMap::new();

    for copy in &corpus.copies {
        let ids = tokenize_to_ids(&copy.text, vocab).ids;
        // Replace each non-overlapping occurrence of the span with one [MASK].
        let mut masked: Vec<u32> = Vec::with_capacity(ids.len());
        let mut mask_positions = Vec::new();
        let mut i = 0;
        while i < ids.len() {
            if i + aspect_ids.len() <= ids.len() && ids[i..i + aspect_ids.len()] == aspect_ids[..] {
                mask_positions.push(masked.len());
                masked.push(MASK);
                i += aspect_ids.len();
            } else {
                masked.push(ids[i]);
                i += 1;
            }
        }
        if mask_positions.is_empty() {
            continue;
        }
        masked.truncate(state.config.max_positions);
        mask_positions.retain(|&p| p < masked.len());
        if mask_positions.is_empty() {
            continue;
        }
        let n = masked.len();
        let logits = forward(&masked, &build_prefix_mask(n, n)?, &state.params, &state.config)?;
        for &pos in &mask_positions {
            let row = logits.row(pos);
            let mut candidates: Vec<u32> = (0..row.len() as u32)
                .filter(|id| {
                    !vocab.is_special(*id)
                        && !own.contains(id)
                        && !stopwords.contains(vocab.id_to_token(*id).unwrap_or(""))
                })
                .collect();
            candidates.sort_by(|&a, &b| {
                row[b as usize].partial_cmp(&row[a as usize]).unwrap().then(a.cmp(&b))
            });
            for &id in candidates.iter().take(PREDICTIONS_PER_POSITION) {
                *pooled.entry(id).or_default() += 1;
            }
        }
    }

    let mut ranked: Vec<(u32, u64)> = pooled.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    let words = ranked
        .into_iter()
        .map(|(id, freq)| (vocab.id_to_token(id).expect("id from logits").to_string(), freq))
        .collect();
    Ok(SubstituteSet { aspect: aspect_name.to_string(), words })
}

/// Weak labels with per-aspect coverage counts for every copy.
#[derive(Debug, Clone)]
pub struct LabeledCorpus {
    /// None = unknown (zero or tied coverage).
    pub labels: Vec<Option<String>>,
    /// Coverage vector per copy, aligned with the substitute-set order.
    pub coverage: Vec<Vec<u64>>,
}

/// Coverage of a token sequence: how many of its tokens (with multiplicity)
/// appear in each substitute set. Unique argmax wins; ties and all-zero
/// coverage yield None.
fn classify_tokens(tokens: &[String], sets: &[SubstituteSet]) -> (Option<String>, Vec<u64>) {
    let coverage: Vec<u64> = sets
        .iter()
        .map(|s| tokens.iter().filter(|t| s.contains(t)).count() as u64)
        .collect();
    let max = coverage.iter().copied().max().unwrap_or(0);
    let label = if max > 0 && coverage.iter().filter(|&&c| c == max).count() == 1 {
        let idx = coverage.iter().position(|&c| c == max).unwrap();
        Some(sets[idx].aspect.clone())
    } else {
        None
    };
    (label, coverage)
}

pub fn classify_text(
    text: &str,
    sets: &[SubstituteSet],
    vocab: &Vocab,
) -> (Option<String>, Vec<u64>) {
    classify_tokens(&tokenize(text, vocab), sets)
}

pub fn label_corpus(
    corpus: &Corpus,
    sets: &[SubstituteSet],
    vocab: &Vocab,
) -> Result<LabeledCorpus> {
    if sets.len() < 2 {
        return Err(Error::Argument("need at least 2 substitute sets".into()));
    }
    let mut labels = Vec::with_capacity(corpus.copies.len());
    let mut coverage = Vec::with_capacity(corpus.copies.len());
    for copy in &corpus.copies {
        let (label, cov) = classify_text(&copy.text, sets, vocab);
        labels.push(label);
        coverage.push(cov);
    }
    Ok(LabeledCorpus { labels, coverage })
}

/// substitutes.json: `{aspect: [[token, freq], ...], ...}`.
pub fn write_substitutes(sets: &[SubstituteSet], path: &Path) -> Result<()> {
    let map: BTreeMap<&str, Vec<(&str, u64)>> = sets
        .iter()
        .map(|s| (s.aspect.as_str(), s.words.iter().map(|(w, f)| (w.as_str(), *f)).collect()))
        .collect();
    fs::write(path, serde_json::to_string_pretty(&map)?)?;
    Ok(())
}

/// Reads substitute sets; `order` fixes the set order (coverage vectors align
/// with it).
pub fn read_substitutes(path: &Path, order: &[String]) -> Result<Vec<SubstituteSet>> {
    let map: BTreeMap<String, Vec<(String, u64)>> =
        serde_json::from_str(&fs::read_to_string(path)?)?;
    let mut sets = Vec::with_capacity(order.len());
    for name in order {
        let words = map
            .get(name)
            .ok_or_else(|| Error::Data(format!("substitutes file has no aspect {name:?}")))?;
        sets.push(SubstituteSet { aspect: name.clone(), words: words.clone() });
    }
    Ok(sets)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRecord {
    pub copy_index: usize,
    pub label: Option<String>,
    pub coverage: BTreeMap<String, u64>,
}

/// labels.jsonl: one `{"copy_index":…, "label":…, "coverage":{aspect:count}}`
/// per copy.
pub fn write_labels(labeled: &LabeledCorpus, sets: &[SubstituteSet], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (i, label) in labeled.labels.iter().enumerate() {
        let coverage: BTreeMap<String, u64> = sets
            .iter()
            .zip(&labeled.coverage[i])
            .map(|(s, &c)| (s.aspect.clone(), c))
            .collect();
        let record = LabelRecord { copy_index: i, label: label.clone(), coverage };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let content = fs::read_to_string(path)?;
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
