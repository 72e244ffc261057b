//! The controllable generator: input packing under three control-code
//! patterns and five prompt layouts, prefix-LM fine-tuning with target-side
//! masking, and iterative mask-predict-append decoding with per-item rng.
//!
//! Packed layout (name-code, basic): [SOS] T [SEP] I [SEP] X [EOS], where
//! the product fields inside I are separated by single [SEP]s and X is the
//! target copy. Prompt variants wrap fields in literal prefixes ("aspect:",
//! "title:", ...). The discrete pattern carries no aspect text; a learned
//! per-aspect embedding (the reserved aspect token's row) is prepended at
//! position 0 when the example is materialized for the model.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ProductRecord};
use crate::error::{Error, Result};
use crate::labeler::num_masked;
use crate::lda::AspectSet;
use crate::model::{build_prefix_mask, forward};
use crate::num::Scalar;
use crate::tokenizer::{decode as decode_ids, tokenize_to_ids, TokenSeq, Vocab, EOS, MASK, SEP, SOS};
use crate::train::{train_step, TrainExample, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlPattern {
    /// Learned per-aspect embedding prepended at position 0.
    DiscreteCode,
    /// Reserved [ASPECT_m] token in place of the aspect text.
    LabelCode,
    /// The aspect name as ordinary text.
    NameCode,
}

impl fmt::Display for ControlPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ControlPattern::DiscreteCode => "discrete_code",
            ControlPattern::LabelCode => "label_code",
            ControlPattern::NameCode => "name_code",
        };
        f.write_str(s)
    }
}

impl FromStr for ControlPattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete_code" => Ok(ControlPattern::DiscreteCode),
            "label_code" => Ok(ControlPattern::LabelCode),
            "name_code" => Ok(ControlPattern::NameCode),
            _ => Err(Error::Config(format!("unknown control pattern {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    Basic,
    PlainNosep,
    PlainSep,
    AdvanceNosep,
    AdvanceSep,
}

impl PromptVariant {
    fn uses_sep(&self) -> bool {
        matches!(self, PromptVariant::Basic | PromptVariant::PlainSep | PromptVariant::AdvanceSep)
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PromptVariant::Basic => "basic",
            PromptVariant::PlainNosep => "plain_nosep",
            PromptVariant::PlainSep => "plain_sep",
            PromptVariant::AdvanceNosep => "advance_nosep",
            PromptVariant::AdvanceSep => "advance_sep",
        };
        f.write_str(s)
    }
}

impl FromStr for PromptVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(PromptVariant::Basic),
            "plain_nosep" => Ok(PromptVariant::PlainNosep),
            "plain_sep" => Ok(PromptVariant::PlainSep),
            "advance_nosep" => Ok(PromptVariant::AdvanceNosep),
            "advance_sep" => Ok(PromptVariant::AdvanceSep),
            _ => Err(Error::Config(format!("unknown prompt variant {s:?}"))),
        }
    }
}

/// Literal field prefixes used by the prompt variants; added to the
/// vocabulary as phrases at vocab-build time.
pub const PROMPT_PREFIXES: [&str; 8] =
    ["aspect:", "product:", "title:", "brand:", "attribute:", "type:", "OCR:", "copywriting:"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedExample {
    pub ids: TokenSeq,
    /// Source length including [SOS] up to and including the final separator
    /// (or prompt cue) before the target.
    pub prefix_len: usize,
    /// Target token range; starts at `prefix_len`, ends with [EOS] when a
    /// copy text is present, empty for inference packing.
    pub target_span: Range<usize>,
    /// Aspect slot for the discrete pattern.
    pub aspect_embedding_index: Option<usize>,
}

impl PackedExample {
    /// Ids as consumed by the model: the discrete pattern prepends the
    /// reserved aspect token at position 0 (its embedding is the learned
    /// one-hot control vector).
    pub fn runtime_ids(&self, vocab: &Vocab) -> Result<(Vec<u32>, usize, Range<usize>)> {
        match self.aspect_embedding_index {
            None => Ok((self.ids.ids.clone(), self.prefix_len, self.target_span.clone())),
            Some(m) => {
                let mut ids = Vec::with_capacity(self.ids.ids.len() + 1);
                ids.push(vocab.aspect_token_id(m)?);
                ids.extend_from_slice(&self.ids.ids);
                Ok((
                    ids,
                    self.prefix_len + 1,
                    self.target_span.start + 1..self.target_span.end + 1,
                ))
            }
        }
    }
}

fn render_attributes(record: &ProductRecord) -> String {
    record
        .attributes
        .iter()
        .map(|(k, v)| format!("{k} {v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

struct Segment {
    prefix: Option<&'static str>,
    tokens: Vec<u32>,
    /// Truncation rank: 2 = ocr (dropped first), 1 = attributes, 0 = fixed.
    truncation_rank: u8,
}

/// Packs one (product, aspect[, copy]) into a model input. Empty fields are
/// omitted together with their prefix and separator. On overflow the OCR
/// tokens are dropped first (right to left), then the attribute tail; the
/// aspect, title, brand, type and target are never truncated.
#[allow(clippy::too_many_arguments)]
pub fn pack_input(
    record: &ProductRecord,
    aspect_name: &str,
    copy_text: Option<&str>,
    pattern: ControlPattern,
    prompt: PromptVariant,
    vocab: &Vocab,
    aspects: &AspectSet,
    max_positions: usize,
) -> Result<PackedExample> {
    let aspect_idx = aspects
        .index_of(aspect_name)
        .ok_or_else(|| Error::Argument(format!("unknown aspect {aspect_name:?}")))?;
    if pattern == ControlPattern::LabelCode {
        vocab.aspect_token_id(aspect_idx)?;
    }

    let tok = |text: &str| tokenize_to_ids(text, vocab).ids;
    let aspect_tokens = match pattern {
        ControlPattern::NameCode => tok(aspect_name),
        ControlPattern::LabelCode => vec![vocab.aspect_token_id(aspect_idx)?],
        ControlPattern::DiscreteCode => Vec::new(),
    };

    let attrs = render_attributes(record);
    let mut segments: Vec<Segment> = Vec::new();
    let mut push = |prefix: Option<&'static str>, tokens: Vec<u32>, rank: u8| {
        if !tokens.is_empty() {
            segments.push(Segment { prefix, tokens, truncation_rank: rank });
        }
    };
    match prompt {
        PromptVariant::Basic => {
            push(None, aspect_tokens, 0);
            push(None, tok(&record.title), 0);
            push(None, tok(&record.brand), 0);
            push(None, tok(&attrs), 1);
            push(None, tok(&record.ocr), 2);
        }
        PromptVariant::PlainNosep | PromptVariant::PlainSep => {
            push(Some("aspect:"), aspect_tokens, 0);
            let mut product = tok(&record.title);
            product.extend(tok(&record.brand));
            product.extend(tok(&attrs));
            product.extend(tok(&record.product_type));
            product.extend(tok(&record.ocr));
            push(Some("product:"), product, 0);
        }
        PromptVariant::AdvanceNosep | PromptVariant::AdvanceSep => {
            push(Some("aspect:"), aspect_tokens, 0);
            push(Some("title:"), tok(&record.title), 0);
            push(Some("brand:"), tok(&record.brand), 0);
            push(Some("attribute:"), tok(&attrs), 1);
            push(Some("type:"), tok(&record.product_type), 0);
            push(Some("OCR:"), tok(&record.ocr), 2);
        }
    }

    let target: Vec<u32> = match copy_text {
        Some(text) => {
            let mut t = tok(text);
            t.push(EOS);
            t
        }
        None => Vec::new(),
    };

    let prefix_token = |name: &str| -> u32 {
        vocab.token_to_id(name).unwrap_or(crate::tokenizer::UNK)
    };
    let assemble = |segments: &[Segment]| -> Vec<u32> {
        let mut ids = vec![SOS];
        for seg in segments {
            if let Some(p) = seg.prefix {
                ids.push(prefix_token(p));
            }
            ids.extend_from_slice(&seg.tokens);
            if prompt.uses_sep() {
                ids.push(SEP);
            }
        }
        if !prompt.uses_sep() && copy_text_cue_needed(prompt) {
            // no separators at all in *_nosep; the cue below still applies
        }
        if copy_text_cue_needed(prompt) {
            ids.push(prefix_token("copywriting:"));
        }
        ids
    };

    let mut source = assemble(&segments);
    let budget = max_positions.saturating_sub(target.len());
    for rank in [2u8, 1u8] {
        while source.len() > budget {
            let Some(seg) = segments.iter_mut().rev().find(|s| s.truncation_rank == rank && !s.tokens.is_empty())
            else {
                break;
            };
            seg.tokens.pop();
            if seg.tokens.is_empty() {
                segments.retain(|s| !(s.truncation_rank == rank && s.tokens.is_empty()));
            }
            source = assemble(&segments);
        }
    }
    if source.len() > budget {
        return Err(Error::Length(format!(
            "packed example needs {} tokens after truncation, max_positions is {max_positions}",
            source.len() + target.len()
        )));
    }

    let prefix_len = source.len();
    let mut ids = source;
    ids.extend_from_slice(&target);
    let target_span = prefix_len..ids.len();
    Ok(PackedExample {
        ids: TokenSeq { ids },
        prefix_len,
        target_span,
        aspect_embedding_index: match pattern {
            ControlPattern::DiscreteCode => Some(aspect_idx),
            _ => None,
        },
    })
}

fn copy_text_cue_needed(prompt: PromptVariant) -> bool {
    !matches!(prompt, PromptVariant::Basic)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Decode {
    Greedy,
    TopK { k: usize, temperature: f64 },
}

impl fmt::Display for Decode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decode::Greedy => f.write_str("greedy"),
            Decode::TopK { k, temperature } => write!(f, "topk:{k}:{temperature}"),
        }
    }
}

impl FromStr for Decode {
    type Err = Error;
    /// `greedy` or `topk:K:T`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "greedy" {
            return Ok(Decode::Greedy);
        }
        if let Some(rest) = s.strip_prefix("topk:") {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() == 2 {
                let k = parts[0].parse().map_err(|_| Error::Config(format!("bad top-k in {s:?}")))?;
                let temperature = parts[1]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad temperature in {s:?}")))?;
                return Ok(Decode::TopK { k, temperature });
            }
        }
        Err(Error::Config(format!("decode must be greedy or topk:K:T, got {s:?}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub max_new_tokens: usize,
    pub decode: Decode,
    #[serde(default)]
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be >= 1".into()));
        }
        if let Decode::TopK { k, temperature } = self.decode {
            if k == 0 {
                return Err(Error::Config("top-k must be >= 1".into()));
            }
            if temperature <= 0.0 {
                return Err(Error::Config("temperature must be > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    #[serde(default = "default_target_mask_prob")]
    pub target_mask_prob: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub pattern: ControlPattern,
    pub prompt: PromptVariant,
    #[serde(default)]
    pub seed: u64,
}

fn default_target_mask_prob() -> f64 {
    0.3
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_mask_prob > 0.0 && self.target_mask_prob < 1.0) {
            return Err(Error::Config("target_mask_prob must be in (0,1)".into()));
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

/// Masked target positions for one example: ceil(p * target_len) positions
/// drawn from the target span only (the [EOS] included).
fn sample_target_positions(
    span: &Range<usize>,
    prob: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut positions: Vec<usize> = span.clone().collect();
    positions.shuffle(rng);
    positions.truncate(num_masked(span.len(), prob));
    positions.sort_unstable();
    positions
}

/// Prefix-LM fine-tuning with target-side masked recovery. Labels come from
/// `labels` (one per copy, None = unknown, excluded from training).
#[allow(clippy::too_many_arguments)]
pub fn finetune<F: Scalar>(
    mut state: TrainState<F>,
    corpus: &Corpus,
    labels: &[Option<String>],
    aspects: &AspectSet,
    vocab: &Vocab,
    config: &FinetuneConfig,
) -> Result<(TrainState<F>, Vec<f64>)> {
    config.validate()?;
    if labels.len() != corpus.copies.len() {
        return Err(Error::Argument(format!(
            "{} labels for {} copies",
            labels.len(),
            corpus.copies.len()
        )));
    }
    let sku_index = corpus.sku_index();
    let mut packed: Vec<(Vec<u32>, usize, Range<usize>)> = Vec::new();
    for (copy, label) in corpus.copies.iter().zip(labels) {
        let Some(label) = label else { continue };
        let product = &corpus.products[sku_index[copy.sku_id.as_str()]];
        let example = pack_input(
            product,
            label,
            Some(&copy.text),
            config.pattern,
            config.prompt,
            vocab,
            aspects,
            state.config.max_positions,
        )?;
        packed.push(example.runtime_ids(vocab)?);
    }
    if packed.is_empty() {
        return Err(Error::Data("no labeled copies to fine-tune on".into()));
    }

    state.meta.pattern = Some(config.pattern.to_string());
    state.meta.prompt = Some(config.prompt.to_string());
    state.meta.aspect_names = aspects.names().iter().map(|s| s.to_string()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..packed.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainExample> = chunk
                .iter()
                .map(|&i| {
                    let (ids, prefix, span) = &packed[i];
                    let positions = sample_target_positions(span, config.target_mask_prob, &mut rng);
                    let mut masked = ids.clone();
                    for &p in &positions {
                        masked[p] = MASK;
                    }
                    Ok(TrainExample {
                        ids: masked,
                        mask: build_prefix_mask(*prefix, ids.len())?,
                        targets: ids.clone(),
                        positions,
                    })
                })
                .collect::<Result<_>>()?;
            epoch_loss += train_step(&mut state, &batch, config.lr)?.to_f64();
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }
    Ok((state, epoch_losses))
}

fn select_token<F: Scalar>(row: &[F], decode: Decode, rng: &mut ChaCha8Rng) -> u32 {
    let mut order: Vec<u32> = (0..row.len() as u32).collect();
    order.sort_by(|&a, &b| {
        row[b as usize].partial_cmp(&row[a as usize]).unwrap().then(a.cmp(&b))
    });
    match decode {
        Decode::Greedy => order[0],
        Decode::TopK { k, temperature } => {
            let k = k.min(order.len());
            let inv_t = 1.0 / temperature;
            let top = &order[..k];
            let max = row[top[0] as usize].to_f64();
            let weights: Vec<f64> = top
                .iter()
                .map(|&id| ((row[id as usize].to_f64() - max) * inv_t).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (&id, &w) in top.iter().zip(&weights) {
                u -= w;
                if u <= 0.0 {
                    return id;
                }
            }
            top[k - 1]
        }
    }
}

/// Iterative mask-predict-append decoding: append [MASK], run the prefix-LM
/// forward, take the distribution at the masked slot, commit a token; stop on
/// [EOS], `max_new_tokens`, or the position budget.
#[allow(clippy::too_many_arguments)]
pub fn generate<F: Scalar>(
    state: &TrainState<F>,
    record: &ProductRecord,
    aspect_name: &str,
    pattern: ControlPattern,
    prompt: PromptVariant,
    gen: &GenConfig,
    vocab: &Vocab,
    aspects: &AspectSet,
) -> Result<String> {
    gen.validate()?;
    if state.meta.pattern.as_deref() != Some(pattern.to_string().as_str())
        || state.meta.prompt.as_deref() != Some(prompt.to_string().as_str())
    {
        return Err(Error::Config(format!(
            "model was fine-tuned for pattern={:?} prompt={:?}, requested {pattern}/{prompt}",
            state.meta.pattern, state.meta.prompt
        )));
    }
    let example = pack_input(
        record,
        aspect_name,
        None,
        pattern,
        prompt,
        vocab,
        aspects,
        state.config.max_positions,
    )?;
    let (mut ids, prefix_len, _) = example.runtime_ids(vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(gen.seed);

    let mut generated: Vec<u32> = Vec::new();
    for _ in 0..gen.max_new_tokens {
        if ids.len() >= state.config.max_positions {
            break;
        }
        ids.push(MASK);
        let mask = build_prefix_mask(prefix_len, ids.len())?;
        let logits = forward(&ids, &mask, &state.params, &state.config)?;
        let token = select_token(logits.row(ids.len() - 1), gen.decode, &mut rng);
        *ids.last_mut().unwrap() = token;
        if token == EOS {
            break;
        }
        generated.push(token);
    }
    decode_ids(&TokenSeq { ids: generated }, vocab)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub sku_id: String,
    pub aspect: String,
    pub text: String,
    pub pattern: String,
    pub prompt: String,
    pub decode: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationError {
    pub sku_id: String,
    pub aspect: String,
    pub error: String,
}

/// Cartesian product of records x aspects in deterministic order
/// (record-major). Per-item failures are collected, not fatal. Each item
/// decodes with its own rng seeded from the base seed and its index.
#[allow(clippy::too_many_arguments)]
pub fn batch_generate<F: Scalar>(
    state: &TrainState<F>,
    records: &[ProductRecord],
    aspects: &AspectSet,
    pattern: ControlPattern,
    prompt: PromptVariant,
    gen: &GenConfig,
    vocab: &Vocab,
) -> (Vec<GenerationRecord>, Vec<GenerationError>) {
    let mut outputs = Vec::new();
    let mut errors = Vec::new();
    let mut index = 0u64;
    for record in records {
        for aspect in &aspects.aspects {
            let item_gen = GenConfig {
                max_new_tokens: gen.max_new_tokens,
                decode: gen.decode,
                seed: gen.seed.wrapping_add(index),
            };
            index += 1;
            match generate(state, record, &aspect.name, pattern, prompt, &item_gen, vocab, aspects)
            {
                Ok(text) => outputs.push(GenerationRecord {
                    sku_id: record.sku_id.clone(),
                    aspect: aspect.name.clone(),
                    text,
                    pattern: pattern.to_string(),
                    prompt: prompt.to_string(),
                    decode: gen.decode.to_string(),
                    seed: item_gen.seed,
                }),
                Err(e) => errors.push(GenerationError {
                    sku_id: record.sku_id.clone(),
                    aspect: aspect.name.clone(),
                    error: e.to_string(),
                }),
            }
        }
    }
    (outputs, errors)
}

pub fn write_generations(records: &[GenerationRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
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
