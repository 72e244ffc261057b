//! End-to-end orchestration: synth -> vocab -> aspects -> pretrain -> label
//! -> train -> generate -> postprocess -> eval, with all artifacts written
//! under one output directory and every stage seeded from the global seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    generate_synthetic, load_corpus, split_with_indices, write_corpus, Corpus, SynthSpec,
};
use crate::error::{Error, Result};
use crate::generator::{
    finetune, FinetuneConfig, GenConfig, GenerationRecord, write_generations, PROMPT_PREFIXES,
};
use crate::labeler::{
    find_substitutes, label_corpus, pretrain_mlm, write_labels, write_substitutes, MlmConfig,
    SubstituteSet,
};
use crate::lda::{
    extract_aspects, prepare_documents, refine, sweep, CoherenceReport, LdaConfig,
    RefinementConfig,
};
use crate::metrics::{aspect_match_rate, evaluate, write_report};
use crate::model::ModelConfig;
use crate::phrase::{
    build_vocab, extract_seed_phrases, load_stopwords, mine_phrases, write_vocab_tsv, SeedConfig,
};
use crate::postprocess::{correct, filter_by_aspect, load_patterns, KnowledgeBase};
use crate::tokenizer::{tokenize, Vocab};

/// Model dimensions without the vocab size (filled in once the vocabulary
/// is built) or seed (derived from the global seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub ff_size: usize,
    pub max_positions: usize,
    #[serde(default)]
    pub dropout_prob: f64,
}

impl ModelShape {
    pub fn to_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            hidden_size: self.hidden_size,
            ff_size: self.ff_size,
            vocab_size,
            max_positions: self.max_positions,
            dropout_prob: self.dropout_prob,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdaStage {
    /// Topic counts to sweep over.
    pub grid: Vec<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_lda_beta")]
    pub beta: f64,
    #[serde(default = "default_lda_iterations")]
    pub iterations: usize,
    #[serde(default = "default_lda_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_top_j")]
    pub top_j: usize,
}

fn default_lda_beta() -> f64 {
    0.01
}
fn default_lda_iterations() -> usize {
    500
}
fn default_lda_burn_in() -> usize {
    100
}
fn default_top_j() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabStage {
    pub min_count: usize,
    pub max_len: usize,
    #[serde(default = "default_mine_threshold")]
    pub mine_threshold: f64,
    #[serde(default = "default_aspect_slots")]
    pub aspect_slots: usize,
}

fn default_mine_threshold() -> f64 {
    0.5
}
pub fn default_aspect_slots() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Synthetic corpus spec; alternatively point `corpus_dir` at data.
    #[serde(default)]
    pub synth_spec: Option<PathBuf>,
    #[serde(default)]
    pub corpus_dir: Option<PathBuf>,
    pub stopwords: PathBuf,
    #[serde(default = "default_fractions")]
    pub split: (f64, f64, f64),
    pub vocab: VocabStage,
    pub lda: LdaStage,
    #[serde(default)]
    pub refine: Option<PathBuf>,
    pub model: ModelShape,
    pub mlm: MlmConfig,
    pub finetune: FinetuneConfig,
    pub generate: GenConfig,
    #[serde(default)]
    pub patterns: Option<PathBuf>,
}

fn default_fractions() -> (f64, f64, f64) {
    (0.8, 0.1, 0.1)
}

impl PipelineConfig {
    /// Loads and re-roots all relative paths against the config's directory.
    pub fn load(path: &Path) -> Result<(PipelineConfig, String)> {
        let bytes = fs::read(path)?;
        let mut config: PipelineConfig = serde_json::from_slice(&bytes)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let reroot = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        reroot(&mut config.out_dir);
        if let Some(p) = &mut config.synth_spec {
            reroot(p);
        }
        if let Some(p) = &mut config.corpus_dir {
            reroot(p);
        }
        reroot(&mut config.stopwords);
        if let Some(p) = &mut config.refine {
            reroot(p);
        }
        if let Some(p) = &mut config.patterns {
            reroot(p);
        }
        Ok((config, hex_digest(&bytes)))
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Builds the tokenizer vocabulary from a corpus: frequent seed phrases,
/// mined phrases, prompt prefixes and aspect slots.
pub fn build_tokenizer_vocab(
    corpus: &Corpus,
    seed_config: &SeedConfig,
    mine_threshold: f64,
    aspect_slots: usize,
) -> Result<(Vocab, crate::phrase::PhraseVocab)> {
    let seeds = extract_seed_phrases(corpus, seed_config)?;
    let mined = mine_phrases(corpus, &seeds, seed_config, mine_threshold)?;
    let phrase_vocab = build_vocab(corpus, &seeds, &mined);
    let prefixes: Vec<String> = PROMPT_PREFIXES.iter().map(|p| p.to_string()).collect();
    let vocab = Vocab::build(&phrase_vocab, aspect_slots, &prefixes);
    Ok((vocab, phrase_vocab))
}

/// Knowledge base derived from product records: attributes verbatim.
pub fn kb_from_products(corpus: &Corpus) -> KnowledgeBase {
    let mut kb = KnowledgeBase::default();
    for p in &corpus.products {
        let attrs: BTreeMap<String, String> =
            p.attributes.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        kb.entries.insert(p.sku_id.clone(), attrs);
    }
    kb
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    config_hash: &'a str,
    seed: u64,
    artifacts: Vec<String>,
}

#[derive(Debug, Serialize)]
struct PostprocessRecord {
    index: usize,
    sku_id: String,
    aspect: String,
    corrections: crate::postprocess::CorrectionReport,
    kept: bool,
    predicted_aspect: Option<String>,
}

#[derive(Debug, Serialize)]
struct LossLog {
    pretrain: Vec<f64>,
    finetune: Vec<f64>,
}

/// Runs the whole pipeline. Every stage consumes only artifact files or
/// values derived from them; two runs with the same config and seed produce
/// byte-identical artifacts.
pub fn run_pipeline(config_path: &Path, seed_override: Option<u64>) -> Result<()> {
    let (mut config, mut config_hash) = PipelineConfig::load(config_path)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
        config_hash = hex_digest(format!("{config_hash}:{seed}").as_bytes());
    }
    let out = config.out_dir.clone();
    fs::create_dir_all(&out)?;
    let seed = config.seed;

    // Corpus.
    let corpus_dir = out.join("corpus");
    let corpus = match (&config.synth_spec, &config.corpus_dir) {
        (Some(spec_path), _) => {
            let mut spec = SynthSpec::load(spec_path)?;
            spec.seed = seed;
            let (corpus, gold) = generate_synthetic(&spec)?;
            write_corpus(&corpus, &corpus_dir)?;
            let gold_map: BTreeMap<String, String> =
                gold.iter().enumerate().map(|(i, a)| (i.to_string(), a.clone())).collect();
            fs::write(corpus_dir.join("gold.json"), serde_json::to_string_pretty(&gold_map)?)?;
            corpus
        }
        (None, Some(dir)) => load_corpus(dir)?,
        (None, None) => {
            return Err(Error::Config("pipeline needs synth_spec or corpus_dir".into()))
        }
    };

    // Vocabulary.
    let stopwords = load_stopwords(&config.stopwords)?;
    let seed_config = SeedConfig {
        min_count: config.vocab.min_count,
        max_len: config.vocab.max_len,
        stopwords: stopwords.clone(),
    };
    let (vocab, phrase_vocab) = build_tokenizer_vocab(
        &corpus,
        &seed_config,
        config.vocab.mine_threshold,
        config.vocab.aspect_slots,
    )?;
    write_vocab_tsv(&phrase_vocab, &out.join("vocab.tsv"))?;
    vocab.save_json(&out.join("vocab.json"))?;

    // Splits.
    let ([train, dev, test], [_, _, test_idx]) =
        split_with_indices(&corpus, config.split, seed.wrapping_add(1))?;
    write_corpus(&train, &out.join("train"))?;
    write_corpus(&dev, &out.join("dev"))?;
    write_corpus(&test, &out.join("test"))?;

    // Aspects via the coherence sweep plus configured refinement.
    let docs = prepare_documents(&train, &vocab, &stopwords);
    let grid: Vec<LdaConfig> = config
        .lda
        .grid
        .iter()
        .map(|&m| LdaConfig {
            num_topics: m,
            alpha: config.lda.alpha,
            beta: config.lda.beta,
            iterations: config.lda.iterations,
            burn_in: config.lda.burn_in,
            seed: seed.wrapping_add(2),
        })
        .collect();
    let (best, report): (_, CoherenceReport) = sweep(&docs, &grid, config.lda.top_j)?;
    fs::write(out.join("coherence_report.json"), serde_json::to_string_pretty(&report)?)?;
    let mut aspects = extract_aspects(&best, config.lda.top_j)?;
    if let Some(refine_path) = &config.refine {
        let edits = RefinementConfig::load_json(refine_path)?;
        aspects = refine(&aspects, &edits)?;
    }
    if aspects.aspects.len() > config.vocab.aspect_slots {
        return Err(Error::Config(format!(
            "{} aspects but only {} reserved aspect slots",
            aspects.aspects.len(),
            config.vocab.aspect_slots
        )));
    }
    aspects.save_json(&out.join("aspects.json"))?;

    // Masked-LM pretraining on the train split.
    let model_config = config.model.to_config(vocab.len(), seed.wrapping_add(3));
    let mut mlm = config.mlm.clone();
    mlm.seed = seed.wrapping_add(4);
    let (pretrained, pretrain_losses) = pretrain_mlm::<f32>(&train, &vocab, &model_config, &mlm)?;
    crate::checkpoint::save_checkpoint(&pretrained, &out.join("ckpt_pretrain.epck"))?;

    // Substitute mining and weak labels over the full corpus.
    let mut sets: Vec<SubstituteSet> = Vec::with_capacity(aspects.aspects.len());
    for aspect in &aspects.aspects {
        let set = find_substitutes(&pretrained, &train, &vocab, &aspect.name, mlm.top_k, &stopwords)?;
        if set.words.is_empty() {
            eprintln!("warning: aspect {:?} yields no substitutes", aspect.name);
        }
        sets.push(set);
    }
    write_substitutes(&sets, &out.join("substitutes.json"))?;
    let labeled = label_corpus(&corpus, &sets, &vocab)?;
    write_labels(&labeled, &sets, &out.join("labels.jsonl"))?;

    // Prefix-LM fine-tuning on the labeled train split.
    let train_labels: Vec<Option<String>> = {
        let train_set: std::collections::HashSet<&str> =
            train.copies.iter().map(|c| c.sku_id.as_str()).collect();
        corpus
            .copies
            .iter()
            .zip(&labeled.labels)
            .filter(|(c, _)| train_set.contains(c.sku_id.as_str()))
            .map(|(_, l)| l.clone())
            .collect()
    };
    let mut ft = config.finetune.clone();
    ft.seed = seed.wrapping_add(5);
    let (tuned, finetune_losses) = finetune(pretrained, &train, &train_labels, &aspects, &vocab, &ft)?;
    crate::checkpoint::save_checkpoint(&tuned, &out.join("ckpt_finetune.epck"))?;
    fs::write(
        out.join("losses.json"),
        serde_json::to_string_pretty(&LossLog { pretrain: pretrain_losses, finetune: finetune_losses })?,
    )?;

    // Generation for the test split: one generation per test copy, under the
    // copy's weak label, so the references line up one-to-one.
    let mut gen = config.generate.clone();
    gen.seed = seed.wrapping_add(6);
    let sku_index = corpus.sku_index();
    let mut generations: Vec<GenerationRecord> = Vec::new();
    let mut references: Vec<crate::corpus::CopywritingRecord> = Vec::new();
    let mut item = 0u64;
    for (&orig_idx, copy) in test_idx.iter().zip(&test.copies) {
        let Some(label) = &labeled.labels[orig_idx] else { continue };
        let product = &corpus.products[sku_index[copy.sku_id.as_str()]];
        let item_gen = GenConfig {
            max_new_tokens: gen.max_new_tokens,
            decode: gen.decode,
            seed: gen.seed.wrapping_add(item),
        };
        item += 1;
        let text = crate::generator::generate(
            &tuned,
            product,
            label,
            ft.pattern,
            ft.prompt,
            &item_gen,
            &vocab,
            &aspects,
        )?;
        generations.push(GenerationRecord {
            sku_id: copy.sku_id.clone(),
            aspect: label.clone(),
            text,
            pattern: ft.pattern.to_string(),
            prompt: ft.prompt.to_string(),
            decode: gen.decode.to_string(),
            seed: item_gen.seed,
        });
        references.push(copy.clone());
    }
    if generations.is_empty() {
        return Err(Error::Data("no labeled test copies to generate for".into()));
    }
    write_generations(&generations, &out.join("generations.jsonl"))?;
    {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(fs::File::create(out.join("references.jsonl"))?);
        for r in &references {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
    }

    // Knowledge-based post-processing.
    let kb = kb_from_products(&corpus);
    kb.save(&out.join("kb.json"))?;
    if let Some(patterns_path) = &config.patterns {
        let patterns = load_patterns(patterns_path)?;
        let mut kept: Vec<GenerationRecord> = Vec::new();
        let mut records: Vec<PostprocessRecord> = Vec::new();
        for (i, g) in generations.iter().enumerate() {
            let (fixed, corrections) = correct(&g.text, &g.sku_id, &kb, &patterns);
            let decision = filter_by_aspect(&fixed, &g.aspect, &sets, &vocab);
            if decision.keep {
                let mut out_rec = g.clone();
                out_rec.text = fixed;
                kept.push(out_rec);
            }
            records.push(PostprocessRecord {
                index: i,
                sku_id: g.sku_id.clone(),
                aspect: g.aspect.clone(),
                corrections,
                kept: decision.keep,
                predicted_aspect: decision.predicted_aspect,
            });
        }
        write_generations(&kept, &out.join("postprocessed.jsonl"))?;
        let mut lines = String::new();
        for r in &records {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
        }
        fs::write(out.join("postprocess_report.jsonl"), lines)?;
    }

    // Evaluation of the raw generations against the held-out references.
    let pairs: Vec<(Vec<String>, Vec<String>)> = generations
        .iter()
        .zip(&references)
        .map(|(g, r)| (tokenize(&g.text, &vocab), tokenize(&r.text, &vocab)))
        .collect();
    let with_aspects: Vec<(String, String)> =
        generations.iter().map(|g| (g.text.clone(), g.aspect.clone())).collect();
    let rate = aspect_match_rate(&with_aspects, &sets, &vocab)?;
    let mut report = evaluate(&pairs, rate)?;
    report.config_hash = Some(config_hash.clone());
    write_report(&report, &out.join("report.json"))?;

    let artifacts: Vec<String> = [
        "corpus",
        "vocab.tsv",
        "vocab.json",
        "train",
        "dev",
        "test",
        "coherence_report.json",
        "aspects.json",
        "ckpt_pretrain.epck",
        "substitutes.json",
        "labels.jsonl",
        "ckpt_finetune.epck",
        "losses.json",
        "generations.jsonl",
        "references.jsonl",
        "kb.json",
        "report.json",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    fs::write(
        out.join("provenance.json"),
        serde_json::to_string_pretty(&Provenance { config_hash: &config_hash, seed, artifacts })?,
    )?;
    Ok(())
}
