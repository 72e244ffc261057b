//! Command-line front end: each pipeline stage as a subcommand plus the
//! end-to-end `pipeline` runner. Exit codes: 0 ok, 1 usage/config, 2 data,
//! 3 training divergence.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use epccg::checkpoint::{load_checkpoint, save_checkpoint};
use epccg::corpus::{generate_synthetic, load_corpus, load_products, write_corpus, SynthSpec};
use epccg::error::{Error, Result};
use epccg::generator::{
    batch_generate, finetune, write_generations, ControlPattern, Decode, FinetuneConfig,
    GenConfig, PromptVariant, read_generations,
};
use epccg::labeler::{
    find_substitutes, label_corpus, pretrain_mlm, read_labels, read_substitutes, write_labels,
    write_substitutes, MlmConfig,
};
use epccg::lda::{
    extract_aspects, prepare_documents, refine, sweep, AspectSet, LdaConfig, RefinementConfig,
};
use epccg::metrics::{aspect_match_rate, evaluate, write_report};
use epccg::phrase::{load_stopwords, write_vocab_tsv, SeedConfig};
use epccg::pipeline::{
    build_tokenizer_vocab, default_aspect_slots, hex_digest, run_pipeline, ModelShape,
};
use epccg::postprocess::{correct, filter_by_aspect, load_patterns, KnowledgeBase};
use epccg::tokenizer::{tokenize, Vocab};
use epccg::train::TrainState;

#[derive(Parser)]
#[command(name = "epccg", about = "Controllable product-copywriting pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedArg {
    /// Overrides every seed drawn from configs.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with gold aspect labels.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Build the phrase vocabulary (writes <out>.tsv and <out>.json).
    Vocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        stopwords: PathBuf,
        /// Output base path; extension is appended.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_count: usize,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = default_aspect_slots())]
        aspect_slots: usize,
    },
    /// LDA sweep, aspect extraction and refinement.
    Aspects {
        #[arg(long)]
        corpus: PathBuf,
        /// JSON list of LDA configs to sweep over.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        stopwords: PathBuf,
        #[arg(long)]
        refine: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        top_j: usize,
        #[arg(long)]
        out: PathBuf,
        /// Coherence report output.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Masked-LM pretraining.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// JSON: {"model": {...}, "mlm": {...}}.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Substitute mining and weak labeling.
    Label {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        aspects: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        stopwords: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        substitutes_out: PathBuf,
        /// Substitute-set size K.
        #[arg(long, default_value_t = 50)]
        k: usize,
    },
    /// Prefix-LM fine-tuning on a labeled corpus directory.
    Train {
        /// Corpus directory that also contains labels.jsonl.
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pattern: String,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        aspects: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// JSON FinetuneConfig; pattern/prompt flags take precedence.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Generate copywriting for every product x aspect pair.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// products.jsonl.
        #[arg(long)]
        products: PathBuf,
        #[arg(long)]
        aspects: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// greedy or topk:K:T.
        #[arg(long, default_value = "greedy")]
        decode: String,
        #[arg(long, default_value_t = 48)]
        max_new_tokens: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Attribute correction and aspect filtering over generations.
    Postprocess {
        #[arg(long, name = "in")]
        input: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        patterns: PathBuf,
        #[arg(long)]
        substitutes: PathBuf,
        #[arg(long)]
        aspects: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// BLEU/ROUGE/aspect-match evaluation of generations against references.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        /// Line-aligned references (copies.jsonl schema).
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        substitutes: PathBuf,
        #[arg(long)]
        aspects: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// All stages in order, driven by one config file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
}

#[derive(serde::Deserialize)]
struct PretrainFileConfig {
    model: ModelShape,
    mlm: MlmConfig,
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { spec, out, seed } => {
            let mut spec = SynthSpec::load(&spec)?;
            if let Some(s) = seed.seed {
                spec.seed = s;
            }
            let (corpus, gold) = generate_synthetic(&spec)?;
            write_corpus(&corpus, &out)?;
            let gold_map: std::collections::BTreeMap<String, String> =
                gold.iter().enumerate().map(|(i, a)| (i.to_string(), a.clone())).collect();
            fs::write(out.join("gold.json"), serde_json::to_string_pretty(&gold_map)?)?;
            println!("wrote {} products and {} copies to {}", corpus.products.len(), corpus.copies.len(), out.display());
            Ok(())
        }
        Command::Vocab { corpus, stopwords, out, min_count, max_len, threshold, aspect_slots } => {
            let corpus = load_corpus(&corpus)?;
            let seed_config =
                SeedConfig { min_count, max_len, stopwords: load_stopwords(&stopwords)? };
            let (vocab, phrase_vocab) =
                build_tokenizer_vocab(&corpus, &seed_config, threshold, aspect_slots)?;
            let tsv = out.with_extension("tsv");
            let json = out.with_extension("json");
            write_vocab_tsv(&phrase_vocab, &tsv)?;
            vocab.save_json(&json)?;
            println!("{} phrase entries, {} tokens -> {}, {}", phrase_vocab.entries.len(), vocab.len(), tsv.display(), json.display());
            Ok(())
        }
        Command::Aspects { corpus, grid, vocab, stopwords, refine: refine_path, top_j, out, report, seed } => {
            let corpus = load_corpus(&corpus)?;
            let vocab = Vocab::load_json(&vocab)?;
            let stopwords = load_stopwords(&stopwords)?;
            let mut grid: Vec<LdaConfig> = serde_json::from_str(&fs::read_to_string(&grid)?)?;
            if let Some(s) = seed.seed {
                for g in &mut grid {
                    g.seed = s;
                }
            }
            let docs = prepare_documents(&corpus, &vocab, &stopwords);
            let (best, coherence) = sweep(&docs, &grid, top_j)?;
            let mut aspects = extract_aspects(&best, top_j)?;
            if let Some(path) = refine_path {
                aspects = refine(&aspects, &RefinementConfig::load_json(&path)?)?;
            }
            aspects.save_json(&out)?;
            if let Some(path) = report {
                fs::write(path, serde_json::to_string_pretty(&coherence)?)?;
            }
            println!("{} aspects -> {}", aspects.aspects.len(), out.display());
            Ok(())
        }
        Command::Pretrain { corpus, vocab, config, out, seed } => {
            let corpus = load_corpus(&corpus)?;
            let vocab = Vocab::load_json(&vocab)?;
            let mut file: PretrainFileConfig =
                serde_json::from_str(&fs::read_to_string(&config)?)?;
            if let Some(s) = seed.seed {
                file.mlm.seed = s;
            }
            let model_config = file.model.to_config(vocab.len(), file.mlm.seed);
            let (state, losses) = pretrain_mlm::<f32>(&corpus, &vocab, &model_config, &file.mlm)?;
            save_checkpoint(&state, &out)?;
            println!(
                "pretrained {} epochs, loss {:.4} -> {:.4}, checkpoint {}",
                losses.len(),
                losses.first().unwrap_or(&f64::NAN),
                losses.last().unwrap_or(&f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::Label { corpus, ckpt, aspects, vocab, stopwords, out, substitutes_out, k } => {
            let corpus = load_corpus(&corpus)?;
            let vocab = Vocab::load_json(&vocab)?;
            let aspects = AspectSet::load_json(&aspects)?;
            let state: TrainState<f32> = load_checkpoint(&ckpt)?;
            let stopwords = match stopwords {
                Some(path) => load_stopwords(&path)?,
                None => Default::default(),
            };
            let mut sets = Vec::new();
            for aspect in &aspects.aspects {
                let set = find_substitutes(&state, &corpus, &vocab, &aspect.name, k, &stopwords)?;
                if set.words.is_empty() {
                    eprintln!("warning: aspect {:?} yields no substitutes", aspect.name);
                }
                sets.push(set);
            }
            write_substitutes(&sets, &substitutes_out)?;
            let labeled = label_corpus(&corpus, &sets, &vocab)?;
            write_labels(&labeled, &sets, &out)?;
            let known = labeled.labels.iter().filter(|l| l.is_some()).count();
            println!("labeled {known}/{} copies -> {}", labeled.labels.len(), out.display());
            Ok(())
        }
        Command::Train { labeled, ckpt, pattern, prompt, aspects, vocab, config, out, seed } => {
            let corpus = load_corpus(&labeled)?;
            let label_records = read_labels(&labeled.join("labels.jsonl"))?;
            if label_records.len() != corpus.copies.len() {
                return Err(Error::Data(format!(
                    "{} labels for {} copies in {}",
                    label_records.len(),
                    corpus.copies.len(),
                    labeled.display()
                )));
            }
            let labels: Vec<Option<String>> =
                label_records.into_iter().map(|r| r.label).collect();
            let vocab = Vocab::load_json(&vocab)?;
            let aspects = AspectSet::load_json(&aspects)?;
            let mut ft: FinetuneConfig = serde_json::from_str(&fs::read_to_string(&config)?)?;
            ft.pattern = ControlPattern::from_str(&pattern)?;
            ft.prompt = PromptVariant::from_str(&prompt)?;
            if let Some(s) = seed.seed {
                ft.seed = s;
            }
            let state: TrainState<f32> = load_checkpoint(&ckpt)?;
            let (state, losses) = finetune(state, &corpus, &labels, &aspects, &vocab, &ft)?;
            save_checkpoint(&state, &out)?;
            println!(
                "fine-tuned {} epochs ({} / {}), loss {:.4} -> {:.4}, checkpoint {}",
                losses.len(),
                ft.pattern,
                ft.prompt,
                losses.first().unwrap_or(&f64::NAN),
                losses.last().unwrap_or(&f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::Generate { ckpt, products, aspects, vocab, decode, max_new_tokens, out, seed } => {
            let state: TrainState<f32> = load_checkpoint(&ckpt)?;
            let records = load_products(&products)?;
            let aspects = AspectSet::load_json(&aspects)?;
            let vocab = Vocab::load_json(&vocab)?;
            let pattern = ControlPattern::from_str(
                state
                    .meta
                    .pattern
                    .as_deref()
                    .ok_or_else(|| Error::Config("checkpoint has no fine-tune pattern".into()))?,
            )?;
            let prompt = PromptVariant::from_str(
                state
                    .meta
                    .prompt
                    .as_deref()
                    .ok_or_else(|| Error::Config("checkpoint has no fine-tune prompt".into()))?,
            )?;
            let gen = GenConfig {
                max_new_tokens,
                decode: Decode::from_str(&decode)?,
                seed: seed.seed.unwrap_or(0),
            };
            let (outputs, errors) =
                batch_generate(&state, &records, &aspects, pattern, prompt, &gen, &vocab);
            write_generations(&outputs, &out)?;
            for e in &errors {
                eprintln!("generation failed for {} / {}: {}", e.sku_id, e.aspect, e.error);
            }
            println!("{} generations ({} errors) -> {}", outputs.len(), errors.len(), out.display());
            Ok(())
        }
        Command::Postprocess { input, kb, patterns, substitutes, aspects, vocab, out, report } => {
            let generations = read_generations(&input)?;
            let kb = KnowledgeBase::load(&kb)?;
            let patterns = load_patterns(&patterns)?;
            let aspects = AspectSet::load_json(&aspects)?;
            let names: Vec<String> = aspects.names().iter().map(|s| s.to_string()).collect();
            let sets = read_substitutes(&substitutes, &names)?;
            let vocab = Vocab::load_json(&vocab)?;

            let mut kept = Vec::new();
            let mut report_lines = String::new();
            for (i, g) in generations.iter().enumerate() {
                let (fixed, corrections) = correct(&g.text, &g.sku_id, &kb, &patterns);
                let decision = filter_by_aspect(&fixed, &g.aspect, &sets, &vocab);
                if decision.keep {
                    let mut rec = g.clone();
                    rec.text = fixed.clone();
                    kept.push(rec);
                }
                let line = serde_json::json!({
                    "index": i,
                    "sku_id": g.sku_id,
                    "aspect": g.aspect,
                    "corrections": corrections,
                    "kept": decision.keep,
                    "predicted_aspect": decision.predicted_aspect,
                });
                report_lines.push_str(&line.to_string());
                report_lines.push('\n');
            }
            write_generations(&kept, &out)?;
            fs::write(&report, report_lines)?;
            println!("kept {}/{} generations -> {}", kept.len(), generations.len(), out.display());
            Ok(())
        }
        Command::Eval { generated, references, substitutes, aspects, vocab, out } => {
            let generations = read_generations(&generated)?;
            let refs = epccg::corpus::load_copies(&references)?;
            if generations.len() != refs.len() {
                return Err(Error::Data(format!(
                    "line count mismatch: {} generated vs {} references",
                    generations.len(),
                    refs.len()
                )));
            }
            let aspects = AspectSet::load_json(&aspects)?;
            let names: Vec<String> = aspects.names().iter().map(|s| s.to_string()).collect();
            let sets = read_substitutes(&substitutes, &names)?;
            let vocab = Vocab::load_json(&vocab)?;
            let pairs: Vec<(Vec<String>, Vec<String>)> = generations
                .iter()
                .zip(&refs)
                .map(|(g, r)| (tokenize(&g.text, &vocab), tokenize(&r.text, &vocab)))
                .collect();
            let with_aspects: Vec<(String, String)> =
                generations.iter().map(|g| (g.text.clone(), g.aspect.clone())).collect();
            let rate = aspect_match_rate(&with_aspects, &sets, &vocab)?;
            let mut score = evaluate(&pairs, rate)?;
            score.config_hash = Some(hex_digest(&fs::read(&generated)?));
            write_report(&score, &out)?;
            println!(
                "rouge-1 f1 {:.4}, corpus bleu {:.4}, aspect match {:.4} -> {}",
                score.rouge_1.f1,
                score.corpus_bleu,
                score.aspect_match,
                out.display()
            );
            Ok(())
        }
        Command::Pipeline { config, seed } => {
            run_pipeline(&config, seed.seed)?;
            println!("pipeline finished");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit 1 per the error-code contract; --help and
            // --version print normally and exit 0.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
