//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values (run with `--nocapture` to see them all).
//!
//! The synthetic corpus used throughout plants six lexically disjoint
//! aspects; every content word is 5..=9 graphemes and the phrase cap is 9,
//! so tokenization stays word-level and the planted keywords are exactly
//! recoverable.

use std::collections::BTreeSet;
use std::process::Command;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use epccg::corpus::{generate_synthetic, split_with_indices, Corpus, SynthAspect, SynthSpec};
use epccg::generator::{
    finetune, generate, ControlPattern, Decode, FinetuneConfig, GenConfig, PromptVariant,
};
use epccg::labeler::{
    classify_text, find_substitutes, label_corpus, pretrain_mlm, MlmConfig, SubstituteSet,
};
use epccg::lda::{sweep, GibbsSampler, LdaConfig};
use epccg::metrics::{aspect_match_rate, bleu_n, corpus_bleu, rouge, RougeVariant};
use epccg::model::{build_prefix_mask, AttentionMask, ModelConfig, ModelParameters};
use epccg::phrase::SeedConfig;
use epccg::pipeline::build_tokenizer_vocab;
use epccg::postprocess::{
    correct, extract_attributes, filter_by_aspect, AttributePattern, CorrectionAction,
    KnowledgeBase, Normalizer,
};
use epccg::tokenizer::Vocab;
use epccg::train::{grad_check, TrainExample, TrainState};

// ---------------------------------------------------------------------------
// Shared synthetic-corpus fixture
// ---------------------------------------------------------------------------

fn aspect(name: &str, keywords: [&str; 2], templates: [&str; 3]) -> SynthAspect {
    SynthAspect {
        name: name.into(),
        keywords: keywords.iter().map(|s| s.to_string()).collect(),
        templates: templates.iter().map(|s| s.to_string()).collect(),
    }
}

fn synth_spec(docs_per_aspect: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        aspects: vec![
            aspect(
                "battery",
                ["battery", "energy"],
                [
                    "the {keyword} endures, superb charge rating, holds {capacity}",
                    "superb rating, the {keyword} charge endures",
                    "charge rating, superb {keyword} endures",
                ],
            ),
            aspect(
                "screen",
                ["screen", "display"],
                [
                    "the {keyword} colors, radiant vibrant panels",
                    "radiant panels, the {keyword} vibrant colors",
                    "vibrant colors, panels radiant {keyword}",
                ],
            ),
            aspect(
                "camera",
                ["camera", "lens"],
                [
                    "the {keyword} captures moments, focus clarity",
                    "captures clarity, moments focus {keyword}",
                    "moments captures, focus {keyword} clarity",
                ],
            ),
            aspect(
                "keyboard",
                ["keyboard", "typing"],
                [
                    "the {keyword} presses softly, travel spacing",
                    "softly presses, travel {keyword} spacing",
                    "spacing travel, presses {keyword} softly",
                ],
            ),
            aspect(
                "cooling",
                ["cooling", "airflow"],
                [
                    "the {keyword} vents whisper, thermal steadily",
                    "thermal vents, whisper {keyword} steadily",
                    "steadily whisper, the {keyword} thermal vents",
                ],
            ),
            aspect(
                "speaker",
                ["speaker", "audio"],
                [
                    "the {keyword} booming richly, acoustic chamber",
                    "acoustic chamber, booming {keyword} richly",
                    "richly booming, chamber acoustic {keyword}",
                ],
            ),
        ],
        docs_per_aspect,
        attribute_pool: IndexMap::from([
            (
                "capacity".to_string(),
                vec!["4000mah".into(), "4500mah".into(), "5000mah".into(), "5200mah".into()],
            ),
            (
                "weight".to_string(),
                vec!["180grams".into(), "205grams".into(), "230grams".into()],
            ),
        ]),
        brand_pool: vec!["novao".into(), "triex".into(), "kelda".into()],
        type_pool: vec!["phone".into(), "laptop".into(), "tablet".into()],
        ocr_pool: vec![],
        cross_aspect_noise: 0.0,
        seed,
    }
}

fn stopwords() -> BTreeSet<String> {
    let mut set: BTreeSet<String> = ["the", "a", "an", "and", "with", "of", "to", "for", "in", "on"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for c in 'a'..='z' {
        set.insert(c.to_string());
    }
    for c in '0'..='9' {
        set.insert(c.to_string());
    }
    for p in [",", ".", "!", "?", ";", ":"] {
        set.insert(p.to_string());
    }
    set
}

fn acceptance_vocab(corpus: &Corpus) -> Vocab {
    let seed_config = SeedConfig { min_count: 5, max_len: 9, stopwords: stopwords() };
    let (vocab, _) = build_tokenizer_vocab(corpus, &seed_config, 0.5, 16).unwrap();
    vocab
}

fn model_config(vocab: &Vocab, seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 4,
        hidden_size: 48,
        ff_size: 96,
        vocab_size: vocab.len(),
        max_positions: 96,
        dropout_prob: 0.0,
        seed,
    }
}

fn mlm_config(epochs: usize, seed: u64) -> MlmConfig {
    MlmConfig { mask_prob: 0.15, top_k: 8, epochs, batch_size: 16, lr: 3e-3, seed }
}

fn aspect_set(spec: &SynthSpec) -> epccg::lda::AspectSet {
    epccg::lda::AspectSet {
        aspects: spec
            .aspects
            .iter()
            .enumerate()
            .map(|(i, a)| epccg::lda::Aspect {
                name: a.name.clone(),
                keywords: a.keywords.clone(),
                topic_id: Some(i),
            })
            .collect(),
    }
}

fn oracle_sets(spec: &SynthSpec) -> Vec<SubstituteSet> {
    spec.aspects
        .iter()
        .map(|a| SubstituteSet {
            aspect: a.name.clone(),
            words: a.keywords.iter().map(|k| (k.clone(), 1)).collect(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// 1. Mask exactness
// ---------------------------------------------------------------------------

#[test]
fn acceptance_01_mask_exactness() {
    let mut checked = 0usize;
    for total in 1..=32usize {
        for prefix in 1..=total {
            let mask = build_prefix_mask(prefix, total).unwrap();
            for i in 0..total {
                for j in 0..total {
                    let expected = (i < prefix && j < prefix) || (i >= prefix && j <= i);
                    assert_eq!(
                        mask.allowed(i, j),
                        expected,
                        "prefix={prefix} total={total} ({i},{j})"
                    );
                    checked += 1;
                }
            }
        }
        assert_eq!(build_prefix_mask(total, total).unwrap(), AttentionMask::full(total));
    }
    assert!(build_prefix_mask(0, 4).is_err());
    assert!(build_prefix_mask(5, 4).is_err());
    println!("ACCEPTANCE 1 mask exactness: PASS ({checked} pairs, exact equality)");
}

// ---------------------------------------------------------------------------
// 2. Gradient check
// ---------------------------------------------------------------------------

#[test]
fn acceptance_02_gradient_check() {
    let config = ModelConfig {
        num_layers: 2,
        num_heads: 2,
        hidden_size: 16,
        ff_size: 32,
        vocab_size: 40,
        max_positions: 16,
        dropout_prob: 0.0,
        seed: 11,
    };
    let mut params: ModelParameters<f64> = ModelParameters::init(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch: Vec<TrainExample> = (0..2)
        .map(|_| {
            let len = 10;
            TrainExample {
                ids: (0..len).map(|_| rng.gen_range(0..40)).collect(),
                mask: build_prefix_mask(4, len).unwrap(),
                targets: (0..len).map(|_| rng.gen_range(0..40)).collect(),
                positions: vec![4, 6, 7, 9],
            }
        })
        .collect();
    let max_rel = grad_check(&mut params, &config, &batch, 1e-4, 200, 99).unwrap();
    assert!(max_rel <= 1e-4, "max relative error {max_rel} > 1e-4");
    println!("ACCEPTANCE 2 gradient check: PASS (max relative error {max_rel:.3e} <= 1e-4)");
}

// ---------------------------------------------------------------------------
// 3. LDA recovery
// ---------------------------------------------------------------------------

#[test]
fn acceptance_03_lda_recovery() {
    let spec = synth_spec(300, 4242);
    let (corpus, gold) = generate_synthetic(&spec).unwrap();
    let vocab = acceptance_vocab(&corpus);
    let docs = epccg::lda::prepare_documents(&corpus, &vocab, &stopwords());

    let grid: Vec<LdaConfig> = [2usize, 4, 6, 8]
        .iter()
        .map(|&m| LdaConfig {
            num_topics: m,
            alpha: Some(0.1),
            beta: 0.01,
            iterations: 300,
            burn_in: 100,
            seed: 7,
        })
        .collect();
    let (model, report) = sweep(&docs, &grid, 6).unwrap();
    let best = epccg::lda::select_best(&report).unwrap();
    assert_eq!(
        report[best].num_topics, 6,
        "sweep selected M={} (report: {:?})",
        report[best].num_topics,
        report.iter().map(|e| (e.num_topics, e.mean)).collect::<Vec<_>>()
    );

    // Topic-to-aspect purity under best matching: each topic votes for the
    // gold aspect its assigned tokens mostly come from.
    let aspect_names: Vec<&str> = spec.aspects.iter().map(|a| a.name.as_str()).collect();
    let mut token_total = 0usize;
    let mut matched = 0usize;
    let mut per_topic = vec![vec![0usize; aspect_names.len()]; model.num_topics()];
    for (doc, assignments) in model.assignments.iter().enumerate() {
        let gold_idx = aspect_names.iter().position(|a| *a == gold[doc]).unwrap();
        for &topic in assignments {
            per_topic[topic][gold_idx] += 1;
            token_total += 1;
        }
    }
    for counts in &per_topic {
        matched += counts.iter().max().unwrap();
    }
    let purity = matched as f64 / token_total as f64;
    assert!(purity >= 0.85, "purity {purity:.4} < 0.85");
    println!("ACCEPTANCE 3 lda recovery: PASS (selected M=6, purity {purity:.4} >= 0.85)");
}

// ---------------------------------------------------------------------------
// 4. Gibbs correctness
// ---------------------------------------------------------------------------

/// Rising factorial a(a+1)...(a+n-1); the Gamma-function ratios of the
/// collapsed joint reduce to these for integer counts.
fn rising(a: f64, n: u32) -> f64 {
    (0..n).map(|j| a + j as f64).product()
}

#[test]
fn acceptance_04_gibbs_matches_enumeration() {
    // One document with two distinct tokens, two topics.
    let docs = vec![vec!["alpha".to_string(), "beta".to_string()]];
    let m = 2usize;
    let v = 2usize;
    let alpha = 0.3;
    let beta = 0.4;

    // Exact posterior over the 4 assignment configurations by exhaustive
    // enumeration of the collapsed joint:
    //   p(z) ~ prod_k rising(alpha, n_dk) * prod_k prod_w rising(beta, n_kw)
    //          / rising(V*beta, n_k)
    let mut exact = [0.0f64; 4];
    for z0 in 0..m {
        for z1 in 0..m {
            let mut n_dk = [0u32; 2];
            let mut n_kw = [[0u32; 2]; 2];
            let mut n_k = [0u32; 2];
            for (word, z) in [(0usize, z0), (1usize, z1)] {
                n_dk[z] += 1;
                n_kw[z][word] += 1;
                n_k[z] += 1;
            }
            let mut weight = 1.0;
            for k in 0..m {
                weight *= rising(alpha, n_dk[k]);
                for w in 0..v {
                    weight *= rising(beta, n_kw[k][w]);
                }
                weight /= rising(v as f64 * beta, n_k[k]);
            }
            exact[z0 * 2 + z1] = weight;
        }
    }
    let total: f64 = exact.iter().sum();
    for e in &mut exact {
        *e /= total;
    }

    let config = LdaConfig {
        num_topics: m,
        alpha: Some(alpha),
        beta,
        iterations: 10_100,
        burn_in: 100,
        seed: 5,
    };
    let mut sampler = GibbsSampler::new(&docs, &config).unwrap();
    for _ in 0..100 {
        sampler.sweep();
    }
    let mut counts = [0u64; 4];
    let sweeps = 10_000usize;
    for _ in 0..sweeps {
        sampler.sweep();
        counts[sampler.z[0][0] * 2 + sampler.z[0][1]] += 1;
    }
    let tv: f64 = exact
        .iter()
        .zip(&counts)
        .map(|(&p, &c)| (p - c as f64 / sweeps as f64).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv <= 0.05, "total variation {tv:.4} > 0.05 (exact {exact:?}, counts {counts:?})");
    println!("ACCEPTANCE 4 gibbs correctness: PASS (total variation {tv:.4} <= 0.05 over {sweeps} sweeps)");
}

// ---------------------------------------------------------------------------
// 5. Weak labeling
// ---------------------------------------------------------------------------

fn label_accuracy(labels: &[Option<String>], gold: &[String]) -> f64 {
    let ok = labels
        .iter()
        .zip(gold)
        .filter(|(l, g)| l.as_deref() == Some(g.as_str()))
        .count();
    ok as f64 / gold.len() as f64
}

#[test]
fn acceptance_05_weak_labeling() {
    let spec = synth_spec(300, 4242);
    let (corpus, gold) = generate_synthetic(&spec).unwrap();
    let vocab = acceptance_vocab(&corpus);

    // Oracle substitute sets (= planted keyword lists): exactly 1.0.
    let oracle = oracle_sets(&spec);
    let labeled = label_corpus(&corpus, &oracle, &vocab).unwrap();
    let oracle_acc = label_accuracy(&labeled.labels, &gold);
    assert_eq!(oracle_acc, 1.0, "oracle-set accuracy {oracle_acc} != 1.0");

    // Mined substitute sets from a micro MLM.
    let config = model_config(&vocab, 21);
    let (state, losses) = pretrain_mlm::<f32>(&corpus, &vocab, &config, &mlm_config(18, 5)).unwrap();
    let stop = stopwords();
    let mined: Vec<SubstituteSet> = spec
        .aspects
        .iter()
        .map(|a| find_substitutes(&state, &corpus, &vocab, &a.name, 8, &stop).unwrap())
        .collect();
    for set in &mined {
        assert!(!set.words.is_empty(), "aspect {} mined no substitutes", set.aspect);
    }
    let labeled = label_corpus(&corpus, &mined, &vocab).unwrap();
    let mined_acc = label_accuracy(&labeled.labels, &gold);
    assert!(mined_acc >= 0.90, "mined-set accuracy {mined_acc:.4} < 0.90");
    println!(
        "ACCEPTANCE 5 weak labeling: PASS (mined {mined_acc:.4} >= 0.90, oracle {oracle_acc:.2} == 1.00; mlm loss {:.3} -> {:.3})",
        losses.first().unwrap(),
        losses.last().unwrap()
    );
}

// ---------------------------------------------------------------------------
// 6. Controllability (Table-2 analog at desk scale)
// ---------------------------------------------------------------------------

#[test]
fn acceptance_06_controllability() {
    let spec = synth_spec(300, 4242);
    let (corpus, _) = generate_synthetic(&spec).unwrap();
    let vocab = acceptance_vocab(&corpus);
    let aspects = aspect_set(&spec);
    let ([train, _dev, test], _) = split_with_indices(&corpus, (0.8, 0.1, 0.1), 4243)
        .map(|(parts, idx)| (parts, idx))
        .unwrap();

    // Weakly supervised training labels via the mined classifier.
    let config = model_config(&vocab, 31);
    let (pretrained, _) = pretrain_mlm::<f32>(&train, &vocab, &config, &mlm_config(18, 6)).unwrap();
    let stop = stopwords();
    let mined: Vec<SubstituteSet> = spec
        .aspects
        .iter()
        .map(|a| find_substitutes(&pretrained, &train, &vocab, &a.name, 8, &stop).unwrap())
        .collect();
    let train_labels = label_corpus(&train, &mined, &vocab).unwrap().labels;

    // 200 held-out (product, aspect) pairs: test products cycled, aspects
    // round-robin.
    let pairs: Vec<(&epccg::corpus::ProductRecord, &str)> = (0..200)
        .map(|i| {
            let product = &test.products[i % test.products.len()];
            let aspect = aspects.aspects[i % aspects.aspects.len()].name.as_str();
            (product, aspect)
        })
        .collect();

    let mut rates = Vec::new();
    for pattern in [ControlPattern::NameCode, ControlPattern::DiscreteCode, ControlPattern::LabelCode] {
        let ft = FinetuneConfig {
            target_mask_prob: 0.3,
            epochs: 12,
            batch_size: 16,
            lr: 2e-3,
            pattern,
            prompt: PromptVariant::Basic,
            seed: 9,
        };
        let (tuned, losses) =
            finetune(pretrained.clone(), &train, &train_labels, &aspects, &vocab, &ft).unwrap();
        let mut generations = Vec::new();
        for (i, (product, aspect)) in pairs.iter().enumerate() {
            let gen = GenConfig { max_new_tokens: 20, decode: Decode::Greedy, seed: i as u64 };
            let text = generate(
                &tuned,
                product,
                aspect,
                pattern,
                PromptVariant::Basic,
                &gen,
                &vocab,
                &aspects,
            )
            .unwrap();
            generations.push((text, aspect.to_string()));
        }
        let rate = aspect_match_rate(&generations, &mined, &vocab).unwrap();
        rates.push((pattern, rate, losses[0], *losses.last().unwrap()));
    }

    let name_rate = rates[0].1;
    assert!(name_rate >= 0.85, "name-code aspect match {name_rate:.4} < 0.85");
    println!(
        "ACCEPTANCE 6 controllability: PASS (name_code {:.4} >= 0.85; reported alongside: discrete_code {:.4}, label_code {:.4})",
        rates[0].1, rates[1].1, rates[2].1
    );
}

// ---------------------------------------------------------------------------
// 7. Training sanity
// ---------------------------------------------------------------------------

#[test]
fn acceptance_07_training_sanity() {
    let spec = synth_spec(100, 77);
    let (corpus, _) = generate_synthetic(&spec).unwrap();
    let vocab = acceptance_vocab(&corpus);
    let aspects = aspect_set(&spec);

    let config = model_config(&vocab, 41);
    let (state, mlm_losses) = pretrain_mlm::<f32>(&corpus, &vocab, &config, &mlm_config(12, 8)).unwrap();
    assert!(
        mlm_losses.last().unwrap() < &(0.5 * mlm_losses[0]),
        "mlm loss {:.4} -> {:.4} did not halve",
        mlm_losses[0],
        mlm_losses.last().unwrap()
    );

    let labels: Vec<Option<String>> = {
        let oracle = oracle_sets(&spec);
        label_corpus(&corpus, &oracle, &vocab).unwrap().labels
    };
    let ft = FinetuneConfig {
        target_mask_prob: 0.3,
        epochs: 12,
        batch_size: 16,
        lr: 2e-3,
        pattern: ControlPattern::NameCode,
        prompt: PromptVariant::Basic,
        seed: 10,
    };
    let (_, ft_losses) = finetune(state, &corpus, &labels, &aspects, &vocab, &ft).unwrap();
    assert!(
        ft_losses.last().unwrap() < &(0.5 * ft_losses[0]),
        "finetune loss {:.4} -> {:.4} did not halve",
        ft_losses[0],
        ft_losses.last().unwrap()
    );
    println!(
        "ACCEPTANCE 7 training sanity: PASS (mlm {:.3} -> {:.3}, finetune {:.3} -> {:.3})",
        mlm_losses[0],
        mlm_losses.last().unwrap(),
        ft_losses[0],
        ft_losses.last().unwrap()
    );
}

// ---------------------------------------------------------------------------
// 8. Metric oracles (independent brute-force implementations)
// ---------------------------------------------------------------------------

fn oracle_clipped(cand: &[String], reference: &[String], n: usize) -> (u64, u64) {
    if cand.len() < n {
        return (0, 0);
    }
    let total = (cand.len() - n + 1) as u64;
    let mut matched = 0u64;
    let mut seen: Vec<usize> = Vec::new();
    for i in 0..=cand.len() - n {
        if seen.iter().any(|&j| cand[j..j + n] == cand[i..i + n]) {
            continue;
        }
        seen.push(i);
        let c_count =
            (0..=cand.len() - n).filter(|&j| cand[j..j + n] == cand[i..i + n]).count() as u64;
        let r_count = if reference.len() >= n {
            (0..=reference.len() - n).filter(|&j| reference[j..j + n] == cand[i..i + n]).count()
                as u64
        } else {
            0
        };
        matched += c_count.min(r_count);
    }
    (matched, total)
}

fn oracle_precision(order: usize, m: u64, t: u64) -> Option<f64> {
    if order == 1 && m == 0 {
        return None;
    }
    Some(if m == 0 || t == 0 { (m + 1) as f64 / (t + 1) as f64 } else { m as f64 / t as f64 })
}

fn oracle_bleu(cand: &[String], reference: &[String], n: usize) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for i in 1..=n {
        let (m, t) = oracle_clipped(cand, reference, i);
        match oracle_precision(i, m, t) {
            Some(p) => log_sum += p.ln(),
            None => return 0.0,
        }
    }
    let bp = if cand.len() < reference.len() {
        (1.0 - reference.len() as f64 / cand.len() as f64).exp()
    } else {
        1.0
    };
    (log_sum / n as f64).exp() * bp
}

fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    use std::collections::HashMap;
    fn go(
        a: &[String],
        b: &[String],
        i: usize,
        j: usize,
        memo: &mut HashMap<(usize, usize), usize>,
    ) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

#[test]
fn acceptance_08_metric_oracles() {
    let alphabet = ["a", "b", "c", "d", "e"];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let pairs: Vec<(Vec<String>, Vec<String>)> = (0..20)
        .map(|_| {
            let len_c = rng.gen_range(1..=15);
            let len_r = rng.gen_range(1..=15);
            let sample = |rng: &mut ChaCha8Rng, len: usize| -> Vec<String> {
                (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())].to_string()).collect()
            };
            let c = sample(&mut rng, len_c);
            let r = sample(&mut rng, len_r);
            (c, r)
        })
        .collect();

    let mut max_delta = 0.0f64;
    for (cand, reference) in &pairs {
        for n in 1..=4 {
            let delta = (bleu_n(cand, reference, n).unwrap() - oracle_bleu(cand, reference, n)).abs();
            assert!(delta <= 1e-9, "bleu_{n} delta {delta}");
            max_delta = max_delta.max(delta);
        }
        for (variant, n) in [(RougeVariant::One, 1usize), (RougeVariant::Two, 2)] {
            let got = rouge(cand, reference, variant);
            let (m, t) = oracle_clipped(cand, reference, n);
            let ref_total = reference.len().saturating_sub(n - 1) as u64;
            let (p, r) = if t == 0 || ref_total == 0 {
                (0.0, 0.0)
            } else {
                (m as f64 / t as f64, m as f64 / ref_total as f64)
            };
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            for delta in
                [(got.precision - p).abs(), (got.recall - r).abs(), (got.f1 - f1).abs()]
            {
                assert!(delta <= 1e-9, "rouge-{n} delta {delta}");
                max_delta = max_delta.max(delta);
            }
        }
        let got = rouge(cand, reference, RougeVariant::L);
        let lcs = oracle_lcs(cand, reference) as f64;
        let p = lcs / cand.len() as f64;
        let r = lcs / reference.len() as f64;
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        for delta in [(got.precision - p).abs(), (got.recall - r).abs(), (got.f1 - f1).abs()] {
            assert!(delta <= 1e-9, "rouge-L delta {delta}");
            max_delta = max_delta.max(delta);
        }
    }

    // Corpus BLEU against summed oracle counts.
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 1..=4 {
        let (mut m_sum, mut t_sum) = (0u64, 0u64);
        for (c, r) in &pairs {
            let (m, t) = oracle_clipped(c, r, n);
            m_sum += m;
            t_sum += t;
        }
        match oracle_precision(n, m_sum, t_sum) {
            Some(p) => log_sum += p.ln(),
            None => {
                zero = true;
                break;
            }
        }
    }
    let c_len: u64 = pairs.iter().map(|(c, _)| c.len() as u64).sum();
    let r_len: u64 = pairs.iter().map(|(_, r)| r.len() as u64).sum();
    let bp = if c_len < r_len { (1.0 - r_len as f64 / c_len as f64).exp() } else { 1.0 };
    let want = if zero { 0.0 } else { 100.0 * (log_sum / 4.0).exp() * bp };
    let delta = (corpus_bleu(&pairs).unwrap() - want).abs();
    assert!(delta <= 1e-9, "corpus bleu delta {delta}");
    max_delta = max_delta.max(delta);

    println!("ACCEPTANCE 8 metric oracles: PASS (20 pairs, max |delta| {max_delta:.2e} <= 1e-9)");
}

// ---------------------------------------------------------------------------
// 9. Post-processing fixpoint
// ---------------------------------------------------------------------------

#[test]
fn acceptance_09_postprocess_fixpoint() {
    // Train a small generator and produce 50 generations.
    let spec = synth_spec(100, 909);
    let (corpus, _) = generate_synthetic(&spec).unwrap();
    let vocab = acceptance_vocab(&corpus);
    let aspects = aspect_set(&spec);
    let oracle = oracle_sets(&spec);
    let labels = label_corpus(&corpus, &oracle, &vocab).unwrap().labels;

    let config = model_config(&vocab, 51);
    let state = TrainState::<f32>::new(config).unwrap();
    let ft = FinetuneConfig {
        target_mask_prob: 0.3,
        epochs: 8,
        batch_size: 16,
        lr: 2e-3,
        pattern: ControlPattern::NameCode,
        prompt: PromptVariant::Basic,
        seed: 12,
    };
    let (tuned, _) = finetune(state, &corpus, &labels, &aspects, &vocab, &ft).unwrap();

    let patterns = vec![
        AttributePattern::new("capacity", r"(\d+)mah", Normalizer::Numeric).unwrap(),
    ];
    let mut kb = KnowledgeBase::default();
    let mut planted: Vec<(String, String, String)> = Vec::new(); // (sku, aspect, text)
    for i in 0..50usize {
        let product = &corpus.products[i % corpus.products.len()];
        let aspect = &aspects.aspects[i % aspects.aspects.len()].name;
        let gen = GenConfig { max_new_tokens: 20, decode: Decode::Greedy, seed: i as u64 };
        let text = generate(
            &tuned,
            product,
            aspect,
            ControlPattern::NameCode,
            PromptVariant::Basic,
            &gen,
            &vocab,
            &aspects,
        )
        .unwrap();
        // Plant a wrong capacity mention; the knowledge base holds the true
        // digits from the product record.
        let canonical: String =
            product.attributes["capacity"].chars().filter(|c| c.is_ascii_digit()).collect();
        let wrong = format!("{}", 9000 + (i * 37) % 900);
        assert_ne!(wrong, canonical);
        let text = format!("{text} holds {wrong}mah");
        kb.entries
            .entry(product.sku_id.clone())
            .or_default()
            .insert("capacity".to_string(), canonical);
        planted.push((product.sku_id.clone(), aspect.clone(), text));
    }

    // Correction fixes 100%, verified by re-extraction, and is idempotent.
    let mut fixed_count = 0usize;
    for (sku, _, text) in &planted {
        let (fixed, report) = correct(text, sku, &kb, &patterns);
        assert!(report.sku_in_kb);
        assert!(
            report.entries.iter().any(|e| e.action == CorrectionAction::Replaced),
            "planted error not replaced for {sku}"
        );
        let canonical = &kb.entries[sku]["capacity"];
        for ex in extract_attributes(&fixed, &patterns) {
            assert_eq!(&ex.value, canonical, "re-extraction disagrees for {sku}");
        }
        let (again, second) = correct(&fixed, sku, &kb, &patterns);
        assert_eq!(again, fixed, "correction not idempotent for {sku}");
        assert!(second.entries.iter().all(|e| e.action != CorrectionAction::Replaced));
        fixed_count += 1;
    }

    // The filter removes exactly the generations whose classifier prediction
    // differs from the requested aspect (unknown counts as a mismatch).
    let mut removed = 0usize;
    for (_, aspect, text) in &planted {
        let (predicted, _) = classify_text(text, &oracle, &vocab);
        let expected_keep = predicted.as_deref() == Some(aspect.as_str());
        let decision = filter_by_aspect(text, aspect, &oracle, &vocab);
        assert_eq!(decision.keep, expected_keep);
        if !decision.keep {
            removed += 1;
        }
    }
    println!(
        "ACCEPTANCE 9 postprocess fixpoint: PASS ({fixed_count}/50 corrected and idempotent, filter removed {removed} mismatches exactly)"
    );
}

// ---------------------------------------------------------------------------
// 10. End-to-end reproducibility
// ---------------------------------------------------------------------------

#[test]
fn acceptance_10_pipeline_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();

    // A compact pipeline config in its own sandbox.
    let spec = synth_spec(60, 4242);
    std::fs::write(base.join("synth_spec.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    let stop_lines: Vec<String> = stopwords().into_iter().collect();
    std::fs::write(base.join("stopwords.txt"), stop_lines.join("\n")).unwrap();
    std::fs::write(
        base.join("patterns.json"),
        r#"[{"attribute":"capacity","regex":"(\\d+mah)","normalizer":"numeric"}]"#,
    )
    .unwrap();
    let config = serde_json::json!({
        "out_dir": "out",
        "seed": 19,
        "synth_spec": "synth_spec.json",
        "stopwords": "stopwords.txt",
        "split": [0.8, 0.1, 0.1],
        "vocab": {"min_count": 4, "max_len": 9, "mine_threshold": 0.5, "aspect_slots": 16},
        "lda": {"grid": [6], "alpha": 0.1, "beta": 0.01, "iterations": 150, "burn_in": 50, "top_j": 6},
        "model": {"num_layers": 2, "num_heads": 4, "hidden_size": 32, "ff_size": 64, "max_positions": 96, "dropout_prob": 0.0},
        "mlm": {"mask_prob": 0.15, "top_k": 8, "epochs": 10, "batch_size": 16, "lr": 0.003, "seed": 0},
        "finetune": {"target_mask_prob": 0.3, "epochs": 6, "batch_size": 16, "lr": 0.002, "pattern": "name_code", "prompt": "basic", "seed": 0},
        "generate": {"max_new_tokens": 20, "decode": {"kind": "greedy"}, "seed": 0},
        "patterns": "patterns.json"
    });
    std::fs::write(base.join("pipeline.json"), serde_json::to_string_pretty(&config).unwrap())
        .unwrap();

    let run = || {
        let status = Command::new(env!("CARGO_BIN_EXE_epccg"))
            .args(["pipeline", "--config"])
            .arg(base.join("pipeline.json"))
            .status()
            .expect("pipeline run");
        assert!(status.success(), "pipeline exited with {status}");
    };

    run();
    let gen1 = std::fs::read(base.join("out/generations.jsonl")).unwrap();
    let rep1 = std::fs::read(base.join("out/report.json")).unwrap();
    run();
    let gen2 = std::fs::read(base.join("out/generations.jsonl")).unwrap();
    let rep2 = std::fs::read(base.join("out/report.json")).unwrap();

    assert_eq!(gen1, gen2, "generations.jsonl differs between runs");
    assert_eq!(rep1, rep2, "report.json differs between runs");
    println!(
        "ACCEPTANCE 10 reproducibility: PASS (generations.jsonl {} bytes and report.json {} bytes byte-identical)",
        gen1.len(),
        rep1.len()
    );
}
