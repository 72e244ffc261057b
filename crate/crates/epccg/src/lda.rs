//! Aspect extraction: collapsed-Gibbs LDA over bag-of-words documents,
//! UMass coherence, a coherence-driven hyperparameter sweep, and
//! config-driven refinement of the extracted aspect set.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::tokenizer::{tokenize, Vocab};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdaConfig {
    pub num_topics: usize,
    /// Symmetric Dirichlet prior on doc-topic mixtures; default 50/M.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_beta() -> f64 {
    0.01
}
fn default_iterations() -> usize {
    500
}
fn default_burn_in() -> usize {
    100
}

impl LdaConfig {
    pub fn new(num_topics: usize, seed: u64) -> Self {
        LdaConfig {
            num_topics,
            alpha: None,
            beta: default_beta(),
            iterations: default_iterations(),
            burn_in: default_burn_in(),
            seed,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(50.0 / self.num_topics as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_topics < 2 {
            return Err(Error::Config("num_topics must be >= 2".into()));
        }
        if self.alpha() <= 0.0 || self.beta <= 0.0 {
            return Err(Error::Config("alpha and beta must be > 0".into()));
        }
        if self.iterations <= self.burn_in {
            return Err(Error::Config("iterations must exceed burn_in".into()));
        }
        Ok(())
    }
}

/// Fitted topic model: smoothed topic-word and doc-topic distributions plus
/// the final token-topic assignments.
#[derive(Debug, Clone)]
pub struct LdaModel {
    pub phi: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub assignments: Vec<Vec<usize>>,
    pub vocab: Vec<String>,
}

impl LdaModel {
    pub fn num_topics(&self) -> usize {
        self.phi.len()
    }

    /// Top `j` vocab indices of a topic by probability, ties by vocab order.
    pub fn top_word_indices(&self, topic: usize, j: usize) -> Vec<usize> {
        let row = &self.phi[topic];
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        idx.truncate(j);
        idx
    }

    pub fn top_words(&self, topic: usize, j: usize) -> Vec<String> {
        self.top_word_indices(topic, j)
            .into_iter()
            .map(|i| self.vocab[i].clone())
            .collect()
    }
}

/// Tokenizes copies with the phrase-first tokenizer and drops stopwords and
/// special tokens; the bag-of-words input to [`fit_lda`].
pub fn prepare_documents(
    corpus: &Corpus,
    vocab: &Vocab,
    stopwords: &BTreeSet<String>,
) -> Vec<Vec<String>> {
    corpus
        .copies
        .iter()
        .map(|c| {
            tokenize(&c.text, vocab)
                .into_iter()
                .filter(|t| !stopwords.contains(t) && !t.starts_with('['))
                .collect()
        })
        .collect()
}

/// Collapsed Gibbs sampler: phi and theta are integrated out and each token's
/// topic is resampled from
///   p(z=k) ∝ (n_dk + α) (n_kw + β) / (n_k + Vβ)
/// with the token's own count removed.
pub struct GibbsSampler {
    pub num_topics: usize,
    alpha: f64,
    beta: f64,
    docs: Vec<Vec<usize>>,
    pub z: Vec<Vec<usize>>,
    n_dk: Vec<Vec<u32>>,
    n_kw: Vec<Vec<u32>>,
    n_k: Vec<u32>,
    vocab: Vec<String>,
    rng: ChaCha8Rng,
}

impl GibbsSampler {
    pub fn new(documents: &[Vec<String>], config: &LdaConfig) -> Result<GibbsSampler> {
        config.validate()?;
        if documents.is_empty() {
            return Err(Error::Data("no documents to fit".into()));
        }
        if documents.iter().any(|d| d.is_empty()) {
            return Err(Error::Data("a document tokenized to zero tokens".into()));
        }
        // Lexicographic vocab: deterministic and, for degenerate near-uniform
        // topic rows, ties break to an alphabetical word mix rather than to
        // whichever document came first.
        let vocab: Vec<String> = documents
            .iter()
            .flatten()
            .cloned()
            .collect::<BTreeSet<String>>()
            .into_iter()
            .collect();
        let word_ids: HashMap<&str, usize> =
            vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        let docs: Vec<Vec<usize>> = documents
            .iter()
            .map(|doc| doc.iter().map(|w| word_ids[w.as_str()]).collect())
            .collect();

        let m = config.num_topics;
        let v = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut n_dk = vec![vec![0u32; m]; docs.len()];
        let mut n_kw = vec![vec![0u32; v]; m];
        let mut n_k = vec![0u32; m];
        let z: Vec<Vec<usize>> = docs
            .iter()
            .enumerate()
            .map(|(d, doc)| {
                doc.iter()
                    .map(|&w| {
                        let k = rng.gen_range(0..m);
                        n_dk[d][k] += 1;
                        n_kw[k][w] += 1;
                        n_k[k] += 1;
                        k
                    })
                    .collect()
            })
            .collect();

        Ok(GibbsSampler {
            num_topics: m,
            alpha: config.alpha(),
            beta: config.beta,
            docs,
            z,
            n_dk,
            n_kw,
            n_k,
            vocab,
            rng,
        })
    }

    /// One full sweep: resample every token's topic once.
    pub fn sweep(&mut self) {
        let v_beta = self.vocab.len() as f64 * self.beta;
        let mut weights = vec![0.0f64; self.num_topics];
        for d in 0..self.docs.len() {
            for i in 0..self.docs[d].len() {
                let w = self.docs[d][i];
                let old = self.z[d][i];
                self.n_dk[d][old] -= 1;
                self.n_kw[old][w] -= 1;
                self.n_k[old] -= 1;

                let mut total = 0.0;
                for k in 0..self.num_topics {
                    let wk = (self.n_dk[d][k] as f64 + self.alpha)
                        * (self.n_kw[k][w] as f64 + self.beta)
                        / (self.n_k[k] as f64 + v_beta);
                    weights[k] = wk;
                    total += wk;
                }
                let mut u = self.rng.gen::<f64>() * total;
                let mut new = self.num_topics - 1;
                for (k, &wk) in weights.iter().enumerate() {
                    u -= wk;
                    if u <= 0.0 {
                        new = k;
                        break;
                    }
                }

                self.z[d][i] = new;
                self.n_dk[d][new] += 1;
                self.n_kw[new][w] += 1;
                self.n_k[new] += 1;
            }
        }
    }

    fn snapshot_into(&self, acc_dk: &mut [Vec<f64>], acc_kw: &mut [Vec<f64>]) {
        for (d, row) in self.n_dk.iter().enumerate() {
            for (k, &c) in row.iter().enumerate() {
                acc_dk[d][k] += c as f64;
            }
        }
        for (k, row) in self.n_kw.iter().enumerate() {
            for (w, &c) in row.iter().enumerate() {
                acc_kw[k][w] += c as f64;
            }
        }
    }
}

/// Runs the sampler for `iterations` sweeps and estimates phi/theta from the
/// counts averaged over the post-burn-in sweeps, with Dirichlet smoothing.
pub fn fit_lda(documents: &[Vec<String>], config: &LdaConfig) -> Result<LdaModel> {
    let mut sampler = GibbsSampler::new(documents, config)?;
    let m = config.num_topics;
    let v = sampler.vocab.len();
    let mut acc_dk = vec![vec![0.0f64; m]; sampler.docs.len()];
    let mut acc_kw = vec![vec![0.0f64; v]; m];
    let mut samples = 0usize;
    for it in 0..config.iterations {
        sampler.sweep();
        if it >= config.burn_in {
            sampler.snapshot_into(&mut acc_dk, &mut acc_kw);
            samples += 1;
        }
    }
    let s = samples as f64;
    let alpha = config.alpha();
    let beta = config.beta;
    let v_beta = v as f64 * beta;

    let phi: Vec<Vec<f64>> = (0..m)
        .map(|k| {
            let n_k: f64 = acc_kw[k].iter().sum::<f64>() / s;
            acc_kw[k]
                .iter()
                .map(|&c| (c / s + beta) / (n_k + v_beta))
                .collect()
        })
        .collect();
    let theta: Vec<Vec<f64>> = acc_dk
        .iter()
        .map(|row| {
            let n_d: f64 = row.iter().sum::<f64>() / s;
            row.iter()
                .map(|&c| (c / s + alpha) / (n_d + m as f64 * alpha))
                .collect()
        })
        .collect();

    Ok(LdaModel { phi, theta, assignments: sampler.z, vocab: sampler.vocab })
}

/// UMass coherence per topic over the fitting documents:
///   C = sum over ranked top-word pairs (i earlier than j) of
///       ln((D(w_i, w_j) + 1) / D(w_j))
/// where D counts documents containing the word(s). Returns per-topic scores
/// and their mean.
pub fn coherence(
    model: &LdaModel,
    documents: &[Vec<String>],
    top_j: usize,
) -> Result<(Vec<f64>, f64)> {
    if top_j < 2 {
        return Err(Error::Argument("coherence needs top_j >= 2".into()));
    }
    let doc_sets: Vec<HashSet<&str>> = documents
        .iter()
        .map(|d| d.iter().map(String::as_str).collect())
        .collect();
    let doc_freq = |w: &str| doc_sets.iter().filter(|s| s.contains(w)).count();
    let co_freq =
        |a: &str, b: &str| doc_sets.iter().filter(|s| s.contains(a) && s.contains(b)).count();

    let mut per_topic = Vec::with_capacity(model.num_topics());
    for k in 0..model.num_topics() {
        let words = model.top_words(k, top_j);
        let mut c = 0.0;
        for i in 0..words.len() {
            for j in i + 1..words.len() {
                let d_j = doc_freq(&words[j]);
                assert!(d_j > 0, "top word {:?} absent from corpus", words[j]);
                c += ((co_freq(&words[i], &words[j]) + 1) as f64 / d_j as f64).ln();
            }
        }
        per_topic.push(c);
    }
    let mean = per_topic.iter().sum::<f64>() / per_topic.len() as f64;
    Ok((per_topic, mean))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoherenceEntry {
    pub config_index: usize,
    pub num_topics: usize,
    pub per_topic: Vec<f64>,
    pub mean: f64,
}

pub type CoherenceReport = Vec<CoherenceEntry>;

/// Index of the entry with maximal mean coherence; ties broken by smaller
/// topic count, then report order.
pub fn select_best(report: &CoherenceReport) -> Option<usize> {
    report
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            b.mean
                .total_cmp(&a.mean)
                .then(a.num_topics.cmp(&b.num_topics))
                .then(ia.cmp(ib))
        })
        .map(|(i, _)| i)
}

/// Fits every config in the grid and keeps the most coherent model.
pub fn sweep(
    documents: &[Vec<String>],
    grid: &[LdaConfig],
    top_j: usize,
) -> Result<(LdaModel, CoherenceReport)> {
    if grid.is_empty() {
        return Err(Error::Config("empty LDA grid".into()));
    }
    let mut report = Vec::with_capacity(grid.len());
    let mut models = Vec::with_capacity(grid.len());
    for (i, config) in grid.iter().enumerate() {
        let model = fit_lda(documents, config)
            .map_err(|e| Error::Config(format!("grid entry {i}: {e}")))?;
        let (per_topic, mean) = coherence(&model, documents, top_j)?;
        report.push(CoherenceEntry {
            config_index: i,
            num_topics: config.num_topics,
            per_topic,
            mean,
        });
        models.push(model);
    }
    let best = select_best(&report).expect("non-empty report");
    Ok((models.swap_remove(best), report))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aspect {
    pub name: String,
    pub keywords: Vec<String>,
    #[serde(default)]
    pub topic_id: Option<usize>,
}

/// Ordered list of named aspects; the control signal of the whole pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AspectSet {
    pub aspects: Vec<Aspect>,
}

impl AspectSet {
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for a in &self.aspects {
            if a.name.is_empty() || !names.insert(a.name.as_str()) {
                return Err(Error::Config(format!("aspect name {:?} empty or duplicated", a.name)));
            }
            if a.keywords.is_empty() {
                return Err(Error::Config(format!("aspect {} has no keywords", a.name)));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.aspects.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.aspects.iter().position(|a| a.name == name)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<AspectSet> {
        let set: AspectSet = serde_json::from_str(&fs::read_to_string(path)?)?;
        set.validate()?;
        Ok(set)
    }
}

/// One aspect per topic with placeholder names and top-`j` keyword lists.
pub fn extract_aspects(model: &LdaModel, top_j: usize) -> Result<AspectSet> {
    if top_j < 1 {
        return Err(Error::Argument("extract_aspects needs top_j >= 1".into()));
    }
    let aspects = (0..model.num_topics())
        .map(|k| Aspect {
            name: format!("topic_{k}"),
            keywords: model.top_words(k, top_j),
            topic_id: Some(k),
        })
        .collect();
    Ok(AspectSet { aspects })
}

/// A reproducible stand-in for the human refinement step.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum RefineEdit {
    Rename { topic_id: usize, name: String },
    Merge { topic_ids: Vec<usize>, name: String },
    Drop { topic_id: usize },
    Add { name: String, keywords: Vec<String> },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RefinementConfig {
    pub edits: Vec<RefineEdit>,
}

impl RefinementConfig {
    pub fn load_json(path: &Path) -> Result<RefinementConfig> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Applies edits in order. Merge unions keyword lists (dedup, order kept)
/// into the first named topic's slot. The result must keep >= 2 aspects.
pub fn refine(aspects: &AspectSet, edits: &RefinementConfig) -> Result<AspectSet> {
    let mut current = aspects.aspects.clone();
    let position_of = |list: &[Aspect], topic_id: usize| -> Result<usize> {
        list.iter()
            .position(|a| a.topic_id == Some(topic_id))
            .ok_or_else(|| Error::Config(format!("edit references unknown topic_id {topic_id}")))
    };
    for edit in &edits.edits {
        match edit {
            RefineEdit::Rename { topic_id, name } => {
                let i = position_of(&current, *topic_id)?;
                current[i].name = name.clone();
            }
            RefineEdit::Merge { topic_ids, name } => {
                if topic_ids.is_empty() {
                    return Err(Error::Config("merge needs at least one topic_id".into()));
                }
                let positions: Vec<usize> = topic_ids
                    .iter()
                    .map(|t| position_of(&current, *t))
                    .collect::<Result<_>>()?;
                let target = positions[0];
                let mut keywords = Vec::new();
                for &p in &positions {
                    for k in &current[p].keywords {
                        if !keywords.contains(k) {
                            keywords.push(k.clone());
                        }
                    }
                }
                current[target] = Aspect {
                    name: name.clone(),
                    keywords,
                    topic_id: current[target].topic_id,
                };
                let mut remove: Vec<usize> = positions[1..].to_vec();
                remove.sort_unstable();
                for p in remove.into_iter().rev() {
                    current.remove(p);
                }
            }
            RefineEdit::Drop { topic_id } => {
                let i = position_of(&current, *topic_id)?;
                current.remove(i);
            }
            RefineEdit::Add { name, keywords } => {
                current.push(Aspect { name: name.clone(), keywords: keywords.clone(), topic_id: None });
            }
        }
    }
    if current.len() < 2 {
        return Err(Error::Config(format!(
            "refinement left {} aspect(s), need at least 2",
            current.len()
        )));
    }
    let set = AspectSet { aspects: current };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn two_cluster_docs() -> Vec<Vec<String>> {
        vec![
            words("a b c a b c a b c a b c"),
            words("x y z x y z x y z x y z"),
        ]
    }

    #[test]
    fn disjoint_vocabularies_separate_with_full_purity() {
        let docs = two_cluster_docs();
        let config = LdaConfig {
            num_topics: 2,
            alpha: Some(0.1),
            beta: 0.01,
            iterations: 200,
            burn_in: 50,
            seed: 1,
        };
        let model = fit_lda(&docs, &config).unwrap();
        let t0: usize = (0..2).max_by(|&a, &b| model.theta[0][a].total_cmp(&model.theta[0][b])).unwrap();
        let t1: usize = (0..2).max_by(|&a, &b| model.theta[1][a].total_cmp(&model.theta[1][b])).unwrap();
        assert_ne!(t0, t1, "theta: {:?}", model.theta);
        // Assignment purity: every token of a doc carries the doc's topic.
        for (d, z_d) in model.assignments.iter().enumerate() {
            let expected = if d == 0 { t0 } else { t1 };
            assert!(z_d.iter().all(|&z| z == expected), "doc {d} assignments {z_d:?}");
        }
    }

    #[test]
    fn single_topic_config_is_rejected() {
        let config = LdaConfig::new(1, 0);
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn iterations_must_exceed_burn_in() {
        let mut config = LdaConfig::new(2, 0);
        config.iterations = 100;
        config.burn_in = 100;
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rows_normalize_even_on_degenerate_corpus() {
        let docs = vec![words("a a a")];
        let mut config = LdaConfig::new(2, 3);
        config.iterations = 20;
        config.burn_in = 5;
        let model = fit_lda(&docs, &config).unwrap();
        for row in &model.phi {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
        assert!((model.theta[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_corpus_is_a_data_error() {
        let config = LdaConfig::new(2, 0);
        assert!(matches!(fit_lda(&[], &config), Err(Error::Data(_))));
        assert!(matches!(
            fit_lda(&[vec![]], &config),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn exchangeability_same_topics_under_doc_permutation() {
        let docs = two_cluster_docs();
        let mut reversed = docs.clone();
        reversed.reverse();
        let config = LdaConfig {
            num_topics: 2,
            alpha: Some(0.1),
            beta: 0.01,
            iterations: 150,
            burn_in: 50,
            seed: 9,
        };
        let collect = |docs: &[Vec<String>]| -> BTreeSet<Vec<String>> {
            let model = fit_lda(docs, &config).unwrap();
            (0..2)
                .map(|k| {
                    let mut w = model.top_words(k, 3);
                    w.sort();
                    w
                })
                .collect()
        };
        assert_eq!(collect(&docs), collect(&reversed));
    }

    #[test]
    fn coherence_matches_document_counting_oracle() {
        // Every document containing b also contains a; D(b) = 4.
        let docs = vec![
            words("a b"),
            words("a b"),
            words("a b"),
            words("a b"),
            words("a c"),
            words("a c"),
        ];
        let model = LdaModel {
            phi: vec![vec![0.6, 0.3, 0.1]],
            theta: vec![vec![1.0]; 6],
            assignments: vec![vec![0; 2]; 6],
            vocab: vec!["a".into(), "b".into(), "c".into()],
        };
        let (per_topic, mean) = coherence(&model, &docs, 2).unwrap();
        let expected = (5.0f64 / 4.0).ln();
        assert!((per_topic[0] - expected).abs() < 1e-12);
        assert!((mean - expected).abs() < 1e-12);
    }

    #[test]
    fn never_cooccurring_top_words_score_log_one_over_d() {
        let mut docs: Vec<Vec<String>> = (0..10).map(|_| words("b filler")).collect();
        docs.push(words("a solo"));
        docs.push(words("a solo"));
        let model = LdaModel {
            phi: vec![vec![0.7, 0.3, 0.0, 0.0]],
            theta: vec![vec![1.0]; 12],
            assignments: vec![vec![0; 2]; 12],
            vocab: vec!["a".into(), "b".into(), "filler".into(), "solo".into()],
        };
        let (per_topic, _) = coherence(&model, &docs, 2).unwrap();
        assert!((per_topic[0] - (1.0f64 / 10.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn coherence_rejects_top_j_below_two() {
        let docs = vec![words("a b")];
        let model = LdaModel {
            phi: vec![vec![0.5, 0.5]],
            theta: vec![vec![1.0]],
            assignments: vec![vec![0, 0]],
            vocab: vec!["a".into(), "b".into()],
        };
        assert!(matches!(coherence(&model, &docs, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn select_best_prefers_high_mean_then_small_m_then_order() {
        let entry = |i, m, mean| CoherenceEntry {
            config_index: i,
            num_topics: m,
            per_topic: vec![],
            mean,
        };
        let report = vec![entry(0, 4, 2.0), entry(1, 2, 1.0)];
        assert_eq!(select_best(&report), Some(0));
        let report = vec![entry(0, 4, 1.5), entry(1, 2, 1.5), entry(2, 2, 1.5)];
        assert_eq!(select_best(&report), Some(1));
        // Argmax is invariant under adding a constant to all scores.
        let shifted: CoherenceReport = report
            .iter()
            .cloned()
            .map(|mut e| {
                e.mean += 123.25;
                e
            })
            .collect();
        assert_eq!(select_best(&shifted), Some(1));
    }

    #[test]
    fn sweep_of_one_returns_that_model() {
        let docs = two_cluster_docs();
        let mut config = LdaConfig::new(2, 5);
        config.iterations = 50;
        config.burn_in = 10;
        let (model, report) = sweep(&docs, &[config], 2).unwrap();
        assert_eq!(model.num_topics(), 2);
        assert_eq!(report.len(), 1);
    }

    #[test]
    fn sweep_recovers_planted_aspect_count() {
        // Three lexically disjoint vocabularies; the sweep should pick M=3.
        let clusters = [
            ["red", "warm", "soft", "cozy"],
            ["fast", "sharp", "lean", "agile"],
            ["deep", "calm", "quiet", "still"],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut docs = Vec::new();
        for c in 0..3 {
            for _ in 0..40 {
                let doc: Vec<String> = (0..8)
                    .map(|_| clusters[c][rng.gen_range(0..4)].to_string())
                    .collect();
                docs.push(doc);
            }
        }
        let grid: Vec<LdaConfig> = [2usize, 3, 6]
            .iter()
            .map(|&m| LdaConfig {
                num_topics: m,
                alpha: Some(0.1),
                beta: 0.01,
                iterations: 150,
                burn_in: 50,
                seed: 7,
            })
            .collect();
        let (model, report) = sweep(&docs, &grid, 4).unwrap();
        let best = select_best(&report).unwrap();
        assert_eq!(report[best].num_topics, 3, "report: {report:?}");
        assert_eq!(model.num_topics(), 3);
    }

    #[test]
    fn extract_aspects_follows_phi_and_tie_rules() {
        let model = LdaModel {
            phi: vec![vec![0.0, 1.0, 0.0], vec![1.0 / 3.0; 3]],
            theta: vec![vec![0.5, 0.5]],
            assignments: vec![vec![0]],
            vocab: vec!["alpha".into(), "battery".into(), "gamma".into()],
        };
        let one = extract_aspects(&model, 1).unwrap();
        assert_eq!(one.aspects[0].keywords, vec!["battery".to_string()]);
        assert_eq!(one.aspects[0].name, "topic_0");
        // Uniform row: ties resolved by vocab order.
        let two = extract_aspects(&model, 2).unwrap();
        assert_eq!(two.aspects[1].keywords, vec!["alpha".to_string(), "battery".to_string()]);
    }

    #[test]
    fn planted_topics_keep_their_keywords() {
        let docs = two_cluster_docs();
        let config = LdaConfig {
            num_topics: 2,
            alpha: Some(0.1),
            beta: 0.01,
            iterations: 150,
            burn_in: 50,
            seed: 2,
        };
        let model = fit_lda(&docs, &config).unwrap();
        let set = extract_aspects(&model, 3).unwrap();
        let planted: [BTreeSet<String>; 2] = [
            ["a", "b", "c"].iter().map(|s| s.to_string()).collect(),
            ["x", "y", "z"].iter().map(|s| s.to_string()).collect(),
        ];
        for aspect in &set.aspects {
            let keywords: BTreeSet<String> = aspect.keywords.iter().cloned().collect();
            assert!(
                planted.iter().any(|p| p.is_subset(&keywords)),
                "keywords {keywords:?} cover no planted cluster"
            );
        }
    }

    fn three_aspects() -> AspectSet {
        AspectSet {
            aspects: (0..3)
                .map(|k| Aspect {
                    name: format!("topic_{k}"),
                    keywords: vec![format!("w{k}a"), format!("w{k}b")],
                    topic_id: Some(k),
                })
                .collect(),
        }
    }

    #[test]
    fn rename_keeps_keywords() {
        let set = three_aspects();
        let edits = RefinementConfig {
            edits: vec![RefineEdit::Rename { topic_id: 0, name: "battery".into() }],
        };
        let refined = refine(&set, &edits).unwrap();
        assert_eq!(refined.aspects[0].name, "battery");
        assert_eq!(refined.aspects[0].keywords, set.aspects[0].keywords);
    }

    #[test]
    fn merge_reduces_count_and_unions_keywords() {
        let set = three_aspects();
        let edits = RefinementConfig {
            edits: vec![RefineEdit::Merge { topic_ids: vec![0, 1], name: "style".into() }],
        };
        let refined = refine(&set, &edits).unwrap();
        assert_eq!(refined.aspects.len(), 2);
        assert_eq!(refined.aspects[0].name, "style");
        assert_eq!(
            refined.aspects[0].keywords,
            vec!["w0a".to_string(), "w0b".into(), "w1a".into(), "w1b".into()]
        );
    }

    #[test]
    fn dropping_below_two_aspects_fails() {
        let set = three_aspects();
        let edits = RefinementConfig {
            edits: vec![
                RefineEdit::Drop { topic_id: 0 },
                RefineEdit::Drop { topic_id: 1 },
            ],
        };
        assert!(matches!(refine(&set, &edits), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_topic_id_fails() {
        let set = three_aspects();
        let edits = RefinementConfig {
            edits: vec![RefineEdit::Rename { topic_id: 9, name: "x".into() }],
        };
        assert!(matches!(refine(&set, &edits), Err(Error::Config(_))));
    }

    #[test]
    fn aspects_json_roundtrip() {
        let set = three_aspects();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aspects.json");
        set.save_json(&path).unwrap();
        assert_eq!(AspectSet::load_json(&path).unwrap(), set);
    }
}
