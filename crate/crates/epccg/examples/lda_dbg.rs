use epccg::corpus::generate_synthetic;
use epccg::lda::{fit_lda, coherence, prepare_documents, LdaConfig};
use std::collections::BTreeSet;

fn main() {
    let spec_json = std::fs::read_to_string("/tmp/acc_spec.json").unwrap();
    let spec: epccg::corpus::SynthSpec = serde_json::from_str(&spec_json).unwrap();
    let (corpus, _) = generate_synthetic(&spec).unwrap();
    let stopwords: BTreeSet<String> = std::fs::read_to_string("/tmp/acc_stop.txt").unwrap()
        .lines().map(|s| s.to_string()).collect();
    let seed_config = epccg::phrase::SeedConfig { min_count: 5, max_len: 9, stopwords: stopwords.clone() };
    let (vocab, _) = epccg::pipeline::build_tokenizer_vocab(&corpus, &seed_config, 0.5, 16).unwrap();
    let docs = prepare_documents(&corpus, &vocab, &stopwords);
    for iterations in [300usize, 1000, 2000] {
        for seed in [7u64, 8, 9] {
            let mut line = format!("iters {iterations} seed {seed}:");
            for m in [4usize, 6, 8] {
                let config = LdaConfig { num_topics: m, alpha: Some(0.1), beta: 0.01, iterations, burn_in: iterations/3, seed };
                let model = fit_lda(&docs, &config).unwrap();
                let (_, mean) = coherence(&model, &docs, 6).unwrap();
                line += &format!("  M={m}: {mean:.2}");
            }
            println!("{line}");
        }
    }
}
