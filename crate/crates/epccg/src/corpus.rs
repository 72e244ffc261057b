//! Corpus data model, JSONL ingestion, synthetic-corpus generation and splits.
//!
//! On-disk layout of a corpus directory:
//!   - `products.jsonl`: one [`ProductRecord`] per line
//!   - `copies.jsonl`:   one [`CopywritingRecord`] per line

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Basic information about one product: the source side of generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductRecord {
    pub sku_id: String,
    pub title: String,
    pub brand: String,
    /// Attribute name -> value, order preserved.
    pub attributes: IndexMap<String, String>,
    pub product_type: String,
    #[serde(default)]
    pub ocr: String,
}

/// One piece of copywriting text, tied to a product by sku.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopywritingRecord {
    pub sku_id: String,
    pub text: String,
    #[serde(default)]
    pub aspect: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub products: Vec<ProductRecord>,
    pub copies: Vec<CopywritingRecord>,
}

impl Corpus {
    /// Checks record invariants and that every copy resolves to a product.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.products {
            if p.sku_id.is_empty() {
                return Err(Error::Data("product with empty sku_id".into()));
            }
            if p.title.is_empty() {
                return Err(Error::Data(format!("product {} has empty title", p.sku_id)));
            }
            if !seen.insert(p.sku_id.as_str()) {
                return Err(Error::Data(format!("duplicate sku_id {}", p.sku_id)));
            }
        }
        let mut dangling: Vec<String> = Vec::new();
        for c in &self.copies {
            if c.text.is_empty() {
                return Err(Error::Data(format!("copy for sku {} has empty text", c.sku_id)));
            }
            if !seen.contains(c.sku_id.as_str()) && !dangling.contains(&c.sku_id) {
                dangling.push(c.sku_id.clone());
            }
        }
        if !dangling.is_empty() {
            return Err(Error::Integrity(dangling));
        }
        Ok(())
    }

    /// sku -> index into `products`.
    pub fn sku_index(&self) -> HashMap<&str, usize> {
        self.products
            .iter()
            .enumerate()
            .map(|(i, p)| (p.sku_id.as_str(), i))
            .collect()
    }

    pub fn product_by_sku(&self, sku: &str) -> Option<&ProductRecord> {
        self.products.iter().find(|p| p.sku_id == sku)
    }
}

fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let content = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_products(path: &Path) -> Result<Vec<ProductRecord>> {
    load_jsonl(path)
}

pub fn load_copies(path: &Path) -> Result<Vec<CopywritingRecord>> {
    load_jsonl(path)
}

/// Loads and validates `products.jsonl` + `copies.jsonl` from a directory.
/// Record order is preserved.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let corpus = Corpus {
        products: load_products(&dir.join("products.jsonl"))?,
        copies: load_copies(&dir.join("copies.jsonl"))?,
    };
    corpus.validate()?;
    Ok(corpus)
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("products.jsonl"), &corpus.products)?;
    write_jsonl(&dir.join("copies.jsonl"), &corpus.copies)?;
    Ok(())
}

/// One aspect of a synthetic corpus: a name, the keywords that signal it,
/// and sentence templates. Templates may use `{keyword}` (replaced by a
/// random keyword of this aspect) and `{name}` slots for any attribute-pool
/// key (replaced by the product's value for that attribute).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthAspect {
    pub name: String,
    pub keywords: Vec<String>,
    pub templates: Vec<String>,
}

/// Specification of a deterministic synthetic corpus with known aspect labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub aspects: Vec<SynthAspect>,
    pub docs_per_aspect: usize,
    /// Attribute name -> candidate values; every product gets one value per name.
    pub attribute_pool: IndexMap<String, Vec<String>>,
    #[serde(default = "default_brand_pool")]
    pub brand_pool: Vec<String>,
    #[serde(default = "default_type_pool")]
    pub type_pool: Vec<String>,
    #[serde(default)]
    pub ocr_pool: Vec<String>,
    /// Probability of appending one keyword from a different aspect to a copy.
    /// 0.0 keeps aspects lexically disjoint (the default, asserted on output).
    #[serde(default)]
    pub cross_aspect_noise: f64,
    pub seed: u64,
}

fn default_brand_pool() -> Vec<String> {
    vec!["novao".into(), "triex".into(), "kelda".into()]
}

fn default_type_pool() -> Vec<String> {
    vec!["phone".into(), "laptop".into(), "tablet".into()]
}

impl SynthSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path)?;
        let spec: SynthSpec = serde_json::from_str(&content)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn num_aspects(&self) -> usize {
        self.aspects.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.aspects.len() < 2 {
            return Err(Error::Config("synth spec needs at least 2 aspects".into()));
        }
        if self.docs_per_aspect == 0 {
            return Err(Error::Config("docs_per_aspect must be >= 1".into()));
        }
        let mut names = HashSet::new();
        for a in &self.aspects {
            if a.name.is_empty() || !names.insert(a.name.as_str()) {
                return Err(Error::Config(format!("aspect name {:?} empty or duplicated", a.name)));
            }
            if a.keywords.is_empty() {
                return Err(Error::Config(format!("aspect {} has no keywords", a.name)));
            }
            if a.templates.is_empty() {
                return Err(Error::Config(format!("aspect {} has no templates", a.name)));
            }
            for t in &a.templates {
                let mentions_keyword =
                    t.contains("{keyword}") || a.keywords.iter().any(|k| t.contains(k.as_str()));
                if !mentions_keyword {
                    return Err(Error::Config(format!(
                        "template {:?} of aspect {} mentions no aspect keyword",
                        t, a.name
                    )));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.cross_aspect_noise) {
            return Err(Error::Config("cross_aspect_noise must be in [0,1]".into()));
        }
        Ok(())
    }
}

fn instantiate_template(
    template: &str,
    aspect: &SynthAspect,
    product: &ProductRecord,
    rng: &mut ChaCha8Rng,
) -> Result<String> {
    let mut out = String::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let end = after.find('}').ok_or_else(|| {
            Error::Config(format!("unclosed slot in template {:?}", template))
        })?;
        let slot = &after[..end];
        if slot == "keyword" {
            out.push_str(aspect.keywords.choose(rng).expect("keywords non-empty"));
        } else if let Some(value) = product.attributes.get(slot) {
            out.push_str(value);
        } else {
            return Err(Error::Config(format!(
                "template slot {{{slot}}} is not an attribute-pool key"
            )));
        }
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Generates a corpus with `docs_per_aspect` copies per aspect, one product
/// per copy. Deterministic: the same spec and seed produce byte-identical
/// output. Returns the corpus and the gold aspect name per copy index.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Corpus, Vec<String>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut products = Vec::new();
    let mut copies = Vec::new();
    let mut gold = Vec::new();

    for (aspect_idx, aspect) in spec.aspects.iter().enumerate() {
        for doc in 0..spec.docs_per_aspect {
            let sku_id = format!("SKU{:05}", products.len());
            let brand = spec.brand_pool.choose(&mut rng).cloned().unwrap_or_default();
            let product_type = spec.type_pool.choose(&mut rng).cloned().unwrap_or_default();
            let mut attributes = IndexMap::new();
            for (name, values) in &spec.attribute_pool {
                if values.is_empty() {
                    return Err(Error::Config(format!("attribute pool {name} is empty")));
                }
                attributes.insert(name.clone(), values.choose(&mut rng).unwrap().clone());
            }
            let title = format!(
                "{} {} m{}",
                brand,
                product_type,
                aspect_idx * spec.docs_per_aspect + doc
            );
            let ocr = spec.ocr_pool.choose(&mut rng).cloned().unwrap_or_default();
            let product = ProductRecord {
                sku_id: sku_id.clone(),
                title,
                brand,
                attributes,
                product_type,
                ocr,
            };

            let template = aspect.templates.choose(&mut rng).expect("templates non-empty");
            let mut text = instantiate_template(template, aspect, &product, &mut rng)?;
            if spec.cross_aspect_noise > 0.0 && rng.gen::<f64>() < spec.cross_aspect_noise {
                let other_idx = {
                    let mut k = rng.gen_range(0..spec.aspects.len() - 1);
                    if k >= aspect_idx {
                        k += 1;
                    }
                    k
                };
                let foreign = spec.aspects[other_idx].keywords.choose(&mut rng).unwrap();
                text.push(' ');
                text.push_str(foreign);
            }

            products.push(product);
            copies.push(CopywritingRecord { sku_id, text, aspect: None });
            gold.push(aspect.name.clone());
        }
    }

    let corpus = Corpus { products, copies };
    corpus.validate()?;
    if spec.cross_aspect_noise == 0.0 {
        assert_gold_recoverable(&corpus, &gold, spec)?;
    }
    Ok((corpus, gold))
}

/// Lexical-disjointness check: each copy must contain at least one keyword of
/// its gold aspect and no keyword of any other aspect.
fn assert_gold_recoverable(corpus: &Corpus, gold: &[String], spec: &SynthSpec) -> Result<()> {
    for (i, copy) in corpus.copies.iter().enumerate() {
        let gold_name = &gold[i];
        for aspect in &spec.aspects {
            let hit = aspect.keywords.iter().any(|k| copy.text.contains(k.as_str()));
            if &aspect.name == gold_name && !hit {
                return Err(Error::Config(format!(
                    "copy {i} misses every keyword of its gold aspect {gold_name}: {:?}",
                    copy.text
                )));
            }
            if &aspect.name != gold_name && hit {
                return Err(Error::Config(format!(
                    "copy {i} (gold {gold_name}) leaks a keyword of aspect {}: {:?}",
                    aspect.name, copy.text
                )));
            }
        }
    }
    Ok(())
}

/// Deterministic partition of the copies; products are replicated into each
/// split so every split is a self-contained corpus. Sizes: floor for train
/// and dev, remainder to test.
pub fn split(corpus: &Corpus, fractions: (f64, f64, f64), seed: u64) -> Result<[Corpus; 3]> {
    let (parts, _) = split_with_indices(corpus, fractions, seed)?;
    Ok(parts)
}

/// Like [`split`] but also returns, per split, the original copy indices.
pub fn split_with_indices(
    corpus: &Corpus,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<([Corpus; 3], [Vec<usize>; 3])> {
    let (ft, fd, fe) = fractions;
    for f in [ft, fd, fe] {
        if f <= 0.0 {
            return Err(Error::Config(format!("split fraction {f} must be > 0")));
        }
    }
    if (ft + fd + fe - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions sum to {}, expected 1",
            ft + fd + fe
        )));
    }
    let n = corpus.copies.len();
    let n_train = (ft * n as f64).floor() as usize;
    let n_dev = (fd * n as f64).floor() as usize;

    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let mut groups = [
        indices[..n_train].to_vec(),
        indices[n_train..n_train + n_dev].to_vec(),
        indices[n_train + n_dev..].to_vec(),
    ];
    for g in &mut groups {
        g.sort_unstable();
    }

    let sku_to_product = corpus.sku_index();
    let build = |idxs: &Vec<usize>| -> Corpus {
        let copies: Vec<CopywritingRecord> =
            idxs.iter().map(|&i| corpus.copies[i].clone()).collect();
        let referenced: HashSet<&str> = copies.iter().map(|c| c.sku_id.as_str()).collect();
        let mut product_idxs: Vec<usize> =
            referenced.iter().map(|sku| sku_to_product[sku]).collect();
        product_idxs.sort_unstable();
        let products = product_idxs.iter().map(|&i| corpus.products[i].clone()).collect();
        Corpus { products, copies }
    };
    let parts = [build(&groups[0]), build(&groups[1]), build(&groups[2])];
    Ok((parts, groups))
}
