//! Phrase-first tokenization: greedy longest match against the phrase
//! vocabulary, falling back to single grapheme clusters.
//!
//! Id layout: [PAD]=0 [UNK]=1 [SOS]=2 [EOS]=3 [SEP]=4 [MASK]=5, then the
//! reserved aspect slots [ASPECT_0..k), then phrases, then base graphemes.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::phrase::PhraseVocab;
use crate::text::{graphemes, is_whitespace, nfc};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const SOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SEP: u32 = 4;
pub const MASK: u32 = 5;

const FIXED_SPECIALS: [&str; 6] = ["[PAD]", "[UNK]", "[SOS]", "[EOS]", "[SEP]", "[MASK]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    num_aspect_slots: usize,
    phrase_set: HashSet<String>,
    max_phrase_len: usize,
}

impl Vocab {
    /// Assembles the id space from a phrase vocabulary. `extra_phrases` is
    /// for literal prompt prefixes ("aspect:", "title:", ...) that must
    /// tokenize as single tokens but are not corpus phrases.
    pub fn build(phrase_vocab: &PhraseVocab, aspect_slots: usize, extra_phrases: &[String]) -> Vocab {
        let mut tokens: Vec<String> = FIXED_SPECIALS.iter().map(|s| s.to_string()).collect();
        for m in 0..aspect_slots {
            tokens.push(format!("[ASPECT_{m}]"));
        }
        let mut seen: HashSet<&str> = HashSet::new();
        let mut phrases: Vec<String> = Vec::new();
        for p in extra_phrases.iter().map(String::as_str).chain(
            phrase_vocab.entries.iter().map(|e| e.phrase.as_str()),
        ) {
            if seen.insert(p) {
                phrases.push(p.to_string());
            }
        }
        tokens.extend(phrases);
        for unit in &phrase_vocab.base_units {
            tokens.push(unit.clone());
        }
        Self::from_tokens(tokens, aspect_slots).expect("constructed layout is valid")
    }

    /// Rebuilds a vocab from an ordered token list (index = id), validating
    /// the special layout. Aspect slots are recognized by name.
    pub fn from_tokens(mut tokens: Vec<String>, aspect_slots: usize) -> Result<Vocab> {
        for (i, s) in FIXED_SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Data(format!("vocab is missing special {s} at id {i}")));
            }
        }
        for m in 0..aspect_slots {
            let id = FIXED_SPECIALS.len() + m;
            if tokens.get(id).map(String::as_str) != Some(format!("[ASPECT_{m}]").as_str()) {
                return Err(Error::Data(format!("vocab is missing [ASPECT_{m}] at id {id}")));
            }
        }
        // Drop duplicate surfaces past their first occurrence to keep the
        // token<->id map a bijection.
        let mut ids = HashMap::new();
        let mut kept = Vec::new();
        for t in tokens.drain(..) {
            if !ids.contains_key(&t) {
                ids.insert(t.clone(), kept.len() as u32);
                kept.push(t);
            }
        }
        let num_specials = FIXED_SPECIALS.len() + aspect_slots;
        let mut phrase_set = HashSet::new();
        let mut max_phrase_len = 0;
        for t in kept.iter().skip(num_specials) {
            let len = graphemes(t).len();
            if len >= 2 {
                phrase_set.insert(t.clone());
                max_phrase_len = max_phrase_len.max(len);
            }
        }
        Ok(Vocab { tokens: kept, ids, num_aspect_slots: aspect_slots, phrase_set, max_phrase_len })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_aspect_slots(&self) -> usize {
        self.num_aspect_slots
    }

    pub fn token_to_id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn id_to_token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn aspect_token_id(&self, m: usize) -> Result<u32> {
        if m >= self.num_aspect_slots {
            return Err(Error::Argument(format!(
                "aspect slot {m} out of range (vocab reserves {})",
                self.num_aspect_slots
            )));
        }
        Ok((FIXED_SPECIALS.len() + m) as u32)
    }

    /// Specials render nothing on decode: the fixed six plus aspect slots.
    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < FIXED_SPECIALS.len() + self.num_aspect_slots
    }

    /// Ordered token list as a bare JSON array (index = id).
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.tokens)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Vocab> {
        let content = fs::read_to_string(path)?;
        let tokens: Vec<String> = serde_json::from_str(&content)?;
        let mut slots = 0;
        while tokens
            .get(FIXED_SPECIALS.len() + slots)
            .is_some_and(|t| *t == format!("[ASPECT_{slots}]"))
        {
            slots += 1;
        }
        Self::from_tokens(tokens, slots)
    }
}

/// Greedy left-to-right longest match; unmatched positions emit one grapheme
/// ("[UNK]" if it is not a vocab unit); standalone whitespace emits nothing.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<String> {
    let normalized = nfc(text);
    let g = graphemes(&normalized);
    let mut out = Vec::new();
    let mut i = 0;
    while i < g.len() {
        if is_whitespace(g[i]) {
            i += 1;
            continue;
        }
        let max_n = vocab.max_phrase_len.min(g.len() - i);
        let mut matched = false;
        if max_n >= 2 {
            let mut cand = String::new();
            let mut lens = Vec::with_capacity(max_n);
            for unit in &g[i..i + max_n] {
                cand.push_str(unit);
                lens.push(cand.len());
            }
            for n in (2..=max_n).rev() {
                let prefix = &cand[..lens[n - 1]];
                if vocab.phrase_set.contains(prefix) {
                    out.push(prefix.to_string());
                    i += n;
                    matched = true;
                    break;
                }
            }
        }
        if !matched {
            if vocab.token_to_id(g[i]).is_some() {
                out.push(g[i].to_string());
            } else {
                out.push("[UNK]".to_string());
            }
            i += 1;
        }
    }
    out
}

pub fn encode(tokens: &[String], vocab: &Vocab) -> TokenSeq {
    let ids = tokens
        .iter()
        .map(|t| vocab.token_to_id(t).unwrap_or(UNK))
        .collect();
    TokenSeq { ids }
}

pub fn tokenize_to_ids(text: &str, vocab: &Vocab) -> TokenSeq {
    encode(&tokenize(text, vocab), vocab)
}

/// Exact id -> token mapping; errors on out-of-range ids.
pub fn ids_to_tokens(seq: &TokenSeq, vocab: &Vocab) -> Result<Vec<String>> {
    seq.ids
        .iter()
        .map(|&id| {
            vocab
                .id_to_token(id)
                .map(str::to_string)
                .ok_or_else(|| Error::Range(format!("token id {id} >= vocab size {}", vocab.len())))
        })
        .collect()
}

/// Concatenates surfaces, rendering nothing for special tokens.
pub fn decode(seq: &TokenSeq, vocab: &Vocab) -> Result<String> {
    let mut out = String::new();
    for &id in &seq.ids {
        let token = vocab
            .id_to_token(id)
            .ok_or_else(|| Error::Range(format!("token id {id} >= vocab size {}", vocab.len())))?;
        if !vocab.is_special(id) {
            out.push_str(token);
        }
    }
    Ok(out)
}
