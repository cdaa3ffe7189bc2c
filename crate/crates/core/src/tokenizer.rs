//! Word-level tokenizer with `[CLS]`/`[SEP]` framing and padding.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Report;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;

pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

pub const DEFAULT_MAX_LEN: usize = 128;

/// Lowercases and splits into alphanumeric runs and single punctuation marks.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_lowercase().collect());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    min_freq: Option<usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, min_freq: Option<usize>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Build(format!("reserved token {r} missing at id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Build(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            min_freq,
        })
    }

    /// Tokens with corpus frequency `>= min_freq`, ordered by descending
    /// frequency then lexicographically, after the four reserved ids.
    pub fn build(corpus: &[Report], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Build("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for report in corpus {
            for tok in tokenize(&report.text) {
                *freq.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = freq
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens, Some(min_freq))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> Option<usize> {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str, max_len: usize) -> TokenSeq {
        encode(text, self, max_len)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(String::from).collect(), None)
    }
}

/// Framed, padded token ids for one report.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    /// 1 for real tokens including `[CLS]`/`[SEP]`, 0 for padding.
    pub mask: Vec<u8>,
    /// Number of real tokens after truncation.
    pub original_length: usize,
}

impl TokenSeq {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// The unpadded prefix.
    pub fn real_ids(&self) -> &[u32] {
        &self.ids[..self.original_length]
    }
}

/// `[CLS] tokens... [SEP]` padded to `max_len`, keeping the head of long
/// reports. Out-of-vocabulary words map to `[UNK]`.
///
/// # Panics
/// If `max_len < 3`.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSeq {
    assert!(max_len >= 3, "max_len must be at least 3");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(
        tokenize(text)
            .iter()
            .take(max_len - 2)
            .map(|t| vocab.id(t).unwrap_or(UNK)),
    );
    ids.push(SEP);
    let original_length = ids.len();
    let mut mask = vec![1u8; original_length];
    ids.resize(max_len, PAD);
    mask.resize(max_len, 0);
    TokenSeq {
        ids,
        mask,
        original_length,
    }
}

/// Surface tokens for the real positions, `[CLS]`/`[SEP]` included.
pub fn surface_tokens(seq: &TokenSeq, vocab: &Vocabulary) -> Result<Vec<String>> {
    seq.real_ids()
        .iter()
        .map(|&id| {
            vocab
                .token(id)
                .map(String::from)
                .ok_or(Error::Decode { id, size: vocab.len() })
        })
        .collect()
}

/// Space-joined surface form, dropping `[CLS]`, `[SEP]` and padding.
pub fn decode(seq: &TokenSeq, vocab: &Vocabulary) -> Result<String> {
    let mut words = Vec::new();
    for &id in &seq.ids {
        let tok = vocab.token(id).ok_or(Error::Decode { id, size: vocab.len() })?;
        if !matches!(id, PAD | CLS | SEP) {
            words.push(tok);
        }
    }
    Ok(words.join(" "))
}
