//! Word-level vocabulary with the reserved token block used by the fusion
//! model: padding, sequence markers, input-dropout placeholders and one
//! position marker per candidate slot.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SRC_DROP: TokenId = 4;
pub const CAND_DROP: TokenId = 5;
/// Id of the first candidate position token; candidate `k` uses `FIRST_CAND_POS + k - 1`.
pub const FIRST_CAND_POS: TokenId = 6;

const FIXED_RESERVED: [&str; 6] = ["<pad>", "<s>", "</s>", "<unk>", "<src_drop>", "<cand_drop>"];

/// Splits text into vocabulary words.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    m_max: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    reserved: BTreeMap<String, TokenId>,
    m_max: usize,
}

impl Vocab {
    pub fn reserved_size(m_max: usize) -> usize {
        FIXED_RESERVED.len() + m_max
    }

    fn reserved_names(m_max: usize) -> Vec<String> {
        FIXED_RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain((1..=m_max).map(|k| format!("<cand_{k}>")))
            .collect()
    }

    fn from_words(words: Vec<String>, m_max: usize) -> Result<Self> {
        let mut tokens = Self::reserved_names(m_max);
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Invalid(format!("token {t:?} appears twice in vocabulary")));
            }
        }
        Ok(Self { tokens, index, m_max })
    }

    /// Keeps the `max_size - reserved` most frequent words; equal counts
    /// are ordered lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize, m_max: usize) -> Result<Self> {
        let reserved = Self::reserved_size(m_max);
        if max_size <= reserved {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} must exceed the {reserved} reserved tokens"
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for w in pre_tokenize(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let names = Self::reserved_names(m_max);
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !names.iter().any(|n| n == w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let words = ranked
            .into_iter()
            .take(max_size - reserved)
            .map(|(w, _)| w.to_string())
            .collect();
        Self::from_words(words, m_max)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn m_max(&self) -> usize {
        self.m_max
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        (id as usize) < Self::reserved_size(self.m_max)
    }

    /// Position marker of the `k`-th candidate, `1 <= k <= m_max`.
    pub fn cand_pos(&self, k: usize) -> Result<TokenId> {
        if k == 0 || k > self.m_max {
            return Err(Error::Invalid(format!(
                "candidate position {k} outside 1..={}",
                self.m_max
            )));
        }
        Ok(FIRST_CAND_POS + (k - 1) as TokenId)
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Encodes `text` as `[prepend] words.. EOS`, at most `max_len` ids.
    pub fn encode(&self, text: &str, max_len: usize, prepend: Option<TokenId>) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = prepend.into_iter().collect();
        ids.extend(pre_tokenize(text).into_iter().map(|w| {
            match self.index.get(w) {
                Some(&id) if !self.is_reserved(id) => id,
                _ => UNK,
            }
        }));
        if ids.len() + 1 > max_len {
            ids.truncate(max_len.max(1) - 1);
        }
        ids.push(EOS);
        ids
    }

    /// Joins the non-reserved tokens with single spaces.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Invalid(format!("token id {id} outside vocabulary of {}", self.len())))?;
            if !self.is_reserved(id) {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }

    pub fn to_json(&self) -> String {
        let reserved = Self::reserved_names(self.m_max)
            .into_iter()
            .enumerate()
            .map(|(i, n)| (n, i as TokenId))
            .collect();
        serde_json::to_string(&VocabFile {
            tokens: self.tokens.clone(),
            reserved,
            m_max: self.m_max,
        })
        .expect("vocab serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile =
            serde_json::from_str(json).map_err(|e| Error::Invalid(format!("bad vocab json: {e}")))?;
        let names = Self::reserved_names(file.m_max);
        if file.tokens.len() < names.len() || file.tokens[..names.len()] != names[..] {
            return Err(Error::Invalid("vocab json reserved block does not match m_max".into()));
        }
        for (name, &id) in &file.reserved {
            if names.get(id as usize) != Some(name) {
                return Err(Error::Invalid(format!("reserved token {name:?} has unexpected id {id}")));
            }
        }
        let words = file.tokens[names.len()..].to_vec();
        Self::from_words(words, file.m_max)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }
}
