use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases, drops every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Token table with the four reserved ids `PAD, BOS, EOS, UNK` at 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Counts normalized tokens over `corpus`; tokens seen at least
    /// `min_count` times get ids by descending count, ties lexicographic.
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut texts = 0usize;
        for text in corpus {
            texts += 1;
            for tok in normalize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if texts == 0 {
            return Err(Error::contract("cannot build a vocabulary from an empty corpus"));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t))
    }

    /// Vocabulary whose non-special tokens are `tokens`, in order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for tok in tokens {
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::contract(format!("invalid token {tok:?}")));
            }
            if index.contains_key(&tok) {
                return Err(Error::contract(format!("duplicate token {tok:?}")));
            }
            index.insert(tok.clone(), all.len() as TokenId);
            all.push(tok);
        }
        Ok(Vocab { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: TokenId) -> bool {
        id < 4
    }

    pub fn encode(&self, text: &str, add_specials: bool) -> Vec<TokenId> {
        let mut ids = Vec::new();
        if add_specials {
            ids.push(BOS);
        }
        ids.extend(
            normalize(text)
                .iter()
                .map(|t| match self.id(t) {
                    Some(id) if !Self::is_special(id) => id,
                    _ => UNK,
                }),
        );
        if add_specials {
            ids.push(EOS);
        }
        ids
    }

    /// Joins non-special tokens with single spaces.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::contract(format!("token id {id} outside vocabulary of {}", self.len())))?;
            if !Self::is_special(id) {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }

    /// One token per line, specials included, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        for (i, special) in SPECIALS.iter().enumerate() {
            if lines.next() != Some(special) {
                return Err(Error::Format(format!(
                    "{}: line {} must be {special}",
                    path.display(),
                    i + 1
                )));
            }
        }
        Self::from_tokens(lines.map(str::to_owned))
    }

    /// Order-sensitive FNV-1a digest of the token table.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for tok in &self.tokens {
            for b in tok.bytes().chain(std::iter::once(b'\n')) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}
