//! Fixed vocabulary, greedy longest-match tokenizer, and feasibility
//! canonicalization for mutated token sequences.
//!
//! Token-level search freely produces id sequences that no string maps to
//! (e.g. the pair `["a", "b"]` when the vocabulary also contains `"ab"`).
//! Such sequences cannot be submitted as text, so candidates are re-tokenized
//! ("canonicalized") before they are sent anywhere that accepts strings.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// A sequence of token ids. The unit of prompts, suffixes and targets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn concat(&self, other: &TokenSeq) -> TokenSeq {
        let mut ids = self.0.clone();
        ids.extend_from_slice(&other.0);
        TokenSeq(ids)
    }

    /// Sequence extended by a prefix of `other` (the first `n` tokens).
    pub fn concat_prefix(&self, other: &TokenSeq, n: usize) -> TokenSeq {
        let mut ids = self.0.clone();
        ids.extend_from_slice(&other.0[..n]);
        TokenSeq(ids)
    }

    /// Stable 64-bit content hash, used as a cache key.
    pub fn content_hash(&self) -> u64 {
        // FNV-1a over the id stream; only needs to be deterministic.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &id in &self.0 {
            h ^= id as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }
}

impl FromIterator<TokenId> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        TokenSeq(iter.into_iter().collect())
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, id) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{id}")?;
        }
        write!(f, "]")
    }
}

/// Fixed vocabulary with dense ids `0..n` and unique surfaces.
///
/// Every single character appearing in any surface must itself be a
/// one-character token, which makes greedy tokenization total over the
/// vocabulary's alphabet.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    by_surface: HashMap<String, TokenId>,
    max_surface_len: usize,
}

impl Vocabulary {
    pub fn new(surfaces: Vec<String>) -> Result<Self> {
        if surfaces.is_empty() {
            return Err(Error::InvalidVocabulary("vocabulary is empty".into()));
        }
        let mut by_surface = HashMap::with_capacity(surfaces.len());
        let mut max_surface_len = 0;
        for (id, s) in surfaces.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::InvalidVocabulary(format!(
                    "token {id} has an empty surface"
                )));
            }
            if s.contains('\n') || s.contains('\t') {
                return Err(Error::InvalidVocabulary(format!(
                    "token {id} contains a tab or newline, which the file format cannot represent"
                )));
            }
            if by_surface.insert(s.clone(), id as TokenId).is_some() {
                return Err(Error::InvalidVocabulary(format!("duplicate surface {s:?}")));
            }
            max_surface_len = max_surface_len.max(s.len());
        }
        // Totality: each character of each surface must be a token itself.
        for s in &surfaces {
            for ch in s.chars() {
                if !by_surface.contains_key(ch.to_string().as_str()) {
                    return Err(Error::InvalidVocabulary(format!(
                        "character {ch:?} appears in {s:?} but is not a single-character token"
                    )));
                }
            }
        }
        Ok(Vocabulary {
            surfaces,
            by_surface,
            max_surface_len,
        })
    }

    /// Default test vocabulary: 48 single characters plus 16 seeded
    /// two-character tokens, 64 entries total. The two-character tokens
    /// overlap the single characters so that mutated sequences routinely
    /// need canonicalization.
    pub fn seeded_default(seed: u64) -> Vocabulary {
        use rand::Rng;
        use rand::SeedableRng;

        let mut surfaces: Vec<String> = Vec::with_capacity(64);
        for c in 'a'..='z' {
            surfaces.push(c.to_string());
        }
        for c in '0'..='9' {
            surfaces.push(c.to_string());
        }
        for c in [' ', '.', ',', '!', '?', ':', ';', '\'', '-', '_', '(', ')'] {
            surfaces.push(c.to_string());
        }
        debug_assert_eq!(surfaces.len(), 48);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let letters: Vec<char> = ('a'..='z').collect();
        while surfaces.len() < 64 {
            let a = letters[rng.random_range(0..letters.len())];
            let b = letters[rng.random_range(0..letters.len())];
            let pair = format!("{a}{b}");
            if !surfaces.contains(&pair) {
                surfaces.push(pair);
            }
        }
        Vocabulary::new(surfaces).expect("seeded default vocabulary is valid")
    }

    pub fn size(&self) -> u32 {
        self.surfaces.len() as u32
    }

    pub fn surface(&self, id: TokenId) -> Result<&str> {
        self.surfaces
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.size(),
            })
    }

    pub fn check_seq(&self, seq: &TokenSeq) -> Result<()> {
        for &id in seq.ids() {
            if id as usize >= self.surfaces.len() {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: self.size(),
                });
            }
        }
        Ok(())
    }

    /// Greedy longest-match tokenization. At each position the longest
    /// surface that prefixes the remaining text is consumed.
    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        let mut ids = Vec::new();
        let bytes = text.as_bytes();
        let mut pos = 0;
        while pos < bytes.len() {
            let mut matched = None;
            let end = (pos + self.max_surface_len).min(bytes.len());
            let mut cut = end;
            while cut > pos {
                if text.is_char_boundary(cut) {
                    if let Some(&id) = self.by_surface.get(&text[pos..cut]) {
                        matched = Some((id, cut));
                        break;
                    }
                }
                cut -= 1;
            }
            match matched {
                Some((id, next)) => {
                    ids.push(id);
                    pos = next;
                }
                None => return Err(Error::Tokenize { position: pos }),
            }
        }
        Ok(TokenSeq(ids))
    }

    pub fn detokenize(&self, seq: &TokenSeq) -> Result<String> {
        let mut out = String::new();
        for &id in seq.ids() {
            out.push_str(self.surface(id)?);
        }
        Ok(out)
    }

    /// Re-tokenization of the detokenized text: the id sequence the
    /// tokenizer itself would produce for the same string. Idempotent, and
    /// the only form safe to submit as text.
    pub fn canonicalize(&self, seq: &TokenSeq) -> Result<TokenSeq> {
        self.tokenize(&self.detokenize(seq)?)
    }

    /// One line per token: `<id>\t<surface>`.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (id, s) in self.surfaces.iter().enumerate() {
            out.push_str(&format!("{id}\t{s}\n"));
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Vocabulary> {
        let mut entries: Vec<(u32, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, surface) = line.split_once('\t').ok_or_else(|| {
                Error::InvalidVocabulary(format!("line {}: expected <id>\\t<surface>", lineno + 1))
            })?;
            let id: u32 = id.parse().map_err(|_| {
                Error::InvalidVocabulary(format!("line {}: bad token id {id:?}", lineno + 1))
            })?;
            entries.push((id, surface.to_string()));
        }
        entries.sort_by_key(|(id, _)| *id);
        for (want, (got, _)) in entries.iter().enumerate() {
            if want as u32 != *got {
                return Err(Error::InvalidVocabulary(format!(
                    "token ids are not dense: expected {want}, found {got}"
                )));
            }
        }
        Vocabulary::new(entries.into_iter().map(|(_, s)| s).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path)?;
        Vocabulary::from_file_string(&text)
    }
}
