use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;
pub const DOC: u32 = 5;
pub const NUM_SPECIALS: usize = 6;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>", "<mask>", "[DOC]"];

pub fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIALS
}

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

/// Whitespace vocabulary with reserved specials and optional byte fallback.
///
/// Ids: specials first, then (with byte fallback) 256 byte tokens, then
/// words by descending frequency with lexicographic tie-break.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    byte_fallback: bool,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    byte_fallback: bool,
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocab {
    fn from(f: VocabFile) -> Self {
        Vocab::from_tokens(f.tokens, f.byte_fallback)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile {
            byte_fallback: v.byte_fallback,
            tokens: v.tokens,
        }
    }
}

/// A text split into ids, with the index of each word's first id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub word_starts: Vec<usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, byte_fallback: bool) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            tokens,
            index,
            byte_fallback,
        }
    }

    /// Builds a vocabulary of at most `budget` entries from whitespace words.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        budget: usize,
        byte_fallback: bool,
    ) -> Result<Vocab> {
        let reserved = NUM_SPECIALS + if byte_fallback { 256 } else { 0 };
        if budget < reserved {
            return Err(Error::invalid(format!(
                "vocabulary budget {budget} is smaller than the {reserved} reserved tokens"
            )));
        }
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        let mut seen_text = false;
        for text in texts {
            seen_text = true;
            for w in text.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        if !seen_text {
            return Err(Error::invalid(
                "cannot build a vocabulary from an empty corpus",
            ));
        }
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        if byte_fallback {
            tokens.extend((0..=255u8).map(byte_token));
        }
        let mut words: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(w, _)| !SPECIAL_TOKENS.contains(w))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        tokens.extend(
            words
                .into_iter()
                .take(budget - reserved)
                .map(|(w, _)| w.to_string()),
        );
        Ok(Vocab::from_tokens(tokens, byte_fallback))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn byte_fallback(&self) -> bool {
        self.byte_fallback
    }

    pub fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        if let Some(id) = self.id(word) {
            out.push(id);
        } else if self.byte_fallback {
            out.extend(word.bytes().map(|b| self.index[&byte_token(b)]));
        } else {
            out.push(UNK);
        }
    }

    pub fn encode(&self, text: &str) -> Encoded {
        self.encode_words(text.split_whitespace())
    }

    pub fn encode_words<'a>(&self, words: impl IntoIterator<Item = &'a str>) -> Encoded {
        let mut ids = Vec::new();
        let mut word_starts = Vec::new();
        for w in words {
            word_starts.push(ids.len());
            self.encode_word(w, &mut ids);
        }
        Encoded { ids, word_starts }
    }

    /// Space-joined words; PAD/BOS/EOS are dropped and byte runs are reassembled.
    /// Adjacent byte-encoded words come back as one word.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, words: &mut Vec<String>| {
            if !bytes.is_empty() {
                words.push(String::from_utf8_lossy(bytes).into_owned());
                bytes.clear();
            }
        };
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            let Some(tok) = self.token(id) else {
                flush(&mut bytes, &mut words);
                words.push(SPECIAL_TOKENS[UNK as usize].to_string());
                continue;
            };
            let byte = (self.byte_fallback
                && (NUM_SPECIALS..NUM_SPECIALS + 256).contains(&(id as usize)))
            .then(|| (id as usize - NUM_SPECIALS) as u8);
            match byte {
                Some(b) => bytes.push(b),
                None => {
                    flush(&mut bytes, &mut words);
                    words.push(tok.to_string());
                }
            }
        }
        flush(&mut bytes, &mut words);
        words.join(" ")
    }

    /// Hex SHA-256 over the token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.byte_fallback as u8]);
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
