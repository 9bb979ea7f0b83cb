use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::vocab::DOC;
use crate::error::{Error, Result};

/// A tokenized document with its language tag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub ids: Vec<u32>,
    pub lang: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub ids: Vec<u32>,
    /// Positions of DOC separators in `ids`.
    pub doc_boundaries: Vec<usize>,
    pub lang: String,
    /// The first token continues a document split off the previous sequence
    /// of the same language.
    pub continued: bool,
}

struct Open {
    ids: Vec<u32>,
    continued: bool,
}

impl Open {
    fn finish(self, lang: &str) -> PackedSequence {
        let doc_boundaries = self
            .ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == DOC)
            .map(|(i, _)| i)
            .collect();
        PackedSequence {
            ids: self.ids,
            doc_boundaries,
            lang: lang.to_string(),
            continued: self.continued,
        }
    }
}

/// Greedy same-language packing in corpus order.
///
/// Consecutive documents in one sequence are separated by DOC; a document
/// that does not fit is continued in the next sequence. A sequence is closed
/// when it reaches `target_len` or when there is no room for a separator
/// plus at least one token. Empty documents are skipped.
pub fn pack_documents(docs: &[Document], target_len: usize) -> Result<Vec<PackedSequence>> {
    if target_len < 2 {
        return Err(Error::invalid("packing target length must be at least 2"));
    }
    let mut out = Vec::new();
    let mut open: BTreeMap<&str, Open> = BTreeMap::new();
    let mut lang_order: Vec<&str> = Vec::new();
    for doc in docs.iter().filter(|d| !d.ids.is_empty()) {
        let lang = doc.lang.as_str();
        if !open.contains_key(lang) {
            lang_order.push(lang);
            open.insert(
                lang,
                Open {
                    ids: Vec::new(),
                    continued: false,
                },
            );
        }
        let buf = open.get_mut(lang).unwrap();
        if !buf.ids.is_empty() {
            if buf.ids.len() + 1 < target_len {
                buf.ids.push(DOC);
            } else {
                let full = std::mem::replace(
                    buf,
                    Open {
                        ids: Vec::new(),
                        continued: false,
                    },
                );
                out.push(full.finish(lang));
            }
        }
        let mut rest = doc.ids.as_slice();
        while !rest.is_empty() {
            let room = target_len - buf.ids.len();
            let take = room.min(rest.len());
            buf.ids.extend_from_slice(&rest[..take]);
            rest = &rest[take..];
            if buf.ids.len() == target_len {
                let full = std::mem::replace(
                    buf,
                    Open {
                        ids: Vec::new(),
                        continued: !rest.is_empty(),
                    },
                );
                out.push(full.finish(lang));
            }
        }
    }
    for lang in lang_order {
        let buf = open.remove(lang).unwrap();
        if !buf.ids.is_empty() {
            out.push(buf.finish(lang));
        }
    }
    Ok(out)
}

/// Inverse of [`pack_documents`]: per language, concatenates the sequences in
/// order and splits at DOC separators and at non-continued sequence starts.
/// Languages appear in order of their first sequence.
pub fn unpack(seqs: &[PackedSequence]) -> Vec<Document> {
    let mut per_lang: Vec<(String, Vec<Vec<u32>>)> = Vec::new();
    for s in seqs {
        let idx = match per_lang.iter().position(|(l, _)| *l == s.lang) {
            Some(i) => i,
            None => {
                per_lang.push((s.lang.clone(), Vec::new()));
                per_lang.len() - 1
            }
        };
        let docs = &mut per_lang[idx].1;
        if !s.continued || docs.is_empty() {
            docs.push(Vec::new());
        }
        for &t in &s.ids {
            if t == DOC {
                docs.push(Vec::new());
            } else {
                docs.last_mut().unwrap().push(t);
            }
        }
    }
    per_lang
        .into_iter()
        .flat_map(|(lang, docs)| {
            docs.into_iter().map(move |ids| Document {
                ids,
                lang: lang.clone(),
            })
        })
        .collect()
}

/// Mean padding fraction when every sequence is padded to `target_len`.
pub fn padding_fraction(seqs: &[PackedSequence], target_len: usize) -> f64 {
    if seqs.is_empty() {
        return 0.0;
    }
    let pad: usize = seqs.iter().map(|s| target_len - s.ids.len()).sum();
    pad as f64 / (seqs.len() * target_len) as f64
}
