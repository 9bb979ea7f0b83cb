use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(label: &str) -> Result<Tag<'_>> {
    if label == "O" {
        return Ok(Tag::Outside);
    }
    match label.split_once('-') {
        Some(("B", ty)) if !ty.is_empty() => Ok(Tag::Begin(ty)),
        Some(("I", ty)) if !ty.is_empty() => Ok(Tag::Inside(ty)),
        _ => Err(Error::MalformedLabel(label.to_string())),
    }
}

/// Typed `(type, start, end)` chunks of a BIO sequence, `end` inclusive.
/// An `I-X` that does not continue an `X` chunk opens a new one.
pub fn chunks(labels: &[String]) -> Result<Vec<(String, usize, usize)>> {
    let mut out = Vec::new();
    let mut open: Option<(&str, usize)> = None;
    for (i, l) in labels.iter().enumerate() {
        let tag = parse_tag(l)?;
        let continues = matches!((&tag, open), (Tag::Inside(t), Some((o, _))) if *t == o);
        if continues {
            continue;
        }
        if let Some((ty, s)) = open.take() {
            out.push((ty.to_string(), s, i - 1));
        }
        open = match tag {
            Tag::Outside => None,
            Tag::Begin(t) | Tag::Inside(t) => Some((t, i)),
        };
    }
    if let Some((ty, s)) = open {
        out.push((ty.to_string(), s, labels.len() - 1));
    }
    Ok(out)
}

/// Micro-averaged exact-match chunk precision, recall and F1. "O" tokens form
/// no entity; a metric with an empty denominator is 0.
pub fn entity_f1(pred: &[Vec<String>], gold: &[Vec<String>]) -> Result<Prf> {
    if pred.len() != gold.len() {
        return Err(Error::invalid(format!(
            "{} predicted sequences for {} gold sequences",
            pred.len(),
            gold.len()
        )));
    }
    let mut p_set = BTreeSet::new();
    let mut g_set = BTreeSet::new();
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::invalid(format!(
                "sequence {i}: {} predicted labels for {} gold labels",
                p.len(),
                g.len()
            )));
        }
        p_set.extend(chunks(p)?.into_iter().map(|c| (i, c)));
        g_set.extend(chunks(g)?.into_iter().map(|c| (i, c)));
    }
    let correct = p_set.intersection(&g_set).count();
    let precision = ratio(correct, p_set.len());
    let recall = ratio(correct, g_set.len());
    Ok(Prf {
        precision,
        recall,
        f1: harmonic(precision, recall),
    })
}

fn normalize(s: &str) -> String {
    s.chars()
        .filter(|c| !c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Space- and case-insensitive exact match.
pub fn sciem(pred: &str, gold: &str) -> bool {
    normalize(pred) == normalize(gold)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rouge {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_f1(p: &[String], g: &[String], n: usize) -> f64 {
    if p.len() < n || g.len() < n {
        return 0.0;
    }
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    for w in g.windows(n) {
        *counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0;
    for w in p.windows(n) {
        if let Some(c) = counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    harmonic(
        ratio(overlap, p.len() + 1 - n),
        ratio(overlap, g.len() + 1 - n),
    )
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1, ROUGE-2 and ROUGE-L F-measures over lowercased whitespace tokens.
pub fn rouge(pred: &str, gold: &str) -> Rouge {
    let (p, g) = (tokens(pred), tokens(gold));
    let lcs = lcs_len(&p, &g);
    Rouge {
        rouge1: ngram_f1(&p, &g, 1),
        rouge2: ngram_f1(&p, &g, 2),
        rouge_l: harmonic(ratio(lcs, p.len()), ratio(lcs, g.len())),
    }
}

/// `exp(total_nll / tokens)`.
pub fn perplexity(total_nll: f64, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::invalid("perplexity needs at least one token"));
    }
    Ok((total_nll / tokens as f64).exp())
}
