//! Seeded synthetic corpora: Markov-chain "languages" for pre-training and
//! small separable tasks for fine-tuning.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{ClassificationRecord, CorpusRecord, GenerationRecord, LabelingRecord};

/// Shape of a family of Markov-chain languages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovSpec {
    pub languages: usize,
    pub words_per_language: usize,
    /// Successor candidates per word; lower means lower entropy.
    pub branching: usize,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for MarkovSpec {
    fn default() -> Self {
        MarkovSpec {
            languages: 2,
            words_per_language: 100,
            branching: 3,
            min_words: 8,
            max_words: 40,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MarkovLanguage {
    pub tag: String,
    pub words: Vec<String>,
    successors: Vec<Vec<(usize, f64)>>,
}

impl MarkovLanguage {
    fn new<R: Rng>(index: usize, spec: &MarkovSpec, rng: &mut R) -> Self {
        let tag = format!("l{index}");
        let n = spec.words_per_language;
        let words = (0..n).map(|k| format!("{tag}w{k}")).collect();
        let successors = (0..n)
            .map(|_| {
                let raw: Vec<(usize, f64)> = (0..spec.branching.max(1))
                    .map(|_| (rng.random_range(0..n), rng.random::<f64>() + 0.1))
                    .collect();
                let z: f64 = raw.iter().map(|(_, w)| w).sum();
                let mut acc = 0.0;
                raw.into_iter()
                    .map(|(j, w)| {
                        acc += w / z;
                        (j, acc)
                    })
                    .collect()
            })
            .collect();
        MarkovLanguage {
            tag,
            words,
            successors,
        }
    }

    pub fn sample<R: Rng>(&self, len: usize, rng: &mut R) -> Vec<&str> {
        let mut cur = rng.random_range(0..self.words.len());
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.words[cur].as_str());
            let u: f64 = rng.random();
            let next = &self.successors[cur];
            cur = next
                .iter()
                .find(|(_, c)| u < *c)
                .unwrap_or(next.last().unwrap())
                .0;
        }
        out
    }
}

pub fn markov_languages(spec: &MarkovSpec, seed: u64) -> Vec<MarkovLanguage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.languages)
        .map(|i| MarkovLanguage::new(i, spec, &mut rng))
        .collect()
}

/// `docs_per_language` documents per language, interleaved round-robin.
/// The languages depend only on `lang_seed`, so corpora drawn with different
/// `sample_seed`s come from the same distribution.
pub fn markov_corpus(
    spec: &MarkovSpec,
    docs_per_language: usize,
    lang_seed: u64,
    sample_seed: u64,
) -> Vec<CorpusRecord> {
    let langs = markov_languages(spec, lang_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut out = Vec::with_capacity(docs_per_language * langs.len());
    for _ in 0..docs_per_language {
        for l in &langs {
            let len = rng.random_range(spec.min_words..=spec.max_words);
            out.push(CorpusRecord {
                text: l.sample(len, &mut rng).join(" "),
                lang: l.tag.clone(),
            });
        }
    }
    out
}

fn filler(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<String> {
    let n = rng.random_range(lo..hi);
    (0..n)
        .map(|_| format!("f{}", rng.random_range(0..20)))
        .collect()
}

/// Each example is filler plus one keyword of its class; the keyword
/// determines the label.
pub fn classification_task(classes: usize, n: usize, seed: u64) -> Vec<ClassificationRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let c = i % classes;
            let mut words = filler(&mut rng, 3, 8);
            let pos = rng.random_range(0..=words.len());
            words.insert(pos, format!("k{c}x{}", rng.random_range(0..3)));
            ClassificationRecord {
                text: words.join(" "),
                label: format!("c{c}"),
            }
        })
        .collect()
}

/// BIO-tagged sentences: typed entities of one or two words from fixed
/// lexicons, separated by filler words.
pub fn labeling_task(n: usize, seed: u64) -> Vec<LabelingRecord> {
    const TYPES: [&str; 2] = ["PER", "LOC"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut tokens = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..rng.random_range(1..4) {
                for w in filler(&mut rng, 1, 3) {
                    tokens.push(w);
                    labels.push("O".to_string());
                }
                let ty = *TYPES.choose(&mut rng).unwrap();
                let len = rng.random_range(1..=2);
                for j in 0..len {
                    tokens.push(format!("{}{}", ty.to_lowercase(), rng.random_range(0..6)));
                    labels.push(format!("{}-{ty}", if j == 0 { "B" } else { "I" }));
                }
            }
            LabelingRecord { tokens, labels }
        })
        .collect()
}

/// Source words are mapped through a fixed word-for-word dictionary and
/// wrapped in an intent bracket, mimicking a semantic-parse target.
pub fn generation_task(n: usize, seed: u64) -> Vec<GenerationRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dict: Vec<usize> = (0..12).collect();
    dict.shuffle(&mut rng);
    (0..n)
        .map(|_| {
            let src: Vec<usize> = (0..rng.random_range(2..6))
                .map(|_| rng.random_range(0..12))
                .collect();
            let intent = src[0] % 3;
            let target: Vec<String> = std::iter::once(format!("[IN:i{intent}"))
                .chain(src.iter().map(|&w| format!("t{}", dict[w])))
                .chain(std::iter::once("]".to_string()))
                .collect();
            GenerationRecord {
                source: src
                    .iter()
                    .map(|w| format!("s{w}"))
                    .collect::<Vec<_>>()
                    .join(" "),
                target: target.join(" "),
            }
        })
        .collect()
}
