//! Encoded fine-tuning datasets built from task records.

use std::collections::BTreeSet;
use std::path::Path;

use crate::data::{parse_records, ClassificationRecord, GenerationRecord, LabelingRecord, Vocab};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Labeling,
    Generation,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Example {
    Classification {
        ids: Vec<u32>,
        label: usize,
    },
    Labeling {
        ids: Vec<u32>,
        /// Index in `ids` of each word's first subword.
        word_starts: Vec<usize>,
        labels: Vec<usize>,
    },
    Generation {
        source: Vec<u32>,
        target: Vec<u32>,
        target_text: String,
    },
}

/// Train and validation splits sharing one label inventory and vocabulary.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub kind: TaskKind,
    /// Sorted label names; empty for generation.
    pub labels: Vec<String>,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub vocab: Vocab,
}

/// Input formatting hook for word-level generation sources. Currently the
/// identity; a sentinel scheme would rewrite the source here.
pub fn word_sentinels(source: &str) -> String {
    source.to_string()
}

fn label_index(labels: &[String], l: &str) -> usize {
    labels
        .binary_search_by(|x| x.as_str().cmp(l))
        .expect("label inventory is complete")
}

impl TaskData {
    pub fn classification(
        train: &[ClassificationRecord],
        valid: &[ClassificationRecord],
        vocab: &Vocab,
    ) -> Self {
        let labels: Vec<String> = train
            .iter()
            .chain(valid)
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let enc = |rs: &[ClassificationRecord]| {
            rs.iter()
                .map(|r| Example::Classification {
                    ids: vocab.encode(&r.text).ids,
                    label: label_index(&labels, &r.label),
                })
                .collect()
        };
        TaskData {
            kind: TaskKind::Classification,
            train: enc(train),
            valid: enc(valid),
            labels,
            vocab: vocab.clone(),
        }
    }

    pub fn labeling(
        train: &[LabelingRecord],
        valid: &[LabelingRecord],
        vocab: &Vocab,
    ) -> Result<Self> {
        for r in train.iter().chain(valid) {
            if r.tokens.len() != r.labels.len() {
                return Err(Error::invalid(format!(
                    "labeling record has {} tokens and {} labels",
                    r.tokens.len(),
                    r.labels.len()
                )));
            }
        }
        let labels: Vec<String> = train
            .iter()
            .chain(valid)
            .flat_map(|r| r.labels.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let enc = |rs: &[LabelingRecord]| {
            rs.iter()
                .map(|r| {
                    let e = vocab.encode_words(r.tokens.iter().map(String::as_str));
                    Example::Labeling {
                        ids: e.ids,
                        word_starts: e.word_starts,
                        labels: r.labels.iter().map(|l| label_index(&labels, l)).collect(),
                    }
                })
                .collect()
        };
        Ok(TaskData {
            kind: TaskKind::Labeling,
            train: enc(train),
            valid: enc(valid),
            labels,
            vocab: vocab.clone(),
        })
    }

    pub fn generation(
        train: &[GenerationRecord],
        valid: &[GenerationRecord],
        vocab: &Vocab,
    ) -> Self {
        let enc = |rs: &[GenerationRecord]| {
            rs.iter()
                .map(|r| Example::Generation {
                    source: vocab.encode(&word_sentinels(&r.source)).ids,
                    target: vocab.encode(&r.target).ids,
                    target_text: r.target.clone(),
                })
                .collect()
        };
        TaskData {
            kind: TaskKind::Generation,
            train: enc(train),
            valid: enc(valid),
            labels: Vec::new(),
            vocab: vocab.clone(),
        }
    }

    /// Reads `train` and `valid` record files of the given kind.
    pub fn read(kind: TaskKind, train: &Path, valid: &Path, vocab: &Vocab) -> Result<Self> {
        let open = |p: &Path| -> Result<std::io::BufReader<std::fs::File>> {
            Ok(std::io::BufReader::new(
                std::fs::File::open(p).map_err(|e| Error::io(p, e))?,
            ))
        };
        Ok(match kind {
            TaskKind::Classification => Self::classification(
                &parse_records(open(train)?, train)?,
                &parse_records(open(valid)?, valid)?,
                vocab,
            ),
            TaskKind::Labeling => Self::labeling(
                &parse_records(open(train)?, train)?,
                &parse_records(open(valid)?, valid)?,
                vocab,
            )?,
            TaskKind::Generation => Self::generation(
                &parse_records(open(train)?, train)?,
                &parse_records(open(valid)?, valid)?,
                vocab,
            ),
        })
    }

    /// A task with a fixed label inventory and no examples, for scoring
    /// held-out files against an already fine-tuned head.
    pub fn empty(kind: TaskKind, labels: Vec<String>, vocab: &Vocab) -> Self {
        TaskData {
            kind,
            labels,
            train: Vec::new(),
            valid: Vec::new(),
            vocab: vocab.clone(),
        }
    }

    /// Encodes a record file with this task's labels. Labels outside the
    /// inventory are an error.
    pub fn encode_file(&self, path: &Path) -> Result<Vec<Example>> {
        let reader =
            std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
        let find = |l: &str| {
            self.labels
                .binary_search_by(|x| x.as_str().cmp(l))
                .map_err(|_| {
                    Error::invalid(format!(
                        "{}: label `{l}` is not in the task inventory",
                        path.display()
                    ))
                })
        };
        match self.kind {
            TaskKind::Classification => parse_records::<ClassificationRecord>(reader, path)?
                .iter()
                .map(|r| {
                    Ok(Example::Classification {
                        ids: self.vocab.encode(&r.text).ids,
                        label: find(&r.label)?,
                    })
                })
                .collect(),
            TaskKind::Labeling => parse_records::<LabelingRecord>(reader, path)?
                .iter()
                .map(|r| {
                    if r.tokens.len() != r.labels.len() {
                        return Err(Error::invalid(format!(
                            "{}: labeling record has {} tokens and {} labels",
                            path.display(),
                            r.tokens.len(),
                            r.labels.len()
                        )));
                    }
                    let e = self.vocab.encode_words(r.tokens.iter().map(String::as_str));
                    Ok(Example::Labeling {
                        ids: e.ids,
                        word_starts: e.word_starts,
                        labels: r.labels.iter().map(|l| find(l)).collect::<Result<_>>()?,
                    })
                })
                .collect(),
            TaskKind::Generation => {
                Ok(Self::generation(&parse_records(reader, path)?, &[], &self.vocab).train)
            }
        }
    }

    /// Every text string in the data, for building a vocabulary.
    pub fn texts_of_records<'a>(
        cls: &'a [ClassificationRecord],
        tag: &'a [LabelingRecord],
        gen: &'a [GenerationRecord],
    ) -> Vec<String> {
        cls.iter()
            .map(|r| r.text.clone())
            .chain(tag.iter().map(|r| r.tokens.join(" ")))
            .chain(
                gen.iter()
                    .flat_map(|r| [r.source.clone(), r.target.clone()]),
            )
            .collect()
    }
}
