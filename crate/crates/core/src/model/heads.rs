use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transformer::{linear_names, Binder, Model, TokenBatch, INIT_STD};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Mlm,
    Lm,
    Classification,
    Labeling,
}

/// Which encoder positions a head reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attachment {
    FirstToken,
    FirstSubword,
    AllPositions,
}

impl HeadKind {
    pub fn attachment(self) -> Attachment {
        match self {
            HeadKind::Classification => Attachment::FirstToken,
            HeadKind::Labeling => Attachment::FirstSubword,
            HeadKind::Mlm | HeadKind::Lm => Attachment::AllPositions,
        }
    }
}

/// Task head shape: hidden layer widths (gelu after each), then the output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    #[serde(default)]
    pub hidden: Vec<usize>,
}

impl HeadSpec {
    pub fn classification(hidden: &[usize]) -> Self {
        HeadSpec {
            kind: HeadKind::Classification,
            hidden: hidden.to_vec(),
        }
    }

    pub fn labeling(hidden: &[usize]) -> Self {
        HeadSpec {
            kind: HeadKind::Labeling,
            hidden: hidden.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub spec: HeadSpec,
    pub labels: usize,
}

impl Model {
    /// Adds a randomly initialized classification or labeling head
    /// (`head.hidden.{j}`, `head.out`) on top of the encoder.
    pub fn attach_head(&mut self, spec: HeadSpec, labels: usize, seed: u64) -> Result<()> {
        if !matches!(spec.kind, HeadKind::Classification | HeadKind::Labeling) {
            return Err(Error::invalid(format!(
                "task heads must be classification or labeling, got {:?}",
                spec.kind
            )));
        }
        if labels == 0 {
            return Err(Error::invalid("task head needs at least one label"));
        }
        if self.head.is_some() {
            return Err(Error::invalid("model already has a task head"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut din = self.cfg.d_model;
        for (j, &width) in spec.hidden.iter().enumerate() {
            let [w, b] = linear_names(&format!("head.hidden.{j}"));
            self.params.insert(
                w,
                Tensor::truncated_normal(&[din, width], INIT_STD, &mut rng),
            )?;
            self.params.insert(b, Tensor::zeros(&[width]))?;
            din = width;
        }
        let [w, b] = linear_names("head.out");
        self.params.insert(
            w,
            Tensor::truncated_normal(&[din, labels], INIT_STD, &mut rng),
        )?;
        self.params.insert(b, Tensor::zeros(&[labels]))?;
        self.head = Some(TaskHead { spec, labels });
        Ok(())
    }

    /// Rows of the flattened `[batch·len, d]` encoder output the head reads.
    ///
    /// Word starts are indices into each example's token list, which is
    /// preceded by one BOS position in the batch.
    pub fn head_rows(
        &self,
        batch: &TokenBatch,
        word_starts: Option<&[Vec<usize>]>,
    ) -> Result<Vec<usize>> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no task head"))?;
        match head.spec.kind.attachment() {
            Attachment::FirstToken => Ok((0..batch.batch).map(|b| b * batch.len).collect()),
            Attachment::FirstSubword => {
                let starts = word_starts
                    .ok_or_else(|| Error::invalid("labeling head needs word boundaries"))?;
                if starts.len() != batch.batch {
                    return Err(Error::invalid(
                        "one word-boundary list per example required",
                    ));
                }
                let mut rows = Vec::new();
                for (b, ws) in starts.iter().enumerate() {
                    for &s in ws {
                        if s + 1 >= batch.len || batch.pad[b * batch.len + s + 1] {
                            return Err(Error::invalid(format!(
                                "word start {s} outside example {b}"
                            )));
                        }
                        rows.push(b * batch.len + s + 1);
                    }
                }
                Ok(rows)
            }
            Attachment::AllPositions => Ok((0..batch.batch * batch.len).collect()),
        }
    }

    /// Applies the head MLP to already-selected encoder rows.
    pub fn head_forward(&self, g: &mut Graph, bind: &mut Binder, selected: Var) -> Result<Var> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no task head"))?;
        let mut h = selected;
        for j in 0..head.spec.hidden.len() {
            let [w, b] = linear_names(&format!("head.hidden.{j}"));
            let (w, b) = (bind.var(g, &w)?, bind.var(g, &b)?);
            let y = g.matmul(h, w)?;
            let y = g.add_row(y, b)?;
            h = g.gelu(y);
        }
        let [w, b] = linear_names("head.out");
        let (w, b) = (bind.var(g, &w)?, bind.var(g, &b)?);
        let y = g.matmul(h, w)?;
        g.add_row(y, b)
    }

    /// Task logits `[rows, labels]` for classification (one row per example)
    /// or labeling (one row per word).
    pub fn task_logits(
        &self,
        g: &mut Graph,
        bind: &mut Binder,
        batch: &TokenBatch,
        word_starts: Option<&[Vec<usize>]>,
        drop: Option<&mut super::transformer::Dropout>,
    ) -> Result<Var> {
        let rows = self.head_rows(batch, word_starts)?;
        let states = self.encode(g, bind, batch, drop)?;
        let out = self.encoder_output(g, bind, &states)?;
        let selected = g.gather_rows(out, &rows)?;
        self.head_forward(g, bind, selected)
    }
}
