//! Oracles and fixtures shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

pub mod tying;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twostage_core::data::NUM_SPECIALS;
use twostage_core::model::{
    Binder, CrossAttention, Dropout, HeadSpec, Model, ModelConfig, TokenBatch,
};
use twostage_core::tensor::{AttentionSpec, Graph, Label, Tensor, Var};
use twostage_core::train::batch::{frame, seq2seq_batch, MlmBatch, Seq2SeqBatch};
use twostage_core::train::{mlm_forward, seq2seq_forward};
use twostage_core::Result;

/// Relative error bound for finite-difference checks.
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor: below this magnitude errors are judged absolutely.
pub const FD_FLOOR: f64 = 1e-6;
const FD_STEP: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Fourth-order central difference of `f` at 0.
pub fn derivative(mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = FD_STEP;
    (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
}

pub fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

/// Worst relative error between backward and finite differences for an op
/// whose output is reduced to a scalar by a fixed random projection.
pub fn check_op(
    inputs: &[Tensor],
    seed: u64,
    op: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> f64 {
    let forward =
        |xs: &[Tensor], proj: Option<&Tensor>, grad: bool| -> (f64, Tensor, Option<Vec<Tensor>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), grad)).collect();
            let out = op(&mut g, &vars).unwrap();
            let out_val = g.value(out).clone();
            let Some(p) = proj else {
                return (0.0, out_val, None);
            };
            let pv = g.constant(p.clone());
            let prod = g.mul(out, pv).unwrap();
            let loss = g.sum(prod);
            let l = g.value(loss).data()[0];
            let grads = grad.then(|| {
                let gr = g.backward(loss).unwrap();
                vars.iter()
                    .zip(xs)
                    .map(|(v, x)| {
                        gr.get(*v)
                            .cloned()
                            .unwrap_or_else(|| Tensor::zeros(x.shape()))
                    })
                    .collect()
            });
            (l, out_val, grads)
        };
    let (_, out, _) = forward(inputs, None, false);
    let proj = random_tensor(out.shape(), &mut rng(seed ^ 0x9e37));
    let (_, _, grads) = forward(inputs, Some(&proj), true);
    let grads = grads.unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.numel() {
            let numeric = derivative(|d| {
                let mut xs = inputs.to_vec();
                xs[k].data_mut()[i] += d;
                forward(&xs, Some(&proj), false).0
            });
            worst = worst.max(rel_err(grads[k].data()[i], numeric));
        }
    }
    worst
}

/// Worst relative error over `per_tensor` sampled entries of every
/// trainable parameter of `model` for the scalar `loss`.
pub fn check_model(
    model: &Model,
    per_tensor: usize,
    seed: u64,
    loss: impl Fn(&Model, &mut Graph, &mut Binder) -> Result<Var>,
) -> (f64, usize) {
    let mut g = Graph::new();
    let mut bind = Binder::new(&model.params);
    let l = loss(model, &mut g, &mut bind).unwrap();
    let grads = bind.gradients(&g.backward(l).unwrap());
    let value = |m: &Model| {
        let mut g = Graph::new();
        let mut bind = Binder::new(&m.params);
        let l = loss(m, &mut g, &mut bind).unwrap();
        g.value(l).data()[0]
    };
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (owner, grad) in &grads {
        let n = grad.numel();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| r.random_range(0..n)).collect()
        };
        for i in picks {
            let numeric = derivative(|d| {
                let mut m = model.clone();
                m.params.get_mut(owner).unwrap().data_mut()[i] += d;
                value(&m)
            });
            worst = worst.max(rel_err(grad.data()[i], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Small model widths used by the gradient and tying suites.
pub fn small_config(enc: usize, dec: usize, cross: CrossAttention) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_ffn: 16,
        attention_heads: 2,
        vocab_size: 24,
        max_positions: 12,
        cross_attention: cross,
        ..ModelConfig::tiny(enc, dec)
    }
}

pub fn random_ids(n: usize, vocab: usize, r: &mut ChaCha8Rng) -> Vec<u32> {
    (0..n)
        .map(|_| r.random_range(NUM_SPECIALS as u32..vocab as u32))
        .collect()
}

/// Two source/target pairs of different lengths so padding is exercised.
pub fn toy_pairs(vocab: usize, r: &mut ChaCha8Rng) -> Vec<(Vec<u32>, Vec<u32>)> {
    vec![
        (random_ids(5, vocab, r), random_ids(4, vocab, r)),
        (random_ids(3, vocab, r), random_ids(6, vocab, r)),
    ]
}

pub fn toy_seq2seq_batch(vocab: usize, r: &mut ChaCha8Rng) -> Seq2SeqBatch {
    seq2seq_batch(&toy_pairs(vocab, r))
}

pub fn toy_mlm_batch(vocab: usize, r: &mut ChaCha8Rng) -> MlmBatch {
    let rows = [random_ids(6, vocab, r), random_ids(4, vocab, r)];
    let framed: Vec<Vec<u32>> = rows.iter().map(|x| frame(x)).collect();
    let input = TokenBatch::from_seqs(&framed, 0);
    let labels = (0..input.batch * input.len)
        .map(|i| {
            let tok = input.ids[i];
            if input.pad[i] || tok < NUM_SPECIALS as u32 || i % 3 == 0 {
                Label::Ignore
            } else {
                Label::Class(r.random_range(0..vocab))
            }
        })
        .collect();
    MlmBatch { input, labels }
}

/// Loss closures with an optional fixed dropout mask (re-seeded per call).
pub fn seq2seq_loss(
    batch: Seq2SeqBatch,
    dropout: Option<(f64, u64)>,
) -> impl Fn(&Model, &mut Graph, &mut Binder) -> Result<Var> {
    move |m, g, b| {
        let mut d = dropout.map(|(p, s)| Dropout::new(p, s));
        seq2seq_forward(m, g, b, &batch, d.as_mut())
    }
}

pub fn mlm_loss(
    batch: MlmBatch,
    dropout: Option<(f64, u64)>,
) -> impl Fn(&Model, &mut Graph, &mut Binder) -> Result<Var> {
    move |m, g, b| {
        let mut d = dropout.map(|(p, s)| Dropout::new(p, s));
        mlm_forward(m, g, b, &batch, d.as_mut())
    }
}

pub fn labeling_loss(
    batch: TokenBatch,
    starts: Vec<Vec<usize>>,
    labels: Vec<Label>,
) -> impl Fn(&Model, &mut Graph, &mut Binder) -> Result<Var> {
    move |m, g, b| {
        let logits = m.task_logits(g, b, &batch, Some(&starts), None)?;
        g.cross_entropy(logits, &labels)
    }
}

/// Every primitive checked by the gradient suite, as (name, worst error).
pub fn primitive_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut t = |shape: &[usize]| random_tensor(shape, &mut r);
    let a = t(&[3, 4]);
    let b = t(&[4, 5]);
    let bt = t(&[5, 4]);
    let c = t(&[3, 4]);
    let row = t(&[4]);
    let gain = t(&[4]);
    let bias = t(&[4]);
    let table = t(&[6, 4]);
    let (q, k, v) = (t(&[2 * 3, 4]), t(&[2 * 4, 4]), t(&[2 * 4, 4]));
    let (qs, ks, vs) = (t(&[2 * 3, 4]), t(&[2 * 3, 4]), t(&[2 * 3, 4]));
    let states = [t(&[3, 4]), t(&[3, 4]), t(&[3, 4])];
    let mix_logits = t(&[3]);
    let logits = t(&[5, 6]);
    let mut out = vec![
        (
            "matmul",
            check_op(&[a.clone(), b.clone()], seed, |g, v| g.matmul(v[0], v[1])),
        ),
        (
            "matmul_t",
            check_op(&[a.clone(), bt.clone()], seed, |g, v| {
                g.matmul_t(v[0], v[1])
            }),
        ),
        (
            "add",
            check_op(&[a.clone(), c.clone()], seed, |g, v| g.add(v[0], v[1])),
        ),
        (
            "add_row",
            check_op(&[a.clone(), row.clone()], seed, |g, v| {
                g.add_row(v[0], v[1])
            }),
        ),
        (
            "mul",
            check_op(&[a.clone(), c.clone()], seed, |g, v| g.mul(v[0], v[1])),
        ),
        (
            "scale",
            check_op(std::slice::from_ref(&a), seed, |g, v| {
                Ok(g.scale(v[0], -1.7))
            }),
        ),
        (
            "gelu",
            check_op(std::slice::from_ref(&a), seed, |g, v| Ok(g.gelu(v[0]))),
        ),
        (
            "sum",
            check_op(std::slice::from_ref(&a), seed, |g, v| Ok(g.sum(v[0]))),
        ),
        (
            "layer_norm",
            check_op(&[a.clone(), gain, bias], seed, |g, v| {
                g.layer_norm(v[0], v[1], v[2], 1e-5)
            }),
        ),
        (
            "embedding",
            check_op(&[table], seed, |g, v| g.embedding(v[0], &[0, 3, 3, 5, 1])),
        ),
        (
            "gather_rows",
            check_op(std::slice::from_ref(&a), seed, |g, v| {
                g.gather_rows(v[0], &[2, 0, 2])
            }),
        ),
        (
            "attention_cross_padded",
            check_op(&[q, k, v], seed, |g, x| {
                let spec = AttentionSpec {
                    batch: 2,
                    q_len: 3,
                    k_len: 4,
                    heads: 2,
                    causal: false,
                    key_padding: Some(vec![false, false, false, false, false, false, true, true]),
                };
                g.attention(x[0], x[1], x[2], spec)
            }),
        ),
        (
            "attention_causal",
            check_op(&[qs, ks, vs], seed, |g, x| {
                let spec = AttentionSpec {
                    batch: 2,
                    q_len: 3,
                    k_len: 3,
                    heads: 2,
                    causal: true,
                    key_padding: None,
                };
                g.attention(x[0], x[1], x[2], spec)
            }),
        ),
        (
            "dropout",
            check_op(std::slice::from_ref(&a), seed, move |g, v| {
                Ok(g.dropout(v[0], 0.3, &mut rng(seed)))
            }),
        ),
        ("mix", {
            let mut inputs = states.to_vec();
            inputs.push(mix_logits);
            check_op(&inputs, seed, |g, v| g.mix(&v[..3], v[3]))
        }),
    ];
    let labels = [
        Label::Class(1),
        Label::Ignore,
        Label::Class(5),
        Label::Class(0),
        Label::Class(2),
    ];
    out.push((
        "cross_entropy",
        check_op(&[logits], seed, move |g, v| g.cross_entropy(v[0], &labels)),
    ));
    out
}

/// The full-model gradient cases, as (name, worst error, entries checked).
pub fn model_errors(seed: u64, per_tensor: usize) -> Vec<(&'static str, f64, usize)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let s2s = Model::init(small_config(2, 2, CrossAttention::Standard), seed).unwrap();
    let batch = toy_seq2seq_batch(s2s.cfg.vocab_size, &mut r);
    let (e, n) = check_model(&s2s, per_tensor, seed, seq2seq_loss(batch.clone(), None));
    out.push(("seq2seq_2e2d", e, n));
    let (e, n) = check_model(
        &s2s,
        per_tensor,
        seed,
        seq2seq_loss(batch.clone(), Some((0.2, seed))),
    );
    out.push(("seq2seq_2e2d_dropout", e, n));

    let mut cfg = small_config(2, 2, CrossAttention::Fusion);
    cfg.fusion_init_margin = 0.5;
    let fusion = Model::init(cfg, seed).unwrap();
    let (e, n) = check_model(&fusion, per_tensor, seed, seq2seq_loss(batch, None));
    out.push(("seq2seq_2e2d_fusion", e, n));

    let enc = Model::init(small_config(2, 0, CrossAttention::Standard), seed).unwrap();
    let mb = toy_mlm_batch(enc.cfg.vocab_size, &mut r);
    let (e, n) = check_model(&enc, per_tensor, seed, mlm_loss(mb, None));
    out.push(("mlm_2e", e, n));

    let mut tagger = Model::from_parts(
        enc.cfg.clone(),
        enc.params.filtered(|n| n.starts_with("encoder.")),
    )
    .unwrap();
    tagger
        .attach_head(HeadSpec::labeling(&[6]), 3, seed)
        .unwrap();
    let rows: Vec<Vec<u32>> = [random_ids(5, 24, &mut r), random_ids(3, 24, &mut r)]
        .iter()
        .map(|x| frame(x))
        .collect();
    let batch = TokenBatch::from_seqs(&rows, 0);
    let starts = vec![vec![0, 2, 3], vec![0, 1]];
    let labels: Vec<Label> = (0..5).map(|i| Label::Class(i % 3)).collect();
    let (e, n) = check_model(
        &tagger,
        per_tensor,
        seed,
        labeling_loss(batch, starts, labels),
    );
    out.push(("labeling_head", e, n));
    out
}

/// Hand-enumerated BIO cases: (pred, gold, correct, predicted, gold chunks).
pub const ENTITY_GOLDEN: [(&str, &str, usize, usize, usize); 20] = [
    ("B-PER I-PER O", "B-PER I-PER O", 1, 1, 1),
    ("O O O", "O O O", 0, 0, 0),
    ("B-PER O O", "O O O", 0, 1, 0),
    ("O O O", "B-LOC O O", 0, 0, 1),
    ("B-PER I-PER O", "B-PER O O", 0, 1, 1),
    ("B-PER O", "B-LOC O", 0, 1, 1),
    ("I-PER I-PER O", "B-PER I-PER O", 1, 1, 1),
    ("B-PER B-PER", "B-PER I-PER", 0, 2, 1),
    ("B-PER I-LOC", "B-PER B-LOC", 2, 2, 2),
    ("O I-LOC I-LOC", "O B-LOC I-LOC", 1, 1, 1),
    ("B-ORG I-ORG I-ORG", "B-ORG I-ORG I-ORG", 1, 1, 1),
    ("B-ORG I-ORG B-ORG", "B-ORG I-ORG I-ORG", 0, 2, 1),
    ("B-PER O B-LOC O B-ORG", "B-PER O B-LOC O B-MISC", 2, 3, 3),
    ("B-PER I-PER I-LOC", "B-PER I-PER I-PER", 0, 2, 1),
    ("O B-LOC", "O B-LOC", 1, 1, 1),
    ("B-LOC I-LOC", "B-LOC I-LOC", 1, 1, 1),
    ("I-MISC", "B-MISC", 1, 1, 1),
    ("B-PER O I-PER", "B-PER O B-PER", 2, 2, 2),
    (
        "O O B-LOC I-LOC O B-PER I-PER I-PER",
        "O O B-LOC I-LOC O B-PER I-PER O",
        1,
        2,
        2,
    ),
    ("B-X I-Y I-X I-X", "B-X B-Y I-Y B-X", 1, 3, 3),
];

/// Precision, recall and F1 from chunk counts.
pub fn prf1(correct: usize, predicted: usize, gold: usize) -> (f64, f64, f64) {
    let p = if predicted == 0 {
        0.0
    } else {
        correct as f64 / predicted as f64
    };
    let r = if gold == 0 {
        0.0
    } else {
        correct as f64 / gold as f64
    };
    let f = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (p, r, f)
}

pub fn split_labels(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// (pred, gold, expected) for space- and case-insensitive exact match.
pub const SCIEM_GOLDEN: [(&str, &str, bool); 8] = [
    ("[IN:A x ]", "[IN:A x ]", true),
    ("[IN:A x ]", "[in:a X]", true),
    ("[IN:A  x ]", "[IN:Ax]", true),
    ("[IN:A x ]", "[IN:A y ]", false),
    ("", "", true),
    ("a", "", false),
    ("a b", "ab", true),
    ("[IN:A [SL:B c ] ]", "[IN:A [SL:B c ]", false),
];

/// (pred, gold, rouge-1, rouge-2, rouge-L) with F-measures as exact fractions.
pub fn rouge_golden() -> Vec<(&'static str, &'static str, f64, f64, f64)> {
    let f = |p: f64, r: f64| {
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    };
    vec![
        ("the cat sat", "the cat sat", 1.0, 1.0, 1.0),
        ("a b c", "d e f", 0.0, 0.0, 0.0),
        // unigrams 3 of 4 / 3 of 3; bigrams "the cat" 1 of 3 / 1 of 2; lcs "the cat sat".
        (
            "the cat really sat",
            "the cat sat",
            f(3.0 / 4.0, 1.0),
            f(1.0 / 3.0, 1.0 / 2.0),
            f(3.0 / 4.0, 1.0),
        ),
        // clipped counts: pred "a a a" against gold "a b": one unigram match.
        (
            "a a a",
            "a b",
            f(1.0 / 3.0, 1.0 / 2.0),
            0.0,
            f(1.0 / 3.0, 1.0 / 2.0),
        ),
        // reordering: every unigram matches, no bigram, lcs 1.
        ("c b a", "a b c", 1.0, 0.0, f(1.0 / 3.0, 1.0 / 3.0)),
        ("The Cat", "the cat", 1.0, 1.0, 1.0),
        ("x", "x y", f(1.0, 1.0 / 2.0), 0.0, f(1.0, 1.0 / 2.0)),
    ]
}

// ---- corruption statistics ----

pub const CORRUPTION_VOCAB: usize = 1000;
pub const CORRUPTION_SEQ_LEN: usize = 512;

/// Sequences of `tokens` total positions: random ordinary tokens cut into
/// documents of 40..300 tokens by DOC separators.
pub fn corruption_corpus(seed: u64, tokens: usize) -> Vec<Vec<u32>> {
    use twostage_core::data::DOC;
    let mut r = rng(seed);
    let mut flat = Vec::with_capacity(tokens);
    while flat.len() < tokens {
        let doc = r.random_range(40..300);
        flat.extend((0..doc).map(|_| r.random_range(NUM_SPECIALS as u32..CORRUPTION_VOCAB as u32)));
        flat.push(DOC);
    }
    flat.truncate(tokens);
    flat.chunks(CORRUPTION_SEQ_LEN)
        .map(|c| c.to_vec())
        .collect()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MlmStats {
    pub selected_fraction: f64,
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
    pub targets_are_original: bool,
}

pub fn mlm_stats(seed: u64, tokens: usize) -> MlmStats {
    use twostage_core::data::vocab::is_special;
    use twostage_core::data::{derive_seed, mlm_corrupt, NoiseConfig, MASK};
    let nc = NoiseConfig::mlm();
    let (mut eligible, mut selected, mut mask, mut random, mut keep) =
        (0usize, 0usize, 0usize, 0usize, 0usize);
    let mut ok = true;
    for (i, seq) in corruption_corpus(seed, tokens).iter().enumerate() {
        let ex = mlm_corrupt(seq, &nc, CORRUPTION_VOCAB, derive_seed(seed, 1, i as u64)).unwrap();
        for ((&orig, &inp), lab) in seq.iter().zip(&ex.input).zip(&ex.labels) {
            if is_special(orig) {
                ok &= lab.class().is_none() && inp == orig;
                continue;
            }
            eligible += 1;
            match lab.class() {
                None => ok &= inp == orig,
                Some(c) => {
                    ok &= c == orig as usize;
                    selected += 1;
                    if inp == MASK {
                        mask += 1;
                    } else if inp == orig {
                        keep += 1;
                    } else {
                        random += 1;
                    }
                }
            }
        }
    }
    let s = selected as f64;
    MlmStats {
        selected_fraction: s / eligible as f64,
        mask: mask as f64 / s,
        random: random as f64 / s,
        keep: keep as f64 / s,
        targets_are_original: ok,
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct DenoiseStats {
    pub selected_fraction: f64,
    pub mean_span: f64,
    pub targets_are_original: bool,
}

pub fn denoise_stats(
    seed: u64,
    tokens: usize,
    mode: twostage_core::data::NoiseMode,
) -> DenoiseStats {
    use twostage_core::data::vocab::is_special;
    use twostage_core::data::{apply_selection, denoise_corrupt, derive_seed, NoiseConfig};
    let nc = NoiseConfig::span(mode);
    let (mut eligible, mut selected, mut spans) = (0usize, 0usize, 0usize);
    let mut ok = true;
    for (i, seq) in corruption_corpus(seed, tokens).iter().enumerate() {
        let ex = denoise_corrupt(seq, &nc, derive_seed(seed, 1, i as u64)).unwrap();
        ok &= ex.target == *seq;
        let mut mark = vec![false; seq.len()];
        for &(s, l) in &ex.spans {
            mark[s..s + l].iter_mut().for_each(|m| *m = true);
        }
        ok &= apply_selection(seq, &mark, mode) == ex.source;
        eligible += seq.iter().filter(|&&t| !is_special(t)).count();
        selected += ex.spans.iter().map(|s| s.1).sum::<usize>();
        spans += ex.spans.len();
    }
    DenoiseStats {
        selected_fraction: selected as f64 / eligible as f64,
        mean_span: selected as f64 / spans as f64,
        targets_are_original: ok,
    }
}

// ---- fusion degeneracy ----

/// A standard-cross-attention model and a fusion copy of it whose fusion
/// weights are exactly one-hot on the final encoder state.
pub fn degenerate_fusion_pair(seed: u64) -> (Model, Model) {
    let mut r = rng(seed);
    let enc = r.random_range(1..4);
    let dec = r.random_range(1..4);
    let heads = r.random_range(1..3);
    let cfg = ModelConfig {
        d_model: 4 * heads * r.random_range(1..3),
        d_ffn: 16,
        attention_heads: heads,
        vocab_size: 24,
        max_positions: 12,
        ..ModelConfig::tiny(enc, dec)
    };
    let standard = Model::init(
        ModelConfig {
            cross_attention: CrossAttention::Standard,
            ..cfg.clone()
        },
        seed,
    )
    .unwrap();
    let fusion_cfg = ModelConfig {
        cross_attention: CrossAttention::Fusion,
        fusion_includes_embeddings: r.random_bool(0.5),
        ..cfg
    };
    let mut p = standard.params.clone();
    let n = fusion_cfg.fusion_states();
    for i in 0..dec {
        // exp(-1e4) underflows to exactly 0, so softmax is exactly one-hot.
        let mut logits = vec![-1e4; n];
        logits[n - 1] = 0.0;
        p.insert(
            format!("decoder.fusion.{i}"),
            Tensor::new(vec![n], logits).unwrap(),
        )
        .unwrap();
    }
    (standard, Model::from_parts(fusion_cfg, p).unwrap())
}

/// Whether the degenerate fusion model's logits equal the standard model's bit for bit.
pub fn fusion_is_degenerate(seed: u64) -> bool {
    let (standard, fusion) = degenerate_fusion_pair(seed);
    let batch = toy_seq2seq_batch(standard.cfg.vocab_size, &mut rng(seed ^ 0xF0));
    let a = standard
        .seq2seq_logits(&batch.source, &batch.target_in)
        .unwrap();
    let b = fusion
        .seq2seq_logits(&batch.source, &batch.target_in)
        .unwrap();
    a.bit_eq(&b)
}

// ---- beam search reference ----

pub const BEAM_VOCAB: usize = 8;
pub const BEAM_MAX_LEN: usize = 3;

/// A tiny seq2seq model with a sharpened output layer so the search space
/// has a clear, non-greedy structure.
pub fn beam_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        vocab_size: BEAM_VOCAB,
        ..small_config(1, 1, CrossAttention::Standard)
    };
    let mut m = Model::init(cfg, seed).unwrap();
    let sharpen = 20.0 + seed as f64;
    m.params
        .get_mut("lm_head.weight")
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|w| *w *= sharpen);
    m
}

/// Beam search with a beam wide enough to hold every prefix agrees exactly
/// with exhaustive enumeration, for a few sources.
pub fn beam_matches_exhaustive(seed: u64) -> bool {
    use twostage_core::evalft::{beam_search, exhaustive_best, GenConfig};
    let m = beam_model(seed);
    let gc = GenConfig {
        beam_size: BEAM_VOCAB.pow(BEAM_MAX_LEN as u32 - 1),
        max_len: BEAM_MAX_LEN,
    };
    let mut r = rng(seed);
    (0..3).all(|k| {
        let src = random_ids(2 + k, BEAM_VOCAB, &mut r);
        let b = beam_search(&m, &src, &gc).unwrap();
        let e = exhaustive_best(&m, &src, BEAM_MAX_LEN).unwrap();
        b == e
    })
}

// ---- overfit ----

pub const OVERFIT_STEPS: u64 = 2000;

/// 64 random sequences of 30 ordinary tokens over a 256-entry vocabulary.
pub fn overfit_data() -> Vec<Vec<u32>> {
    let mut r = rng(7);
    (0..64).map(|_| random_ids(30, 256, &mut r)).collect()
}

/// Desk width (d64, vocab 256) with two layers per stack and no dropout; the
/// peak rate is raised over the desk preset so 2k updates suffice.
pub fn overfit_plan(
    objective: twostage_core::train::Objective,
    steps: u64,
) -> twostage_core::train::TrainPlan {
    use twostage_core::data::NoiseConfig;
    use twostage_core::train::{Init, LrSchedule, Objective, StageLr, TrainPlan, TrainStage};
    let dec = if objective == Objective::Mlm { 0 } else { 2 };
    let model = ModelConfig {
        d_model: 64,
        d_ffn: 256,
        attention_heads: 4,
        vocab_size: 256,
        max_positions: 64,
        dropout: 0.0,
        ..ModelConfig::tiny(2, dec)
    };
    let peak = 3e-3;
    TrainPlan {
        name: "overfit".into(),
        model,
        init: Init::Random,
        stages: vec![TrainStage {
            name: "overfit".into(),
            objective,
            steps,
            freeze: vec![],
            lr: StageLr::Plan,
            batch_tokens: 1024,
            batch_size: 16,
        }],
        schedule: Some(LrSchedule::linear(peak, 50, peak * 0.1, steps)),
        noise: NoiseConfig::mlm(),
        optimizer: Default::default(),
    }
}

/// Held-in MLM loss after overfitting, on fresh masks.
pub fn overfit_mlm_loss(steps: u64) -> f64 {
    use twostage_core::data::NoiseConfig;
    use twostage_core::train::{mlm_eval, run_plan, Objective};
    let data = overfit_data();
    let run = run_plan(&overfit_plan(Objective::Mlm, steps), &data, 1).unwrap();
    mlm_eval(&run.trainer.model, &data, &NoiseConfig::mlm(), 99, 16)
        .unwrap()
        .loss
}

/// Fraction of sequences whose teacher-forced reconstruction is exact.
pub fn overfit_denoise_exact(steps: u64) -> f64 {
    use twostage_core::data::{NoiseConfig, NoiseMode};
    use twostage_core::train::{denoise_eval, run_plan, Objective};
    let data = overfit_data();
    let mode = NoiseMode::SpanMask;
    let run = run_plan(&overfit_plan(Objective::Denoise(mode), steps), &data, 1).unwrap();
    denoise_eval(&run.trainer.model, &data, &NoiseConfig::span(mode), 99, 16)
        .unwrap()
        .exact
        .unwrap()
}

// --- Recipe 2 paired runs ---

pub const RECIPE2_SEEDS: u64 = 5;

/// Shallow desk widths; the donor gets 500 steps and the two-stage plan 200 + 150.
pub fn recipe2_scale(step_divisor: u64) -> twostage_core::train::Scale {
    twostage_core::train::Scale {
        step_divisor,
        ..twostage_core::train::Scale::desk_shallow()
    }
}

/// Packed training and held-out sequences from one family of Markov languages.
pub fn recipe2_data(
    seed: u64,
    seq_len: usize,
    vocab_size: usize,
) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    use twostage_core::data::synthetic::{markov_corpus, MarkovSpec};
    use twostage_core::data::{pack_documents, Document, Vocab};
    let spec = MarkovSpec::default();
    let train = markov_corpus(&spec, 300, seed, 2 * seed);
    let heldout = markov_corpus(&spec, 24, seed, 2 * seed + 1);
    let vocab = Vocab::build(
        train.iter().chain(&heldout).map(|r| r.text.as_str()),
        vocab_size,
        false,
    )
    .unwrap();
    let pack = |records: &[twostage_core::data::CorpusRecord]| {
        let docs: Vec<Document> = records
            .iter()
            .map(|r| Document {
                ids: vocab.encode(&r.text).ids,
                lang: r.lang.clone(),
            })
            .collect();
        pack_documents(&docs, seq_len)
            .unwrap()
            .into_iter()
            .map(|s| s.ids)
            .collect()
    };
    (pack(&train), pack(&heldout))
}

/// Held-out de-noising loss of the partial-unfreeze plan and of the same plan
/// with its second stage frozen too, both warm-started from one donor.
pub fn recipe2_pair(seed: u64, step_divisor: u64) -> (f64, f64) {
    use twostage_core::model::warm_start_seq2seq;
    use twostage_core::train::{
        denoise_eval, preset, run_plan, run_stages, Donor, FreezeTag, Init, Trainer,
    };

    let scale = recipe2_scale(step_divisor);
    let unfrz = preset("2stage-bart-12e12d-unfrz", &scale).unwrap();
    let mut frozen = unfrz.clone();
    frozen.stages[1].freeze = vec![FreezeTag::Encoder];
    let Init::WarmStartEncoder(Donor::Plan(donor_plan)) = &unfrz.init else {
        panic!("two-stage preset without a donor plan");
    };
    let (train, heldout) =
        recipe2_data(seed, unfrz.model.max_positions - 2, unfrz.model.vocab_size);
    let donor = run_plan(donor_plan, &train, seed).unwrap().trainer.model;
    let params = warm_start_seq2seq(&donor.params, &unfrz.model, seed).unwrap();
    let start = Trainer::new(
        Model::from_parts(unfrz.model.clone(), params).unwrap(),
        unfrz.optimizer,
    );
    let loss = |plan: &twostage_core::train::TrainPlan| {
        let model = run_stages(start.clone(), plan, &train, seed)
            .unwrap()
            .trainer
            .model;
        let noise = plan.noise_for(plan.stages[1].objective);
        denoise_eval(&model, &heldout, &noise, seed + 1000, 16)
            .unwrap()
            .loss
    };
    (loss(&unfrz), loss(&frozen))
}
