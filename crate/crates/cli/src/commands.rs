use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use twostage_core::cost::{compare_recipes, records, render, render_table, tu_cost};
use twostage_core::data::synthetic::markov_corpus;
use twostage_core::data::{
    derive_seed, pack_documents, padding_fraction, read_corpus, CorpusRecord, Document,
    PackedSequence, SamplingPolicy, Vocab,
};
use twostage_core::evalft::{
    aggregate, evaluate, finetune, Example, FinetuneConfig, MetricRecord, TaskData, TaskKind,
};
use twostage_core::train::checkpoint::{self, config_hash};
use twostage_core::train::{
    denoise_eval, initial_trainer, mlm_eval, preset, run_stage, Checkpoint, Objective, Provenance,
    Scale, StagePosition, TrainPlan, TABLE1,
};

use crate::config::{
    CorpusSource, EvaluateJob, ExperimentConfig, FinetuneJob, PackJob, PretrainJob,
};

const STREAM_CORPUS: u64 = 40;
const STREAM_EVAL: u64 = 41;
const EVAL_BATCH: usize = 16;
const TASK_FILE: &str = "task.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing vocabulary {}", path.display()))
}

fn load_corpus(source: &CorpusSource, seed: u64) -> Result<Vec<CorpusRecord>> {
    match (&source.corpus, &source.synthetic) {
        (Some(path), _) => Ok(read_corpus(path)?),
        (None, Some(s)) => Ok(markov_corpus(
            &s.spec,
            s.docs_per_language,
            s.language_seed,
            derive_seed(seed, STREAM_CORPUS, 0),
        )),
        (None, None) => unreachable!("validated corpus source"),
    }
}

fn tokenize(records: &[CorpusRecord], vocab: &Vocab) -> Vec<Document> {
    records
        .iter()
        .map(|r| Document {
            ids: vocab.encode(&r.text).ids,
            lang: r.lang.clone(),
        })
        .collect()
}

#[derive(Serialize)]
struct LanguageStats {
    documents: usize,
    tokens: u64,
    sequences: usize,
    share: f64,
    sampling_probability: f64,
}

#[derive(Serialize)]
struct SequenceEntry<'a> {
    lang: &'a str,
    offset: usize,
    len: usize,
    continued: bool,
}

#[derive(Serialize)]
struct PackManifest<'a> {
    format: u32,
    seq_len: usize,
    vocab_size: usize,
    vocab_hash: String,
    documents: usize,
    /// Document tokens, excluding separators.
    tokens: u64,
    sequences: usize,
    padding_fraction: f64,
    alpha: f64,
    languages: BTreeMap<String, LanguageStats>,
    index: Vec<SequenceEntry<'a>>,
}

pub fn pack(cfg: &ExperimentConfig, job: &PackJob, out: &Path) -> Result<()> {
    let seed = cfg.seed()?;
    let records = load_corpus(&job.source, seed)?;
    let vocab = Vocab::build(
        records.iter().map(|r| r.text.as_str()),
        job.vocab_size,
        job.byte_fallback,
    )?;
    let docs = tokenize(&records, &vocab);
    let seqs = pack_documents(&docs, job.seq_len)?;

    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut doc_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for d in &docs {
        *counts.entry(d.lang.clone()).or_default() += d.ids.len() as u64;
        *doc_counts.entry(&d.lang).or_default() += 1;
    }
    let total: u64 = counts.values().sum();
    let probs = if total > 0 {
        SamplingPolicy {
            counts: counts.clone(),
            alpha: job.alpha,
        }
        .probabilities()?
    } else {
        BTreeMap::new()
    };
    let languages = counts
        .iter()
        .map(|(lang, &tokens)| {
            let stats = LanguageStats {
                documents: doc_counts[lang.as_str()],
                tokens,
                sequences: seqs.iter().filter(|s| &s.lang == lang).count(),
                share: if total > 0 {
                    tokens as f64 / total as f64
                } else {
                    0.0
                },
                sampling_probability: probs.get(lang).copied().unwrap_or(0.0),
            };
            (lang.clone(), stats)
        })
        .collect();

    let mut bin = Vec::new();
    let mut index = Vec::with_capacity(seqs.len());
    let mut offset = 0;
    for s in &seqs {
        for id in &s.ids {
            bin.extend_from_slice(&id.to_le_bytes());
        }
        index.push(SequenceEntry {
            lang: &s.lang,
            offset,
            len: s.ids.len(),
            continued: s.continued,
        });
        offset += s.ids.len();
    }
    let manifest = PackManifest {
        format: 1,
        seq_len: job.seq_len,
        vocab_size: vocab.len(),
        vocab_hash: vocab.hash(),
        documents: docs.iter().filter(|d| !d.ids.is_empty()).count(),
        tokens: total,
        sequences: seqs.len(),
        padding_fraction: padding_fraction(&seqs, job.seq_len),
        alpha: job.alpha,
        languages,
        index,
    };
    create_dir(out)?;
    write_json(&out.join("vocab.json"), &vocab)?;
    fs::write(out.join("packed.bin"), bin).context("writing packed.bin")?;
    write_json(&out.join("manifest.json"), &manifest)?;
    println!(
        "packed {} tokens from {} documents into {} sequences (padding {:.4})",
        manifest.tokens, manifest.documents, manifest.sequences, manifest.padding_fraction
    );
    Ok(())
}

/// Every `k`-th sequence goes to the held-out set so it spans all languages.
/// Training and held-out sequences.
type Split = (Vec<Vec<u32>>, Vec<Vec<u32>>);

fn split_heldout(seqs: Vec<PackedSequence>, n: usize) -> Result<Split> {
    if n == 0 {
        return Ok((seqs.into_iter().map(|s| s.ids).collect(), Vec::new()));
    }
    if n >= seqs.len() {
        bail!(
            "pretrain.eval_sequences: {n} held-out sequences leave no training data ({} packed)",
            seqs.len()
        );
    }
    let stride = seqs.len() / n;
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for (i, s) in seqs.into_iter().enumerate() {
        if i % stride == 0 && heldout.len() < n {
            heldout.push(s.ids);
        } else {
            train.push(s.ids);
        }
    }
    Ok((train, heldout))
}

#[derive(Serialize)]
struct StageSummary {
    stage: String,
    steps: u64,
    final_step: u64,
    final_loss: f64,
    checkpoint: String,
    trace: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_loss: Option<f64>,
}

#[derive(Serialize)]
struct RunSummary {
    plan: String,
    config_hash: String,
    seed: u64,
    train_sequences: usize,
    heldout_sequences: usize,
    stages: Vec<StageSummary>,
}

pub fn pretrain(
    cfg: &ExperimentConfig,
    job: &PretrainJob,
    plan: &TrainPlan,
    out: &Path,
) -> Result<()> {
    let seed = cfg.seed()?;
    let hash = config_hash(cfg)?;
    let records = load_corpus(&job.source, seed)?;
    let vocab = Vocab::build(
        records.iter().map(|r| r.text.as_str()),
        plan.model.vocab_size,
        job.byte_fallback,
    )?;
    let seqs = pack_documents(&tokenize(&records, &vocab), plan.model.max_positions - 2)?;
    let (train, heldout) = split_heldout(seqs, job.eval_sequences)?;
    if train.is_empty() {
        bail!("the corpus produced no training sequences");
    }
    create_dir(&out.join("traces"))?;
    create_dir(&out.join("checkpoints"))?;
    write_json(&out.join("vocab.json"), &vocab)?;

    let mut trainer = initial_trainer(plan, &train, seed)?;
    let mut offset = 0;
    let mut stages = Vec::new();
    for (i, stage) in plan.stages.iter().enumerate() {
        eprintln!("stage {} ({} steps)", stage.name, stage.steps);
        let pos = StagePosition {
            offset,
            plan_schedule: plan.schedule.as_ref(),
        };
        let noise = plan.noise_for(stage.objective);
        let trace = run_stage(&mut trainer, stage, pos, &train, &noise, seed)?;
        offset += stage.steps;
        let tag = format!("{:02}-{}", i + 1, stage.name);
        let trace_file = format!("traces/{tag}.jsonl");
        write_jsonl(&out.join(&trace_file), &trace)?;
        let ck_dir = format!("checkpoints/{tag}");
        checkpoint::save(
            &out.join(&ck_dir),
            &Checkpoint {
                model: trainer.model.clone(),
                optimizer: Some((trainer.optimizer, trainer.state.clone())),
                provenance: Provenance {
                    plan: plan.name.clone(),
                    stage: stage.name.clone(),
                    step: offset,
                },
                config_hash: hash.clone(),
            },
        )?;
        let eval_loss = if heldout.is_empty() {
            None
        } else {
            let eval_seed = derive_seed(seed, STREAM_EVAL, 0);
            let stats = match stage.objective {
                Objective::Mlm => {
                    mlm_eval(&trainer.model, &heldout, &noise, eval_seed, EVAL_BATCH)?
                }
                Objective::Denoise(_) => {
                    denoise_eval(&trainer.model, &heldout, &noise, eval_seed, EVAL_BATCH)?
                }
            };
            Some(stats.loss)
        };
        let last = trace.last().expect("stages have at least one step");
        stages.push(StageSummary {
            stage: stage.name.clone(),
            steps: stage.steps,
            final_step: last.step,
            final_loss: last.loss,
            checkpoint: ck_dir,
            trace: trace_file,
            eval_loss,
        });
    }
    let summary = RunSummary {
        plan: plan.name.clone(),
        config_hash: hash,
        seed,
        train_sequences: train.len(),
        heldout_sequences: heldout.len(),
        stages,
    };
    write_json(&out.join("run.json"), &summary)?;
    for s in &summary.stages {
        println!(
            "{}: step {} loss {:.6}",
            s.stage, s.final_step, s.final_loss
        );
    }
    Ok(())
}

#[derive(Serialize, serde::Deserialize)]
struct TaskInfo {
    task: String,
    kind: TaskKind,
    labels: Vec<String>,
}

fn report(out: &Path, records: &[MetricRecord]) -> Result<()> {
    write_jsonl(&out.join("metrics.jsonl"), records)?;
    let summary = aggregate(records);
    write_json(&out.join("summary.json"), &summary)?;
    for s in &summary {
        println!(
            "{} {} {}: {:.4} ± {:.4} (n={})",
            s.task, s.language, s.metric, s.mean, s.std, s.runs
        );
    }
    Ok(())
}

pub fn finetune_cmd(
    cfg: &ExperimentConfig,
    job: &FinetuneJob,
    ft: &FinetuneConfig,
    out: &Path,
) -> Result<()> {
    let seed = cfg.seed()?;
    let hash = config_hash(cfg)?;
    let pretrained = checkpoint::load(&job.checkpoint)?;
    let vocab = read_vocab(&job.vocab)?;
    let data = TaskData::read(ft.kind, &job.train, &job.valid, &vocab)?;
    let tests: Vec<(String, Vec<Example>)> = job
        .test
        .iter()
        .map(|(lang, p)| Ok((lang.clone(), data.encode_file(p)?)))
        .collect::<Result<_>>()?;
    let seeds = job.seeds.clone().unwrap_or_else(|| vec![seed]);
    let mut all = Vec::new();
    for &s in &seeds {
        eprintln!("fine-tuning {} with seed {s}", job.task);
        let outcome = finetune(&pretrained.model, &data, ft, s)?;
        let dir = out.join(format!("seed-{s}"));
        create_dir(&dir)?;
        write_jsonl(&dir.join("history.jsonl"), &outcome.history)?;
        let best_updates = outcome.history[outcome.best_epoch - 1].updates;
        let ck_dir = dir.join("checkpoint");
        checkpoint::save(
            &ck_dir,
            &Checkpoint {
                model: outcome.model.clone(),
                optimizer: None,
                provenance: Provenance {
                    plan: job.task.clone(),
                    stage: "finetune".into(),
                    step: best_updates,
                },
                config_hash: hash.clone(),
            },
        )?;
        write_json(
            &ck_dir.join(TASK_FILE),
            &TaskInfo {
                task: job.task.clone(),
                kind: ft.kind,
                labels: data.labels.clone(),
            },
        )?;
        let mut splits = vec![("valid".to_string(), &data.valid)];
        splits.extend(tests.iter().map(|(l, e)| (l.clone(), e)));
        for (lang, examples) in splits {
            all.push(MetricRecord {
                task: job.task.clone(),
                language: lang,
                seed: s,
                metrics: evaluate(&outcome.model, &data, examples, &ft.generation)?,
            });
        }
    }
    report(out, &all)
}

pub fn evaluate_cmd(
    cfg: &ExperimentConfig,
    job: &EvaluateJob,
    ft: &FinetuneConfig,
    out: &Path,
) -> Result<()> {
    let seed = cfg.seed()?;
    let ck = checkpoint::load(&job.checkpoint)?;
    let vocab = read_vocab(&job.vocab)?;
    let labels = if ft.kind == TaskKind::Generation {
        Vec::new()
    } else {
        if ck.model.head.is_none() {
            bail!(
                "checkpoint {} has no fine-tuned task head",
                job.checkpoint.display()
            );
        }
        let path = job.checkpoint.join(TASK_FILE);
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let info: TaskInfo =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if info.kind != ft.kind {
            bail!(
                "checkpoint was fine-tuned for a {:?} task, not {:?}",
                info.kind,
                ft.kind
            );
        }
        info.labels
    };
    let data = TaskData::empty(ft.kind, labels, &vocab);
    let mut all = Vec::new();
    for (lang, path) in &job.data {
        let examples = data.encode_file(path)?;
        all.push(MetricRecord {
            task: job.task.clone(),
            language: lang.clone(),
            seed,
            metrics: evaluate(&ck.model, &data, &examples, &ft.generation)?,
        });
    }
    create_dir(out)?;
    report(out, &all)
}

/// Plans that share weights between the encoder and the seq2seq model,
/// compared against training both separately.
const SHARING: [&str; 4] = [
    "bart-12e12d+mlm",
    "2stage-bart-12e12d",
    "2stage-bart-12e12d-attn-f",
    "2stage-bart-12e12d-unfrz",
];

#[derive(Serialize)]
struct SavingsRecord {
    plan: String,
    total_tu: String,
    baseline_tu: String,
    savings_percent: String,
}

pub fn table1_plans() -> Result<Vec<TrainPlan>> {
    TABLE1
        .iter()
        .map(|n| Ok(preset(n, &Scale::reference())?))
        .collect()
}

pub fn cost(plans: &[TrainPlan], table1: bool, out: Option<&Path>) -> Result<()> {
    let mut text = render_table(plans)?;
    let mut savings = Vec::new();
    if table1 {
        let scale = Scale::reference();
        let enc = preset("roberta-12e", &scale)?;
        let s2s = preset("bart-12e12d", &scale)?;
        let candidates: Vec<TrainPlan> = SHARING
            .iter()
            .map(|n| preset(n, &scale))
            .collect::<Result<_, _>>()?;
        let cmp = compare_recipes(&candidates, (&enc, &s2s))?;
        text.push_str(&format!(
            "\nSavings vs. separate {} + {} ({} TU)\n",
            enc.name,
            s2s.name,
            render(cmp.baseline, 1)
        ));
        for c in &cmp.candidates {
            let pct = render(c.savings * 100, 0);
            text.push_str(&format!("{}: {} TU, {pct}%\n", c.plan, render(c.total, 1)));
            savings.push(SavingsRecord {
                plan: c.plan.clone(),
                total_tu: render(c.total, 1),
                baseline_tu: render(cmp.baseline, 1),
                savings_percent: pct,
            });
        }
    }
    std::io::stdout().write_all(text.as_bytes())?;
    if let Some(out) = out {
        create_dir(out)?;
        fs::write(out.join("cost.txt"), &text).context("writing cost.txt")?;
        let mut rows = Vec::new();
        for p in plans {
            rows.extend(records(&tu_cost(p)?));
        }
        write_jsonl(&out.join("cost.jsonl"), &rows)?;
        if table1 {
            write_jsonl(&out.join("savings.jsonl"), &savings)?;
        }
    }
    Ok(())
}
