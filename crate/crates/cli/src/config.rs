//! Versioned TOML experiment configs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use twostage_core::data::synthetic::MarkovSpec;
use twostage_core::evalft::{FinetuneConfig, GenConfig};
use twostage_core::train::{preset, Scale, TrainPlan};

pub const CONFIG_VERSION: u32 = 1;

/// A config problem: exits with code 2 before anything is written.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn fail<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub pack: Option<PackJob>,
    #[serde(default)]
    pub pretrain: Option<PretrainJob>,
    #[serde(default)]
    pub finetune: Option<FinetuneJob>,
    #[serde(default)]
    pub evaluate: Option<EvaluateJob>,
    #[serde(default)]
    pub cost: Option<CostJob>,
}

/// Pre-training text: a JSONL corpus file or a generated Markov corpus.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSource {
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticCorpus>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpus {
    #[serde(default)]
    pub spec: MarkovSpec,
    pub docs_per_language: usize,
    /// Seeds the language grammars; documents are drawn from the run seed.
    #[serde(default)]
    pub language_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackJob {
    #[serde(flatten)]
    pub source: CorpusSource,
    pub vocab_size: usize,
    #[serde(default)]
    pub byte_fallback: bool,
    pub seq_len: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    0.3
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScaleSpec {
    Named(String),
    Custom(Scale),
}

impl Default for ScaleSpec {
    fn default() -> Self {
        ScaleSpec::Named("desk".into())
    }
}

impl ScaleSpec {
    pub fn resolve(&self) -> Result<Scale, ConfigError> {
        match self {
            ScaleSpec::Custom(s) => Ok(s.clone()),
            ScaleSpec::Named(n) => match n.as_str() {
                "reference" => Ok(Scale::reference()),
                "desk" => Ok(Scale::desk()),
                "desk_shallow" => Ok(Scale::desk_shallow()),
                _ => fail(format!(
                    "scale: unknown scale `{n}`; known: reference, desk, desk_shallow"
                )),
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainJob {
    /// A model-table plan name; alternative to an inline `plan`.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub plan: Option<TrainPlan>,
    #[serde(default)]
    pub scale: ScaleSpec,
    #[serde(flatten)]
    pub source: CorpusSource,
    #[serde(default)]
    pub byte_fallback: bool,
    /// Packed sequences held out from training and scored after each stage.
    #[serde(default)]
    pub eval_sequences: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneOverrides {
    pub peak_lr: Option<f64>,
    pub warmup_steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub max_updates: Option<u64>,
    pub dropout: Option<f64>,
    pub head_hidden: Option<Vec<usize>>,
    pub beam_size: Option<usize>,
    pub max_len: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneJob {
    /// Fine-tuning hyperparameter preset (xnli, matis, wikiann, udpos, mtop, xsum).
    pub task: String,
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub train: PathBuf,
    pub valid: PathBuf,
    /// Held-out files by language, scored with the best checkpoint.
    #[serde(default)]
    pub test: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub overrides: FinetuneOverrides,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateJob {
    pub task: String,
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub data: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub beam_size: Option<usize>,
    #[serde(default)]
    pub max_len: Option<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostJob {
    #[serde(default)]
    pub presets: Vec<String>,
    #[serde(default)]
    pub scale: ScaleSpec,
    #[serde(default)]
    pub plans: Vec<TrainPlan>,
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn must_exist(field: &str, p: &Path) -> Result<(), ConfigError> {
    if p.exists() {
        Ok(())
    } else {
        fail(format!("{field}: path `{}` does not exist", p.display()))
    }
}

impl CorpusSource {
    fn check(&mut self, section: &str, base: &Path) -> Result<(), ConfigError> {
        match (&mut self.corpus, &self.synthetic) {
            (Some(p), None) => {
                *p = resolve_path(base, p);
                must_exist(&format!("{section}.corpus"), p)
            }
            (None, Some(s)) if s.docs_per_language == 0 => fail(format!(
                "{section}.synthetic.docs_per_language: must be positive"
            )),
            (None, Some(_)) => Ok(()),
            (None, None) => fail(format!(
                "{section}.corpus: missing (or give {section}.synthetic)"
            )),
            (Some(_), Some(_)) => fail(format!("{section}: give corpus or synthetic, not both")),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        // Check the version on its own first so an unsupported file is
        // reported as such rather than as a schema error.
        let raw: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError(format!("{}: {e}", origin.display())))?;
        match raw.get("version").and_then(|v| v.as_integer()) {
            Some(v) if v == CONFIG_VERSION as i64 => {}
            Some(v) => {
                return fail(format!(
                    "version: unsupported config version {v}, expected {CONFIG_VERSION}"
                ))
            }
            None => {
                return fail(format!(
                    "version: missing; this tool reads version = {CONFIG_VERSION}"
                ))
            }
        }
        toml::from_str(text).map_err(|e| ConfigError(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(out) = &mut self.out {
            *out = resolve_path(base, out);
        }
        for src in [
            self.pack.as_mut().map(|j| &mut j.source),
            self.pretrain.as_mut().map(|j| &mut j.source),
        ]
        .into_iter()
        .flatten()
        {
            if let Some(p) = &mut src.corpus {
                *p = resolve_path(base, p);
            }
        }
        if let Some(j) = &mut self.finetune {
            for p in [&mut j.checkpoint, &mut j.vocab, &mut j.train, &mut j.valid] {
                *p = resolve_path(base, p);
            }
            for p in j.test.values_mut() {
                *p = resolve_path(base, p);
            }
        }
        if let Some(j) = &mut self.evaluate {
            for p in [&mut j.checkpoint, &mut j.vocab] {
                *p = resolve_path(base, p);
            }
            for p in j.data.values_mut() {
                *p = resolve_path(base, p);
            }
        }
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.seed.ok_or_else(|| {
            ConfigError("seed: missing; set `seed` in the config or pass --seed".into())
        })
    }

    pub fn out(&self) -> Result<&Path, ConfigError> {
        self.out.as_deref().ok_or_else(|| {
            ConfigError("out: missing; set `out` in the config or pass --out".into())
        })
    }
}

impl PackJob {
    pub fn check(&mut self) -> Result<(), ConfigError> {
        self.source.check("pack", Path::new(""))?;
        if self.seq_len < 2 {
            return fail("pack.seq_len: must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail("pack.alpha: must be in [0, 1]");
        }
        Ok(())
    }
}

impl PretrainJob {
    pub fn check(&mut self) -> Result<TrainPlan, ConfigError> {
        self.source.check("pretrain", Path::new(""))?;
        let plan = match (&self.preset, &self.plan) {
            (Some(name), None) => {
                let scale = self.scale.resolve()?;
                preset(name, &scale).map_err(|e| ConfigError(format!("pretrain.preset: {e}")))?
            }
            (None, Some(plan)) => plan.clone(),
            (None, None) => return fail("pretrain.preset: missing (or give pretrain.plan)"),
            (Some(_), Some(_)) => return fail("pretrain: give preset or plan, not both"),
        };
        plan.validate()
            .map_err(|e| ConfigError(format!("pretrain.plan: {e}")))?;
        if plan.model.max_positions < 3 {
            return fail("pretrain.plan.model.max_positions: must leave room for BOS and EOS");
        }
        Ok(plan)
    }
}

impl FinetuneJob {
    pub fn check(&self) -> Result<FinetuneConfig, ConfigError> {
        must_exist("finetune.checkpoint", &self.checkpoint)?;
        must_exist("finetune.vocab", &self.vocab)?;
        must_exist("finetune.train", &self.train)?;
        must_exist("finetune.valid", &self.valid)?;
        for (lang, p) in &self.test {
            must_exist(&format!("finetune.test.{lang}"), p)?;
        }
        if matches!(&self.seeds, Some(s) if s.is_empty()) {
            return fail("finetune.seeds: must not be empty");
        }
        let mut cfg = FinetuneConfig::table8(&self.task)
            .map_err(|e| ConfigError(format!("finetune.task: {e}")))?;
        let o = &self.overrides;
        if let Some(v) = o.peak_lr {
            cfg.peak_lr = v;
        }
        if let Some(v) = o.warmup_steps {
            cfg.warmup_steps = v;
        }
        if let Some(v) = o.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = o.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = o.max_updates {
            cfg.max_updates = v;
        }
        if let Some(v) = o.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = &o.head_hidden {
            match &mut cfg.head {
                Some(h) => h.hidden = v.clone(),
                None => {
                    return fail("finetune.overrides.head_hidden: generation tasks take no head")
                }
            }
        }
        cfg.generation = gen_config(cfg.generation, o.beam_size, o.max_len);
        cfg.validate()
            .map_err(|e| ConfigError(format!("finetune: {e}")))?;
        if cfg.generation.beam_size == 0 || cfg.generation.max_len == 0 {
            return fail("finetune.overrides: beam_size and max_len must be positive");
        }
        Ok(cfg)
    }
}

pub fn gen_config(mut gc: GenConfig, beam: Option<usize>, max_len: Option<usize>) -> GenConfig {
    if let Some(b) = beam {
        gc.beam_size = b;
    }
    if let Some(m) = max_len {
        gc.max_len = m;
    }
    gc
}

impl EvaluateJob {
    pub fn check(&self) -> Result<FinetuneConfig, ConfigError> {
        must_exist("evaluate.checkpoint", &self.checkpoint)?;
        must_exist("evaluate.vocab", &self.vocab)?;
        if self.data.is_empty() {
            return fail("evaluate.data: give at least one language = path entry");
        }
        for (lang, p) in &self.data {
            must_exist(&format!("evaluate.data.{lang}"), p)?;
        }
        let mut cfg = FinetuneConfig::table8(&self.task)
            .map_err(|e| ConfigError(format!("evaluate.task: {e}")))?;
        cfg.generation = gen_config(cfg.generation, self.beam_size, self.max_len);
        if cfg.generation.beam_size == 0 || cfg.generation.max_len == 0 {
            return fail("evaluate: beam_size and max_len must be positive");
        }
        Ok(cfg)
    }
}

impl CostJob {
    pub fn resolve(&self) -> Result<Vec<TrainPlan>, ConfigError> {
        let scale = self.scale.resolve()?;
        let mut plans = Vec::new();
        for name in &self.presets {
            plans
                .push(preset(name, &scale).map_err(|e| ConfigError(format!("cost.presets: {e}")))?);
        }
        for p in &self.plans {
            p.validate()
                .map_err(|e| ConfigError(format!("cost.plans.{}: {e}", p.name)))?;
            plans.push(p.clone());
        }
        Ok(plans)
    }
}
