//! Pipeline configuration in a flat `key = value` text format.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Later assignments win, so command-line overrides are applied by
//! feeding them through [`PipelineConfig::set`] after the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::user_model::AugmentationConfig;

/// Parses `key = value` lines into an ordered list of assignments.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

pub const M_GRID: [usize; 5] = [2, 3, 4, 5, 6];
pub const TAU_GRID: [f64; 3] = [0.01, 0.1, 1.0];
pub const LR_GRID: [f64; 3] = [1e-3, 1e-4, 1e-5];
pub const ALPHA_RANGE: (f64, f64) = (0.01, 1.0);
/// Points sampled from the alpha range when enumerating a grid.
pub const ALPHA_GRID: [f64; 5] = [0.01, 0.1, 0.3, 0.5, 1.0];

/// Source of frozen base embeddings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbedderKind {
    Hash,
    Precomputed(PathBuf),
    Remote(String),
}

/// Source of cross features for the reranker.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeaturizerKind {
    Mock,
    Remote(String),
}

/// Text generator used for feedback and evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorKind {
    /// Deterministic oracle; ground truth comes from `oracle`.
    Mock,
    /// Chat-completion endpoint at `llm_url` serving `llm_model`.
    Chat,
}

fn parse_endpoint(key: &str, value: &str) -> Result<(String, Option<String>)> {
    match value.split_once(':') {
        Some((kind, rest)) if kind == "remote" || kind == "precomputed" => {
            Ok((kind.to_string(), Some(rest.to_string())))
        }
        None => Ok((value.to_string(), None)),
        Some(_) => Err(Error::config(format!(
            "`{key}`: unrecognized value `{value}`"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    /// Ground truth for the mock generator and for evidence hit rates.
    pub oracle: Option<PathBuf>,
    pub dim: usize,
    pub max_history: usize,
    pub k: usize,
    pub m: usize,
    pub alpha: f64,
    pub tau: f64,
    pub augment: AugmentationConfig,
    pub user_lr: f64,
    pub user_epochs: usize,
    pub user_batch: usize,
    pub retriever_lr: f64,
    pub retriever_steps: usize,
    pub retriever_batch: usize,
    pub reranker_lr: f64,
    pub reranker_steps: usize,
    pub reranker_batch: usize,
    pub seed: u64,
    pub workers: usize,
    /// Fraction of samples held out for evaluation when a sample carries
    /// no explicit `split` field.
    pub test_fraction: f64,
    pub embedder: EmbedderKind,
    pub embedding_cache: Option<PathBuf>,
    pub featurizer: FeaturizerKind,
    pub generator: GeneratorKind,
    pub llm_url: String,
    pub llm_model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub grid_search: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: PathBuf::from("data/dataset.jsonl"),
            out_dir: PathBuf::from("runs/default"),
            oracle: None,
            dim: 64,
            max_history: crate::corpus::DEFAULT_MAX_HISTORY,
            k: 5,
            m: 4,
            alpha: 0.5,
            tau: 0.1,
            augment: AugmentationConfig::default(),
            user_lr: 1e-4,
            user_epochs: 30,
            user_batch: 16,
            retriever_lr: 1e-3,
            retriever_steps: 200,
            retriever_batch: 8,
            reranker_lr: 1e-3,
            reranker_steps: 200,
            reranker_batch: 8,
            seed: 17,
            workers: crate::feedback::DEFAULT_WORKERS,
            test_fraction: 0.3,
            embedder: EmbedderKind::Hash,
            embedding_cache: None,
            featurizer: FeaturizerKind::Mock,
            generator: GeneratorKind::Mock,
            llm_url: "http://localhost:8000/v1".into(),
            llm_model: "llama3-8b-instruct".into(),
            timeout_secs: 60,
            max_retries: 3,
            grid_search: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (k, v) in parse_flat(&text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Assigns one key. Unknown keys are a config error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "oracle" => self.oracle = opt_path(value),
            "dim" => self.dim = parse(key, value)?,
            "max_history" => self.max_history = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "crop" => self.augment.crop = parse(key, value)?,
            "mask" => self.augment.mask = parse(key, value)?,
            "reorder" => self.augment.reorder = parse(key, value)?,
            "user_lr" => self.user_lr = parse(key, value)?,
            "user_epochs" => self.user_epochs = parse(key, value)?,
            "user_batch" => self.user_batch = parse(key, value)?,
            "retriever_lr" => self.retriever_lr = parse(key, value)?,
            "retriever_steps" => self.retriever_steps = parse(key, value)?,
            "retriever_batch" => self.retriever_batch = parse(key, value)?,
            "reranker_lr" => self.reranker_lr = parse(key, value)?,
            "reranker_steps" => self.reranker_steps = parse(key, value)?,
            "reranker_batch" => self.reranker_batch = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "test_fraction" => self.test_fraction = parse(key, value)?,
            "embedder" => {
                self.embedder = match parse_endpoint(key, value)? {
                    (k, None) if k == "hash" => EmbedderKind::Hash,
                    (k, Some(p)) if k == "precomputed" => {
                        EmbedderKind::Precomputed(PathBuf::from(p))
                    }
                    (k, Some(url)) if k == "remote" => EmbedderKind::Remote(url),
                    _ => {
                        return Err(Error::config(format!(
                            "`embedder`: unrecognized value `{value}`"
                        )))
                    }
                }
            }
            "embedding_cache" => self.embedding_cache = opt_path(value),
            "featurizer" => {
                self.featurizer = match parse_endpoint(key, value)? {
                    (k, None) if k == "mock" => FeaturizerKind::Mock,
                    (k, Some(url)) if k == "remote" => FeaturizerKind::Remote(url),
                    _ => {
                        return Err(Error::config(format!(
                            "`featurizer`: unrecognized value `{value}`"
                        )))
                    }
                }
            }
            "generator" => {
                self.generator = match value {
                    "mock" => GeneratorKind::Mock,
                    "chat" => GeneratorKind::Chat,
                    _ => {
                        return Err(Error::config(format!(
                            "`generator`: unrecognized value `{value}`"
                        )))
                    }
                }
            }
            "llm_url" => self.llm_url = value.to_string(),
            "llm_model" => self.llm_model = value.to_string(),
            "timeout_secs" => self.timeout_secs = parse(key, value)?,
            "max_retries" => self.max_retries = parse(key, value)?,
            "grid_search" => self.grid_search = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Serializes back to the flat format; `from_file` on the output gives
    /// an equal config.
    pub fn to_flat(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let embedder = match &self.embedder {
            EmbedderKind::Hash => "hash".to_string(),
            EmbedderKind::Precomputed(p) => format!("precomputed:{}", p.display()),
            EmbedderKind::Remote(u) => format!("remote:{u}"),
        };
        let featurizer = match &self.featurizer {
            FeaturizerKind::Mock => "mock".to_string(),
            FeaturizerKind::Remote(u) => format!("remote:{u}"),
        };
        let generator = match self.generator {
            GeneratorKind::Mock => "mock",
            GeneratorKind::Chat => "chat",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("oracle", path(&self.oracle)),
            ("dim", self.dim.to_string()),
            ("max_history", self.max_history.to_string()),
            ("k", self.k.to_string()),
            ("m", self.m.to_string()),
            ("alpha", self.alpha.to_string()),
            ("tau", self.tau.to_string()),
            ("crop", self.augment.crop.to_string()),
            ("mask", self.augment.mask.to_string()),
            ("reorder", self.augment.reorder.to_string()),
            ("user_lr", self.user_lr.to_string()),
            ("user_epochs", self.user_epochs.to_string()),
            ("user_batch", self.user_batch.to_string()),
            ("retriever_lr", self.retriever_lr.to_string()),
            ("retriever_steps", self.retriever_steps.to_string()),
            ("retriever_batch", self.retriever_batch.to_string()),
            ("reranker_lr", self.reranker_lr.to_string()),
            ("reranker_steps", self.reranker_steps.to_string()),
            ("reranker_batch", self.reranker_batch.to_string()),
            ("seed", self.seed.to_string()),
            ("workers", self.workers.to_string()),
            ("test_fraction", self.test_fraction.to_string()),
            ("embedder", embedder),
            ("embedding_cache", path(&self.embedding_cache)),
            ("featurizer", featurizer),
            ("generator", generator.to_string()),
            ("llm_url", self.llm_url.clone()),
            ("llm_model", self.llm_model.clone()),
            ("timeout_secs", self.timeout_secs.to_string()),
            ("max_retries", self.max_retries.to_string()),
            ("grid_search", self.grid_search.to_string()),
        ];
        pairs
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.max_history == 0 {
            return Err(Error::config("dim and max_history must be positive"));
        }
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if self.m == 0 {
            return Err(Error::config("m must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        self.augment.validate()?;
        for (name, lr) in [
            ("user_lr", self.user_lr),
            ("retriever_lr", self.retriever_lr),
            ("reranker_lr", self.reranker_lr),
        ] {
            if !(lr >= 0.0) {
                return Err(Error::config(format!(
                    "{name} must be non-negative, got {lr}"
                )));
            }
        }
        if self.workers == 0 {
            return Err(Error::config("workers must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config(format!(
                "test_fraction must be in [0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.grid_search {
            self.validate_grid()?;
        }
        Ok(())
    }

    /// In grid-search mode every tuned value must come from the published
    /// search space.
    fn validate_grid(&self) -> Result<()> {
        if !M_GRID.contains(&self.m) {
            return Err(Error::config(format!(
                "grid search: m = {} not in {M_GRID:?}",
                self.m
            )));
        }
        if !TAU_GRID.contains(&self.tau) {
            return Err(Error::config(format!(
                "grid search: tau = {} not in {TAU_GRID:?}",
                self.tau
            )));
        }
        if !(ALPHA_RANGE.0..=ALPHA_RANGE.1).contains(&self.alpha) {
            return Err(Error::config(format!(
                "grid search: alpha = {} not in {ALPHA_RANGE:?}",
                self.alpha
            )));
        }
        for lr in [self.retriever_lr, self.reranker_lr] {
            if !LR_GRID.contains(&lr) {
                return Err(Error::config(format!(
                    "grid search: learning rate {lr} not in {LR_GRID:?}"
                )));
            }
        }
        Ok(())
    }

    /// Every combination of the tuned hyperparameters, each with its own
    /// output directory under `out_dir`.
    pub fn grid_points(&self) -> Vec<PipelineConfig> {
        let mut out = Vec::new();
        for &m in &M_GRID {
            for &tau in &TAU_GRID {
                for &alpha in &ALPHA_GRID {
                    for &lr in &LR_GRID {
                        let mut c = self.clone();
                        c.m = m;
                        c.tau = tau;
                        c.alpha = alpha;
                        c.retriever_lr = lr;
                        c.reranker_lr = lr;
                        c.grid_search = true;
                        c.out_dir = self
                            .out_dir
                            .join(format!("m{m}_tau{tau}_alpha{alpha}_lr{lr}"));
                        out.push(c);
                    }
                }
            }
        }
        out
    }

    /// Snapshot as an ordered map, for reports.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        parse_flat(&self.to_flat())
            .expect("serialized config parses")
            .into_iter()
            .collect()
    }
}
