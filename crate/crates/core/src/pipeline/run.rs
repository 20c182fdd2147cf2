//! Staged training and evaluation over a dataset on disk.
//!
//! Each stage reads the artifacts of the stages before it from `out_dir`
//! and writes its own, so stages can run separately from the command line.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Duration;

use super::config::{EmbedderKind, FeaturizerKind, GeneratorKind, PipelineConfig};
use super::prompt::{build_prompt, LAMP2_TAGS};
use super::report::{
    emit_report, DistillationReport, LossTraces, RunReport, SampleResult, VariantReport,
};
use super::synth::SyntheticData;
use crate::corpus::{
    embed_document, load_dataset, read_embedding_cache, save_dataset, write_embedding_cache,
    Dataset, Document, EmbeddingCache, EmbeddingProvider, HashEmbedder, PrecomputedEmbeddings,
    RemoteEmbedder, Sample, Task, EMBED_TOKEN_ENV,
};
use crate::distribution::DistillConfig;
use crate::error::{Error, Result};
use crate::feedback::{
    collect_feedback, eval_output, extract_prediction, llm_distribution, FeedbackCache,
    GenerationProvider, HttpChatProvider, MockOracle, MockOracleConfig, LLM_TOKEN_ENV,
};
use crate::http::token_from_env;
use crate::metrics::{
    classification_metrics, rating_or_midpoint, regression_metrics, rouge1, rouge_l,
};
use crate::reranker::{
    top_k_by_score, train_reranker, CrossFeaturizer, MockCrossFeaturizer, RemoteCrossEncoder,
    RerankerExample, RerankerParams,
};
use crate::retriever::{
    train_retriever, Ranking, RetrieverExample, RetrieverParams, ScoredCandidate, UserPool,
};
use crate::text::fnv1a64;
use crate::user_model::{
    train_user_encoder, EncoderConfig, UserEncoder, UserIndex, UserTrainConfig,
};

pub const USER_ENCODER_FILE: &str = "user_encoder.ckpt";
pub const USER_INDEX_FILE: &str = "user_index.bin";
pub const RETRIEVER_FILE: &str = "retriever.ckpt";
pub const RERANKER_FILE: &str = "reranker.ckpt";
pub const FEEDBACK_FILE: &str = "feedback.jsonl";
pub const LOSSES_FILE: &str = "train_losses.json";

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const ORACLE_FILE: &str = "oracle.json";
pub const CLUSTERS_FILE: &str = "user_clusters.json";

// Offsets keep the random streams of the stages independent.
const RETRIEVER_SEED: u64 = 1;
const RERANKER_SEED: u64 = 2;
const USER_TRAIN_SEED: u64 = 3;
const RETRIEVER_TRAIN_SEED: u64 = 4;
const RERANKER_TRAIN_SEED: u64 = 5;

/// Writes a synthetic benchmark as `dataset.jsonl`, `oracle.json` and
/// `user_clusters.json` under `dir`.
pub fn write_synthetic(data: &SyntheticData, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    save_dataset(&data.dataset, dir.join(DATASET_FILE))?;
    std::fs::write(
        dir.join(ORACLE_FILE),
        serde_json::to_string_pretty(&data.oracle)?,
    )?;
    std::fs::write(
        dir.join(CLUSTERS_FILE),
        serde_json::to_string_pretty(&data.user_cluster)?,
    )?;
    Ok(())
}

pub fn load_oracle(path: impl AsRef<Path>) -> Result<MockOracleConfig> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Whether a sample is held out for evaluation: an explicit `split` field
/// wins, otherwise a seeded hash of the sample id decides.
pub fn is_test_sample(sample: &Sample, seed: u64, test_fraction: f64) -> bool {
    match sample.fields.get("split").map(String::as_str) {
        Some("test") => true,
        Some(_) => false,
        None => {
            let h = fnv1a64(format!("{seed}:{}", sample.id).as_bytes());
            (h as f64 / u64::MAX as f64) < test_fraction
        }
    }
}

/// Everything a stage needs: the dataset, its frozen embeddings and the
/// external providers.
pub struct Workspace {
    pub cfg: PipelineConfig,
    pub dataset: Dataset,
    pub oracle: Option<MockOracleConfig>,
    /// Per user, the embedded history in dataset order.
    pub doc_embeddings: Vec<Vec<Vec<f64>>>,
    pub doc_ids: Vec<Vec<String>>,
    /// Per sample, the embedded query.
    pub query_embeddings: Vec<Vec<f64>>,
    pub featurizer: Box<dyn CrossFeaturizer>,
    pub generator: Box<dyn GenerationProvider>,
    user_pos: HashMap<String, usize>,
}

fn round_f32(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

fn build_embedder(cfg: &PipelineConfig) -> Result<Box<dyn EmbeddingProvider>> {
    Ok(match &cfg.embedder {
        EmbedderKind::Hash => Box::new(HashEmbedder::new(cfg.dim)?),
        EmbedderKind::Precomputed(path) => {
            Box::new(PrecomputedEmbeddings::open(path, Some(cfg.dim))?)
        }
        EmbedderKind::Remote(url) => Box::new(
            RemoteEmbedder::new(
                url.clone(),
                cfg.dim,
                Duration::from_secs(cfg.timeout_secs),
                cfg.max_retries,
            )
            .with_token(token_from_env(EMBED_TOKEN_ENV)),
        ),
    })
}

fn query_key(sample: &Sample) -> String {
    format!("query:{}", sample.id)
}

impl Workspace {
    /// Loads and validates the dataset, builds providers from the config and
    /// embeds every document and query.
    ///
    /// Fresh embeddings are rounded to `f32`, the precision of the cache
    /// file, so a run reading the cache sees exactly the same vectors as the
    /// run that wrote it.
    pub fn open(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut dataset = load_dataset(&cfg.dataset)?;
        dataset.truncate_histories(cfg.max_history);
        dataset.validate()?;
        let oracle = cfg.oracle.as_ref().map(load_oracle).transpose()?;

        let cached: HashMap<String, Vec<f64>> = match &cfg.embedding_cache {
            Some(path) if path.exists() => read_embedding_cache(path, Some(cfg.dim))?
                .entries
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().map(f64::from).collect()))
                .collect(),
            _ => HashMap::new(),
        };
        let embedder = build_embedder(cfg)?;
        let mut fresh = 0usize;
        let mut lookup = |key: &str, compute: &dyn Fn() -> Result<Vec<f64>>| -> Result<Vec<f64>> {
            match cached.get(key) {
                Some(v) => Ok(v.clone()),
                None => {
                    fresh += 1;
                    Ok(round_f32(compute()?))
                }
            }
        };
        let mut doc_embeddings = Vec::with_capacity(dataset.users.len());
        let mut doc_ids = Vec::with_capacity(dataset.users.len());
        for user in &dataset.users {
            let mut embs = Vec::with_capacity(user.history.len());
            for doc in &user.history {
                embs.push(lookup(&doc.id, &|| embed_document(embedder.as_ref(), doc))?);
            }
            doc_embeddings.push(embs);
            doc_ids.push(user.history.iter().map(|d| d.id.clone()).collect());
        }
        let mut query_embeddings = Vec::with_capacity(dataset.samples.len());
        for s in &dataset.samples {
            query_embeddings.push(lookup(&query_key(s), &|| {
                let v = embedder.embed_text(&s.query)?;
                if v.len() != cfg.dim {
                    return Err(Error::dim(format!(
                        "query embedding of `{}` has {} values, expected {}",
                        s.id,
                        v.len(),
                        cfg.dim
                    )));
                }
                Ok(v)
            })?);
        }
        if let Some(path) = &cfg.embedding_cache {
            if fresh > 0 {
                let mut cache = EmbeddingCache::new(cfg.dim);
                for (user, embs) in dataset.users.iter().zip(&doc_embeddings) {
                    for (doc, e) in user.history.iter().zip(embs) {
                        cache.push(doc.id.clone(), e);
                    }
                }
                for (s, e) in dataset.samples.iter().zip(&query_embeddings) {
                    cache.push(query_key(s), e);
                }
                write_embedding_cache(path, &cache)?;
                log::info!(
                    "wrote {} embeddings to {}",
                    cache.entries.len(),
                    path.display()
                );
            }
        }

        let featurizer: Box<dyn CrossFeaturizer> = match &cfg.featurizer {
            FeaturizerKind::Mock => Box::new(MockCrossFeaturizer::new(cfg.dim)?),
            FeaturizerKind::Remote(url) => Box::new(
                RemoteCrossEncoder::new(
                    url.clone(),
                    cfg.dim,
                    Duration::from_secs(cfg.timeout_secs),
                    cfg.max_retries,
                )
                .with_token(token_from_env(EMBED_TOKEN_ENV)),
            ),
        };
        let generator: Box<dyn GenerationProvider> = match cfg.generator {
            GeneratorKind::Mock => {
                let oracle = oracle.clone().ok_or_else(|| {
                    Error::config("the mock generator needs `oracle` to point at ground truth")
                })?;
                Box::new(MockOracle::new(oracle, &dataset)?)
            }
            GeneratorKind::Chat => Box::new(
                HttpChatProvider::new(
                    &cfg.llm_url,
                    cfg.llm_model.clone(),
                    Duration::from_secs(cfg.timeout_secs),
                    cfg.max_retries,
                )
                .with_token(token_from_env(LLM_TOKEN_ENV)),
            ),
        };
        let user_pos = dataset
            .users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.user_id.clone(), i))
            .collect();
        Ok(Workspace {
            cfg: cfg.clone(),
            dataset,
            oracle,
            doc_embeddings,
            doc_ids,
            query_embeddings,
            featurizer,
            generator,
            user_pos,
        })
    }

    /// Replaces the generator, e.g. with an instrumented one in tests.
    pub fn with_generator(mut self, generator: Box<dyn GenerationProvider>) -> Self {
        self.generator = generator;
        self
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn user(&self, id: &str) -> Result<usize> {
        self.user_pos.get(id).copied().ok_or_else(|| Error::Lookup {
            kind: "user",
            key: id.to_string(),
        })
    }

    fn split(&self, test: bool) -> Vec<usize> {
        (0..self.dataset.samples.len())
            .filter(|&i| {
                is_test_sample(
                    &self.dataset.samples[i],
                    self.cfg.seed,
                    self.cfg.test_fraction,
                ) == test
            })
            .collect()
    }

    pub fn train_samples(&self) -> Vec<usize> {
        self.split(false)
    }

    pub fn test_samples(&self) -> Vec<usize> {
        self.split(true)
    }

    fn require(&self, name: &str, stage: &'static str, needs: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::Training {
                stage,
                step: 0,
                message: format!("{} not found; run `{needs}` first", p.display()),
            });
        }
        Ok(p)
    }

    fn load_encoder(&self, stage: &'static str) -> Result<UserEncoder> {
        let path = self.require(USER_ENCODER_FILE, stage, "train-user")?;
        let enc = UserEncoder::load(&path)?;
        if enc.dim() != self.cfg.dim {
            return Err(Error::Checkpoint {
                path,
                message: format!(
                    "encoder dimension {} does not match configured {}",
                    enc.dim(),
                    self.cfg.dim
                ),
            });
        }
        Ok(enc)
    }

    fn build_index(&self, encoder: &UserEncoder) -> Result<UserIndex> {
        UserIndex::build(
            encoder,
            self.dataset
                .users
                .iter()
                .zip(&self.doc_embeddings)
                .map(|(u, e)| (u.user_id.as_str(), e.as_slice())),
        )
    }

    fn load_retriever(&self, stage: &'static str) -> Result<RetrieverParams> {
        let path = self.require(RETRIEVER_FILE, stage, "train-retriever")?;
        RetrieverParams::load(path, self.cfg.dim)
    }

    fn load_reranker(&self, stage: &'static str) -> Result<RerankerParams> {
        let path = self.require(RERANKER_FILE, stage, "train-reranker")?;
        RerankerParams::load(path, self.cfg.dim)
    }

    fn open_feedback_cache(&self) -> Result<FeedbackCache> {
        FeedbackCache::open(self.path(FEEDBACK_FILE))
    }

    fn pools(&self, users: &[usize]) -> Vec<UserPool<'_>> {
        users
            .iter()
            .map(|&u| UserPool {
                user_id: &self.dataset.users[u].user_id,
                doc_ids: &self.doc_ids[u],
                embeddings: &self.doc_embeddings[u],
            })
            .collect()
    }

    /// The `m` most similar users to the sample's user, the user first.
    fn neighbours(&self, index: &UserIndex, sample: &Sample, m: usize) -> Result<Vec<usize>> {
        index
            .retrieve(&sample.user_id, m)?
            .iter()
            .map(|(id, _)| self.user(id))
            .collect()
    }

    fn document(&self, c: &ScoredCandidate) -> Result<&Document> {
        let u = self.user(&c.owner)?;
        self.dataset.users[u]
            .history
            .get(c.position)
            .ok_or_else(|| Error::Lookup {
                kind: "document",
                key: c.doc_id.clone(),
            })
    }

    fn candidates(
        &self,
        index: &UserIndex,
        retriever: &RetrieverParams,
        sample_idx: usize,
        m: usize,
        ranking: Ranking,
    ) -> Result<Vec<ScoredCandidate>> {
        let sample = &self.dataset.samples[sample_idx];
        let users = self.neighbours(index, sample, m)?;
        let user_emb = user_embedding(index, &sample.user_id)?;
        retriever.retrieve_topk_per_user(
            &self.query_embeddings[sample_idx],
            user_emb,
            &self.pools(&users),
            self.cfg.k,
            ranking,
        )
    }

    /// Feedback distribution over `docs`, one single-document prompt each.
    fn feedback_target(
        &self,
        sample: &Sample,
        docs: &[&Document],
        cache: &FeedbackCache,
    ) -> Result<Vec<f64>> {
        let records = collect_feedback(
            self.generator.as_ref(),
            sample,
            docs,
            &|d: &Document| build_prompt(sample, &[d]),
            cache,
            self.cfg.workers,
        )?;
        let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
        llm_distribution(&scores)
    }

    /// Trains the user encoder on every user history, then writes the
    /// encoder checkpoint and the user index.
    pub fn train_user(&self) -> Result<Vec<f64>> {
        std::fs::create_dir_all(&self.cfg.out_dir)?;
        let mut encoder = UserEncoder::new(EncoderConfig::new(
            self.cfg.dim,
            self.cfg.max_history,
            self.cfg.seed,
        ))?;
        let trace = train_user_encoder(
            &mut encoder,
            &self.doc_embeddings,
            &UserTrainConfig {
                epochs: self.cfg.user_epochs,
                batch_size: self.cfg.user_batch,
                lr: self.cfg.user_lr,
                tau: self.cfg.tau,
                augment: self.cfg.augment,
                seed: self.cfg.seed.wrapping_add(USER_TRAIN_SEED),
            },
        )?;
        encoder.save(self.path(USER_ENCODER_FILE))?;
        self.build_index(&encoder)?
            .save(self.path(USER_INDEX_FILE))?;
        record_losses(&self.cfg.out_dir, |l| l.user = trace.epoch_losses.clone())?;
        Ok(trace.epoch_losses)
    }

    /// Distills generator feedback into the retriever. Candidates come from
    /// the base-embedding ranking so the training set does not depend on the
    /// weights being trained.
    pub fn train_retriever(&self) -> Result<Vec<f64>> {
        let encoder = self.load_encoder("retriever")?;
        let index = self.build_index(&encoder)?;
        let mut params = RetrieverParams::new(
            self.cfg.dim,
            self.cfg.alpha,
            self.cfg.seed.wrapping_add(RETRIEVER_SEED),
        )?;
        let cache = self.open_feedback_cache()?;
        let mut examples = Vec::new();
        for i in self.train_samples() {
            let sample = &self.dataset.samples[i];
            let cands = self.candidates(&index, &params, i, self.cfg.m, Ranking::Base)?;
            let docs: Vec<&Document> = cands
                .iter()
                .map(|c| self.document(c))
                .collect::<Result<_>>()?;
            let target = self.feedback_target(sample, &docs, &cache)?;
            examples.push(RetrieverExample {
                sample_id: sample.id.clone(),
                query: self.query_embeddings[i].clone(),
                user: user_embedding(&index, &sample.user_id)?.to_vec(),
                docs: cands
                    .iter()
                    .map(|c| Ok(self.doc_embeddings[self.user(&c.owner)?][c.position].clone()))
                    .collect::<Result<_>>()?,
                target,
            });
        }
        log::info!(
            "retriever feedback: {} examples, cache hits {} misses {}",
            examples.len(),
            cache.hits(),
            cache.misses()
        );
        let trace = train_retriever(
            &mut params,
            &examples,
            &DistillConfig {
                steps: self.cfg.retriever_steps,
                batch_size: self.cfg.retriever_batch,
                lr: self.cfg.retriever_lr,
                seed: self.cfg.seed.wrapping_add(RETRIEVER_TRAIN_SEED),
            },
        )?;
        params.save(self.path(RETRIEVER_FILE))?;
        record_losses(&self.cfg.out_dir, |l| l.retriever = trace.clone())?;
        Ok(trace)
    }

    /// Distills generator feedback into the reranker over the trained
    /// retriever's candidates.
    pub fn train_reranker(&self) -> Result<Vec<f64>> {
        let encoder = self.load_encoder("reranker")?;
        let index = self.build_index(&encoder)?;
        let retriever = self.load_retriever("reranker")?;
        let mut params =
            RerankerParams::new(self.cfg.dim, self.cfg.seed.wrapping_add(RERANKER_SEED))?;
        let cache = self.open_feedback_cache()?;
        let mut examples = Vec::new();
        for i in self.train_samples() {
            let sample = &self.dataset.samples[i];
            let cands =
                self.candidates(&index, &retriever, i, self.cfg.m, Ranking::Personalized)?;
            let docs: Vec<&Document> = cands
                .iter()
                .map(|c| self.document(c))
                .collect::<Result<_>>()?;
            let target = self.feedback_target(sample, &docs, &cache)?;
            let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
            examples.push(RerankerExample {
                sample_id: sample.id.clone(),
                user: user_embedding(&index, &sample.user_id)?.to_vec(),
                features: self.featurizer.features_batch(&sample.query, &texts)?,
                target,
            });
        }
        let trace = train_reranker(
            &mut params,
            &examples,
            &DistillConfig {
                steps: self.cfg.reranker_steps,
                batch_size: self.cfg.reranker_batch,
                lr: self.cfg.reranker_lr,
                seed: self.cfg.seed.wrapping_add(RERANKER_TRAIN_SEED),
            },
        )?;
        params.save(self.path(RERANKER_FILE))?;
        record_losses(&self.cfg.out_dir, |l| l.reranker = trace.clone())?;
        Ok(trace)
    }

    /// Runs the full retrieve, rerank and generate chain for one sample.
    fn answer(
        &self,
        index: &UserIndex,
        retriever: &RetrieverParams,
        reranker: &RerankerParams,
        sample_idx: usize,
        m: usize,
    ) -> Result<(String, Vec<&Document>)> {
        let sample = &self.dataset.samples[sample_idx];
        let cands = self.candidates(index, retriever, sample_idx, m, Ranking::Personalized)?;
        let docs: Vec<&Document> = cands
            .iter()
            .map(|c| self.document(c))
            .collect::<Result<_>>()?;
        let pairs: Vec<(&str, &str)> = docs
            .iter()
            .map(|d| (d.id.as_str(), d.text.as_str()))
            .collect();
        let user_emb = user_embedding(index, &sample.user_id)?;
        let ranked = reranker.rerank_topk(
            self.featurizer.as_ref(),
            &sample.query,
            &pairs,
            user_emb,
            self.cfg.k,
        )?;
        let chosen: Vec<&Document> = ranked.iter().map(|(i, _)| docs[*i]).collect();
        let prompt = build_prompt(sample, &chosen)?;
        Ok((self.generator.generate(&prompt)?, chosen))
    }

    /// Evaluates the trained pipeline and its ablations on the test split.
    pub fn evaluate(&self) -> Result<RunReport> {
        let encoder = self.load_encoder("eval")?;
        let index = self.build_index(&encoder)?;
        let retriever = self.load_retriever("eval")?;
        let reranker = self.load_reranker("eval")?;
        let untrained_reranker =
            RerankerParams::new(self.cfg.dim, self.cfg.seed.wrapping_add(RERANKER_SEED))?;
        let test = self.test_samples();
        if test.is_empty() {
            return Err(Error::config("the test split is empty"));
        }
        let gold = self.gold_documents();

        let variants: Vec<(&str, usize, RetrieverParams, &RerankerParams)> = vec![
            ("full", self.cfg.m, retriever.clone(), &reranker),
            ("no_user_retrieval", 1, retriever.clone(), &reranker),
            (
                "no_preference",
                self.cfg.m,
                retriever.with_alpha(0.0)?,
                &reranker,
            ),
            (
                "untrained_reranker",
                self.cfg.m,
                retriever.clone(),
                &untrained_reranker,
            ),
        ];
        let mut reports = Vec::new();
        let mut samples = Vec::new();
        for (name, m, ret, rr) in &variants {
            let mut results = Vec::with_capacity(test.len());
            for &i in &test {
                let sample = &self.dataset.samples[i];
                let (output, docs) = self.answer(&index, ret, rr, i, *m)?;
                let score = eval_output(sample.task, &sample.target, &output)?;
                let evidence_hit = gold.as_ref().map(|g| {
                    g.get(&sample.id)
                        .is_some_and(|ids| docs.iter().any(|d| ids.contains(&d.id)))
                });
                results.push(SampleResult {
                    variant: name.to_string(),
                    sample_id: sample.id.clone(),
                    task: sample.task.name().to_string(),
                    score,
                    prediction: extract_prediction(sample.task, &output),
                    evidence_hit,
                    docs: docs.iter().map(|d| d.id.clone()).collect(),
                });
            }
            reports.push(self.summarize_variant(name, *m, ret.alpha, &test, &results)?);
            samples.extend(results);
        }
        let distillation = match &gold {
            Some(g) => Some(self.distillation_report(&index, &retriever, &reranker, &test, g)?),
            None => None,
        };
        Ok(RunReport {
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            losses: read_losses(&self.cfg.out_dir)?,
            variants: reports,
            distillation,
            samples,
        })
    }

    /// Planted evidence per sample, from the oracle ground truth.
    fn gold_documents(&self) -> Option<BTreeMap<String, Vec<String>>> {
        let oracle = self.oracle.as_ref()?;
        let mut by_cluster: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for (doc, cluster) in &oracle.doc_cluster {
            by_cluster.entry(cluster).or_default().push(doc.clone());
        }
        Some(
            oracle
                .sample_gold
                .iter()
                .map(|(s, c)| {
                    (
                        s.clone(),
                        by_cluster.get(c.as_str()).cloned().unwrap_or_default(),
                    )
                })
                .collect(),
        )
    }

    fn summarize_variant(
        &self,
        name: &str,
        m: usize,
        alpha: f64,
        test: &[usize],
        results: &[SampleResult],
    ) -> Result<VariantReport> {
        let n = results.len() as f64;
        let mean_score = results.iter().map(|r| r.score).sum::<f64>() / n;
        let hits: Vec<bool> = results.iter().filter_map(|r| r.evidence_hit).collect();
        let evidence_hit_rate =
            (hits.len() == results.len()).then(|| hits.iter().filter(|h| **h).count() as f64 / n);
        let mut by_task: BTreeMap<Task, Vec<(&Sample, &SampleResult)>> = BTreeMap::new();
        for (&i, r) in test.iter().zip(results) {
            let s = &self.dataset.samples[i];
            by_task.entry(s.task).or_default().push((s, r));
        }
        let mut metrics = BTreeMap::new();
        for (task, rows) in by_task {
            let t = task.name();
            match task {
                Task::Lamp1 | Task::Lamp2 => {
                    let preds: Vec<&str> =
                        rows.iter().map(|(_, r)| r.prediction.as_str()).collect();
                    let targets: Vec<&str> = rows.iter().map(|(s, _)| s.target.as_str()).collect();
                    let labels: Vec<&str> = if task == Task::Lamp1 {
                        vec!["[1]", "[2]"]
                    } else {
                        LAMP2_TAGS.to_vec()
                    };
                    let (acc, f1) = classification_metrics(&preds, &targets, &labels)?;
                    metrics.insert(format!("{t}/accuracy"), acc);
                    metrics.insert(format!("{t}/f1"), f1);
                }
                Task::Lamp3 => {
                    let preds: Vec<f64> = rows
                        .iter()
                        .map(|(_, r)| rating_or_midpoint(&r.prediction))
                        .collect();
                    let targets: Vec<f64> = rows
                        .iter()
                        .map(|(s, _)| {
                            s.target.trim().parse::<f64>().map_err(|_| {
                                Error::contract(format!(
                                    "sample `{}` has a non-numeric rating target",
                                    s.id
                                ))
                            })
                        })
                        .collect::<Result<_>>()?;
                    let (mae, rmse) = regression_metrics(&preds, &targets)?;
                    metrics.insert(format!("{t}/mae"), mae);
                    metrics.insert(format!("{t}/rmse"), rmse);
                }
                _ => {
                    let k = rows.len() as f64;
                    let r1 = rows
                        .iter()
                        .map(|(s, r)| rouge1(&r.prediction, &s.target).f1)
                        .sum::<f64>()
                        / k;
                    let rl = rows
                        .iter()
                        .map(|(s, r)| rouge_l(&r.prediction, &s.target).f1)
                        .sum::<f64>()
                        / k;
                    metrics.insert(format!("{t}/rouge1"), r1);
                    metrics.insert(format!("{t}/rougeL"), rl);
                }
            }
        }
        Ok(VariantReport {
            name: name.to_string(),
            m,
            alpha,
            mean_score,
            metrics,
            evidence_hit_rate,
            samples: results.len(),
        })
    }

    /// Top-1 agreement with the planted evidence for trained and untrained
    /// scorers, over the candidate sets each scorer is trained on: the
    /// retriever ranks the semantically selected `m x k` candidates, the
    /// reranker ranks the trained retriever's candidates. Queries whose
    /// candidate set misses the evidence are skipped and counted apart.
    fn distillation_report(
        &self,
        index: &UserIndex,
        retriever: &RetrieverParams,
        reranker: &RerankerParams,
        test: &[usize],
        gold: &BTreeMap<String, Vec<String>>,
    ) -> Result<DistillationReport> {
        let untrained_ret = RetrieverParams::new(
            self.cfg.dim,
            retriever.alpha,
            self.cfg.seed.wrapping_add(RETRIEVER_SEED),
        )?;
        let untrained_rr =
            RerankerParams::new(self.cfg.dim, self.cfg.seed.wrapping_add(RERANKER_SEED))?;
        let mut ret = TopOneTally::default();
        let mut rr = TopOneTally::default();
        for &i in test {
            let sample = &self.dataset.samples[i];
            let Some(gold_ids) = gold.get(&sample.id).filter(|g| !g.is_empty()) else {
                continue;
            };
            let is_gold = |id: &str| gold_ids.iter().any(|g| g == id);
            let user_emb = user_embedding(index, &sample.user_id)?;
            let q = &self.query_embeddings[i];

            let cands = self.candidates(index, retriever, i, self.cfg.m, Ranking::Base)?;
            let ids: Vec<&str> = cands.iter().map(|c| c.doc_id.as_str()).collect();
            if ids.iter().any(|id| is_gold(id)) {
                let embs: Vec<&[f64]> = cands
                    .iter()
                    .map(|c| Ok(self.doc_embeddings[self.user(&c.owner)?][c.position].as_slice()))
                    .collect::<Result<_>>()?;
                let trained: Vec<f64> = retriever
                    .score(q, user_emb, &embs)?
                    .iter()
                    .map(|s| s.2)
                    .collect();
                let base: Vec<f64> = untrained_ret
                    .score(q, user_emb, &embs)?
                    .iter()
                    .map(|s| s.2)
                    .collect();
                ret.add(&trained, &base, &ids, is_gold);
            } else {
                ret.missed += 1;
            }

            let cands = self.candidates(index, retriever, i, self.cfg.m, Ranking::Personalized)?;
            let docs: Vec<&Document> = cands
                .iter()
                .map(|c| self.document(c))
                .collect::<Result<_>>()?;
            let ids: Vec<&str> = docs.iter().map(|d| d.id.as_str()).collect();
            if ids.iter().any(|id| is_gold(id)) {
                let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
                let features = self.featurizer.features_batch(&sample.query, &texts)?;
                let trained = reranker.scores(&features, user_emb)?;
                let base = untrained_rr.scores(&features, user_emb)?;
                rr.add(&trained, &base, &ids, is_gold);
            } else {
                rr.missed += 1;
            }
        }
        Ok(DistillationReport {
            retriever_queries: ret.queries,
            retriever_missed: ret.missed,
            retriever_top1_trained: ret.rate(ret.trained),
            retriever_top1_untrained: ret.rate(ret.untrained),
            retriever_chance: ret.rate(ret.chance),
            reranker_queries: rr.queries,
            reranker_missed: rr.missed,
            reranker_top1_trained: rr.rate(rr.trained),
            reranker_top1_untrained: rr.rate(rr.untrained),
            reranker_chance: rr.rate(rr.chance),
        })
    }
}

#[derive(Default)]
struct TopOneTally {
    queries: usize,
    missed: usize,
    trained: f64,
    untrained: f64,
    chance: f64,
}

impl TopOneTally {
    fn add(
        &mut self,
        trained: &[f64],
        untrained: &[f64],
        ids: &[&str],
        is_gold: impl Fn(&str) -> bool,
    ) {
        let top1 = |scores: &[f64]| {
            top_k_by_score(scores, |j| ids[j], 1)
                .first()
                .is_some_and(|(j, _)| is_gold(ids[*j]))
        };
        self.queries += 1;
        self.trained += f64::from(u8::from(top1(trained)));
        self.untrained += f64::from(u8::from(top1(untrained)));
        self.chance += 1.0 / ids.len() as f64;
    }

    fn rate(&self, total: f64) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            total / self.queries as f64
        }
    }
}

fn user_embedding<'a>(index: &'a UserIndex, user_id: &str) -> Result<&'a [f64]> {
    index.embedding(user_id).ok_or_else(|| Error::Lookup {
        kind: "user",
        key: user_id.to_string(),
    })
}

fn read_losses(dir: &Path) -> Result<LossTraces> {
    let path = dir.join(LOSSES_FILE);
    if !path.exists() {
        return Ok(LossTraces::default());
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn record_losses(dir: &Path, update: impl FnOnce(&mut LossTraces)) -> Result<()> {
    let mut losses = read_losses(dir)?;
    update(&mut losses);
    std::fs::write(
        dir.join(LOSSES_FILE),
        serde_json::to_string_pretty(&losses)?,
    )?;
    Ok(())
}

/// All three training stages in order.
pub fn run_train(cfg: &PipelineConfig) -> Result<LossTraces> {
    let ws = Workspace::open(cfg)?;
    let user = ws.train_user()?;
    let retriever = ws.train_retriever()?;
    let reranker = ws.train_reranker()?;
    Ok(LossTraces {
        user,
        retriever,
        reranker,
    })
}

/// Evaluates trained artifacts and writes the report files into `out_dir`.
pub fn run_eval(cfg: &PipelineConfig) -> Result<RunReport> {
    let ws = Workspace::open(cfg)?;
    let report = ws.evaluate()?;
    emit_report(&report, &cfg.out_dir)?;
    Ok(report)
}

/// Training followed by evaluation. In grid-search mode every grid point
/// runs in its own subdirectory and the reports come back in grid order.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<RunReport>> {
    let points = if cfg.grid_search {
        cfg.grid_points()
    } else {
        vec![cfg.clone()]
    };
    let mut reports = Vec::with_capacity(points.len());
    for p in &points {
        run_train(p)?;
        reports.push(run_eval(p)?);
    }
    Ok(reports)
}
