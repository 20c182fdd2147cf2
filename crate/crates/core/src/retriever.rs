//! Personalized first-stage retrieval.
//!
//! A document's score blends semantic relevance `cos(q Wq, d Wd)` with user
//! preference `cos(MLP1(e_u), d Wd)` as `(1 - alpha) S_qd + alpha S_ud`.
//! `Wq` and `Wd` start at the identity, so an untrained retriever ranks by
//! plain cosine over the frozen base embeddings.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, RETRIEVER_MAGIC};
use crate::distribution::{distill, kl_divergence, kl_loss, softmax, DistillConfig};
use crate::error::{Error, Result};
use crate::nn::{seeded, Mlp};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct RetrieverParams {
    pub dim: usize,
    pub alpha: f64,
    pub seed: u64,
    pub store: ParamStore,
    wq: ParamId,
    wd: ParamId,
    mlp1: Mlp,
}

/// One scored document from one user's history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub owner: String,
    pub doc_id: String,
    /// Index of the document in its owner's history.
    pub position: usize,
    pub s_qd: f64,
    pub s_ud: f64,
    pub s_uqd: f64,
}

/// A user's history as seen by the retriever.
#[derive(Clone, Copy, Debug)]
pub struct UserPool<'a> {
    pub user_id: &'a str,
    pub doc_ids: &'a [String],
    pub embeddings: &'a [Vec<f64>],
}

/// Which score orders the per-user top-k.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ranking {
    /// Cosine over the frozen base embeddings, ignoring trained weights.
    Base,
    /// The blended score under the current weights.
    Personalized,
}

impl Ranking {
    fn key(self, c: &ScoredCandidate) -> f64 {
        match self {
            Ranking::Base => c.s_qd,
            Ranking::Personalized => c.s_uqd,
        }
    }
}

pub struct ScoreVars {
    pub semantic: Var,
    pub preference: Var,
    pub combined: Var,
}

pub fn combined_score(alpha: f64, s_qd: f64, s_ud: f64) -> f64 {
    (1.0 - alpha) * s_qd + alpha * s_ud
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    Ok(())
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine of a zero vector".into()));
    }
    Ok(dot / (na * nb))
}

impl RetrieverParams {
    pub fn new(dim: usize, alpha: f64, seed: u64) -> Result<Self> {
        check_alpha(alpha)?;
        if dim == 0 {
            return Err(Error::config("retriever dimension must be positive"));
        }
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let wq = store.add("retriever.wq", Tensor::identity(dim));
        let wd = store.add("retriever.wd", Tensor::identity(dim));
        let mlp1 = Mlp::new(&mut store, "retriever.mlp1", dim, dim, dim, &mut rng);
        Ok(RetrieverParams {
            dim,
            alpha,
            seed,
            store,
            wq,
            wd,
            mlp1,
        })
    }

    /// Copy with a different blend weight; weights are shared unchanged.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(RetrieverParams {
            alpha,
            ..self.clone()
        })
    }

    pub fn mlp1(&self) -> Mlp {
        self.mlp1
    }

    fn check_dim(&self, v: &[f64], what: &str) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::dim(format!(
                "{what} has {} dims, expected {}",
                v.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Scores `docs` for one query and user. All three outputs are `n x 1`.
    pub fn score_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: &[f64],
        user: &[f64],
        docs: &[&[f64]],
    ) -> Result<ScoreVars> {
        self.check_dim(query, "query embedding")?;
        self.check_dim(user, "user embedding")?;
        if docs.is_empty() {
            return Err(Error::contract("no documents to score"));
        }
        let mut flat = Vec::with_capacity(docs.len() * self.dim);
        for d in docs {
            self.check_dim(d, "document embedding")?;
            flat.extend_from_slice(d);
        }
        let wq = g.param(store, self.wq);
        let wd = g.param(store, self.wd);
        let q = g.constant_row(query);
        let q = g.matmul(q, wq)?;
        let q = g.normalize_rows(q)?;
        let d = g.constant(&Tensor::matrix(docs.len(), self.dim, flat)?)?;
        let d = g.matmul(d, wd)?;
        let d = g.normalize_rows(d)?;
        let u = g.constant_row(user);
        let u = self.mlp1.forward(g, store, u)?;
        let u = g.normalize_rows(u)?;

        let qt = g.transpose(q)?;
        let semantic = g.matmul(d, qt)?;
        let ut = g.transpose(u)?;
        let preference = g.matmul(d, ut)?;
        let a = g.scale(semantic, 1.0 - self.alpha)?;
        let b = g.scale(preference, self.alpha)?;
        let combined = g.add(a, b)?;
        Ok(ScoreVars {
            semantic,
            preference,
            combined,
        })
    }

    /// `(S_qd, S_ud, S_uqd)` for each document.
    pub fn score(
        &self,
        query: &[f64],
        user: &[f64],
        docs: &[&[f64]],
    ) -> Result<Vec<(f64, f64, f64)>> {
        let mut g = Graph::new();
        let s = self.score_graph(&mut g, &self.store, query, user, docs)?;
        Ok(g.value(s.semantic)
            .iter()
            .zip(g.value(s.preference))
            .zip(g.value(s.combined))
            .map(|((a, b), c)| (*a, *b, *c))
            .collect())
    }

    pub fn semantic_score(&self, query: &[f64], doc: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let wq = g.param(&self.store, self.wq);
        let wd = g.param(&self.store, self.wd);
        self.check_dim(query, "query embedding")?;
        self.check_dim(doc, "document embedding")?;
        let q = g.constant_row(query);
        let q = g.matmul(q, wq)?;
        let d = g.constant_row(doc);
        let d = g.matmul(d, wd)?;
        let s = g.cosine_rows(q, d)?;
        g.scalar(s)
    }

    pub fn preference_score(&self, user: &[f64], doc: &[f64]) -> Result<f64> {
        self.check_dim(user, "user embedding")?;
        self.check_dim(doc, "document embedding")?;
        let mut g = Graph::new();
        let wd = g.param(&self.store, self.wd);
        let u = g.constant_row(user);
        let u = self.mlp1.forward(&mut g, &self.store, u)?;
        let d = g.constant_row(doc);
        let d = g.matmul(d, wd)?;
        let s = g.cosine_rows(u, d)?;
        g.scalar(s)
    }

    /// Top-k documents from each pool, then deduplicated by document id
    /// keeping the best-scoring instance. Within a pool, ties go to the
    /// smaller document id. Candidates come back grouped by pool in input
    /// order, best first within each pool.
    pub fn retrieve_topk_per_user(
        &self,
        query: &[f64],
        user: &[f64],
        pools: &[UserPool<'_>],
        k: usize,
        ranking: Ranking,
    ) -> Result<Vec<ScoredCandidate>> {
        if pools.is_empty() {
            return Err(Error::contract("retrieval needs at least one user"));
        }
        if k == 0 {
            return Err(Error::contract("k must be at least 1"));
        }
        let mut all = Vec::new();
        for pool in pools {
            if pool.embeddings.is_empty() || pool.doc_ids.len() != pool.embeddings.len() {
                return Err(Error::contract(format!(
                    "user `{}` has {} document ids for {} embeddings",
                    pool.user_id,
                    pool.doc_ids.len(),
                    pool.embeddings.len()
                )));
            }
            let docs: Vec<&[f64]> = pool.embeddings.iter().map(Vec::as_slice).collect();
            let scores = self.score(query, user, &docs)?;
            let mut scored: Vec<ScoredCandidate> = scores
                .into_iter()
                .enumerate()
                .map(|(i, (s_qd, s_ud, s_uqd))| {
                    let (s_qd, s_uqd) = match ranking {
                        Ranking::Personalized => (s_qd, s_uqd),
                        Ranking::Base => {
                            let base = cosine(query, docs[i])?;
                            (base, combined_score(self.alpha, base, s_ud))
                        }
                    };
                    Ok(ScoredCandidate {
                        owner: pool.user_id.to_string(),
                        doc_id: pool.doc_ids[i].clone(),
                        position: i,
                        s_qd,
                        s_ud,
                        s_uqd,
                    })
                })
                .collect::<Result<_>>()?;
            scored.sort_by(|a, b| {
                ranking
                    .key(b)
                    .total_cmp(&ranking.key(a))
                    .then_with(|| a.doc_id.cmp(&b.doc_id))
            });
            scored.truncate(k);
            all.push(scored);
        }
        Ok(dedup_keep_best(all, ranking))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({"alpha": self.alpha, "seed": self.seed});
        checkpoint::save(path, RETRIEVER_MAGIC, self.dim, &meta, &self.store)
    }

    /// Loads a checkpoint, rejecting one trained at a different dimension.
    pub fn load(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let path = path.as_ref();
        let ck = checkpoint::load(path, RETRIEVER_MAGIC)?;
        checkpoint::expect_dim(&ck, dim, path)?;
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let alpha = ck.meta["alpha"]
            .as_f64()
            .ok_or_else(|| bad("missing alpha".into()))?;
        let seed = ck.meta["seed"].as_u64().unwrap_or(0);
        let mut params = RetrieverParams::new(dim, alpha, seed)?;
        params
            .store
            .load_map(&ck.params)
            .map_err(|e| bad(e.to_string()))?;
        Ok(params)
    }
}

fn dedup_keep_best(groups: Vec<Vec<ScoredCandidate>>, ranking: Ranking) -> Vec<ScoredCandidate> {
    let mut best: HashMap<&str, (usize, usize, f64)> = HashMap::new();
    for (gi, group) in groups.iter().enumerate() {
        for (ci, c) in group.iter().enumerate() {
            let s = ranking.key(c);
            match best.get(c.doc_id.as_str()) {
                Some(&(_, _, prev)) if prev >= s => {}
                _ => {
                    best.insert(c.doc_id.as_str(), (gi, ci, s));
                }
            }
        }
    }
    let keep: std::collections::HashSet<(usize, usize)> =
        best.values().map(|&(g, c, _)| (g, c)).collect();
    groups
        .iter()
        .enumerate()
        .flat_map(|(gi, group)| {
            group
                .iter()
                .enumerate()
                .filter(|(ci, _)| keep.contains(&(gi, *ci)))
                .map(|(_, c)| c.clone())
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Softmax over the blended scores of all candidates.
pub fn retriever_distribution(candidates: &[ScoredCandidate]) -> Result<Vec<f64>> {
    softmax(&candidates.iter().map(|c| c.s_uqd).collect::<Vec<_>>())
}

/// `KL(p_retriever || p_llm)`.
pub fn retriever_loss(p_retriever: &[f64], p_llm: &[f64]) -> Result<f64> {
    kl_divergence(p_retriever, p_llm)
}

/// One training query: the querying user's embedding, the candidate
/// documents and the feedback distribution over them.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrieverExample {
    pub sample_id: String,
    pub query: Vec<f64>,
    pub user: Vec<f64>,
    pub docs: Vec<Vec<f64>>,
    pub target: Vec<f64>,
}

/// KL loss of one example on the graph.
pub fn retriever_example_loss(
    params: &RetrieverParams,
    g: &mut Graph,
    store: &ParamStore,
    ex: &RetrieverExample,
) -> Result<Var> {
    let docs: Vec<&[f64]> = ex.docs.iter().map(Vec::as_slice).collect();
    let s = params.score_graph(g, store, &ex.query, &ex.user, &docs)?;
    kl_loss(g, s.combined, &ex.target)
}

/// Distills the feedback distributions into the retriever weights. Returns
/// the per-step loss trace.
pub fn train_retriever(
    params: &mut RetrieverParams,
    examples: &[RetrieverExample],
    cfg: &DistillConfig,
) -> Result<Vec<f64>> {
    let frozen = params.clone();
    distill(
        "retriever",
        &mut params.store,
        examples.len(),
        cfg,
        |g, store, i| {
            retriever_example_loss(&frozen, g, store, &examples[i]).map_err(|e| match e {
                Error::Numeric(m) | Error::Contract(m) | Error::Dimension(m) => {
                    Error::contract(format!("sample `{}`: {m}", examples[i].sample_id))
                }
                other => other,
            })
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::Rng;

    fn rand_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_projection_cases() {
        let r = RetrieverParams::new(3, 0.5, 0).unwrap();
        assert!(
            (r.semantic_score(&[1.0, 2.0, 0.0], &[1.0, 2.0, 0.0])
                .unwrap()
                - 1.0)
                .abs()
                < 1e-12
        );
        assert!(
            r.semantic_score(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0])
                .unwrap()
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn combined_extremes() {
        assert_eq!(combined_score(0.0, 0.3, -0.4), 0.3);
        assert_eq!(combined_score(1.0, 0.3, -0.4), -0.4);
        assert!(RetrieverParams::new(3, 1.5, 0).is_err());
    }

    #[test]
    fn batch_scores_match_single() {
        let mut rng = seeded(1);
        let r = RetrieverParams::new(4, 0.3, 2).unwrap();
        let q = rand_vec(&mut rng, 4);
        let u = rand_vec(&mut rng, 4);
        let docs: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 4)).collect();
        let refs: Vec<&[f64]> = docs.iter().map(Vec::as_slice).collect();
        for (d, (a, b, c)) in docs.iter().zip(r.score(&q, &u, &refs).unwrap()) {
            assert!((a - r.semantic_score(&q, d).unwrap()).abs() < 1e-12);
            assert!((b - r.preference_score(&u, d).unwrap()).abs() < 1e-12);
            assert!((c - combined_score(0.3, a, b)).abs() < 1e-12);
        }
    }

    #[test]
    fn exhausted_history_and_dedup() {
        let r = RetrieverParams::new(2, 0.0, 0).unwrap();
        let ids: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let emb = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let pool = UserPool {
            user_id: "u",
            doc_ids: &ids,
            embeddings: &emb,
        };
        let out = r
            .retrieve_topk_per_user(&[1.0, 0.0], &[1.0, 0.0], &[pool], 5, Ranking::Personalized)
            .unwrap();
        let got: Vec<&str> = out.iter().map(|c| c.doc_id.as_str()).collect();
        assert_eq!(got, vec!["a", "c", "b"]);
        let twice = r
            .retrieve_topk_per_user(
                &[1.0, 0.0],
                &[1.0, 0.0],
                &[pool, pool],
                5,
                Ranking::Personalized,
            )
            .unwrap();
        assert_eq!(twice.len(), 3);
        assert!(r
            .retrieve_topk_per_user(&[1.0, 0.0], &[1.0, 0.0], &[], 5, Ranking::Base)
            .is_err());
    }

    #[test]
    fn kl_gradient_check() {
        let mut rng = seeded(3);
        let r = RetrieverParams::new(4, 0.4, 5).unwrap();
        let ex = RetrieverExample {
            sample_id: "s".into(),
            query: rand_vec(&mut rng, 4),
            user: rand_vec(&mut rng, 4),
            docs: (0..3).map(|_| rand_vec(&mut rng, 4)).collect(),
            target: vec![0.2, 0.5, 0.3],
        };
        let err = finite_diff_check(|g, s| retriever_example_loss(&r, g, s, &ex), &r.store, 1e-5);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn checkpoint_round_trip_and_dim_check() {
        let r = RetrieverParams::new(4, 0.25, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ret.ckpt");
        r.save(&path).unwrap();
        let back = RetrieverParams::load(&path, 4).unwrap();
        assert_eq!(back.alpha, 0.25);
        assert_eq!(back.store.to_map(), r.store.to_map());
        assert!(matches!(
            RetrieverParams::load(&path, 8),
            Err(Error::Checkpoint { .. })
        ));
    }
}
