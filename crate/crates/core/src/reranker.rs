//! Second-stage reranking of the pooled candidates.
//!
//! A cross-featurizer turns each (query, document) pair into a feature
//! vector `h`; the score is `MLP3([h, MLP2(e_u)])` for the querying user's
//! embedding `e_u`.

use std::collections::HashSet;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, RERANKER_MAGIC};
use crate::corpus::{hash_embed_tokens, EMBED_TOKEN_ENV};
use crate::distribution::{distill, kl_divergence, kl_loss, softmax, DistillConfig};
use crate::error::{Error, Result};
use crate::http::{token_from_env, HttpClient};
use crate::nn::{seeded, Mlp};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::text::tokenize;

/// Joint encoder of a (query, document) pair.
pub trait CrossFeaturizer: Send + Sync {
    fn id(&self) -> String;

    fn dim(&self) -> usize;

    fn features(&self, query: &str, document: &str) -> Result<Vec<f64>>;

    fn features_batch(&self, query: &str, documents: &[&str]) -> Result<Vec<Vec<f64>>> {
        documents.iter().map(|d| self.features(query, d)).collect()
    }
}

/// Deterministic stand-in for a cross-encoder: the hash embedding of the
/// document tokens plus one [`MATCH_TOKEN`] per document token that also
/// occurs in the query. Query-document overlap thus lands in one fixed
/// coordinate, the way a real cross-encoder exposes term matches.
/// Pseudo-token marking a query match. It contains characters the
/// tokenizer never emits, so no real word shares its bucket by identity.
pub const MATCH_TOKEN: &str = "<match>";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MockCrossFeaturizer {
    pub dim: usize,
}

impl MockCrossFeaturizer {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("featurizer dimension must be positive"));
        }
        Ok(MockCrossFeaturizer { dim })
    }
}

impl CrossFeaturizer for MockCrossFeaturizer {
    fn id(&self) -> String {
        format!("mock-cross:{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, query: &str, document: &str) -> Result<Vec<f64>> {
        if query.is_empty() || document.is_empty() {
            return Err(Error::contract(
                "cross features need nonempty query and document",
            ));
        }
        let query: HashSet<String> = tokenize(query).into_iter().collect();
        let doc = tokenize(document);
        let matches = doc.iter().filter(|t| query.contains(*t)).count();
        Ok(hash_embed_tokens(
            doc.iter()
                .map(String::as_str)
                .chain(std::iter::repeat_n(MATCH_TOKEN, matches)),
            self.dim,
        ))
    }
}

#[derive(Serialize)]
struct Pair<'a> {
    query: &'a str,
    document: &'a str,
}

#[derive(Serialize)]
struct CrossRequest<'a> {
    pairs: Vec<Pair<'a>>,
}

#[derive(Deserialize)]
struct CrossResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for an HTTP cross-encoder: `POST {"pairs": [{"query", "document"}]}`
/// answered by `{"vectors": [[...], ...]}`, one vector per pair.
#[derive(Clone, Debug)]
pub struct RemoteCrossEncoder {
    pub url: String,
    pub dim: usize,
    token: Option<String>,
    client: HttpClient,
}

impl RemoteCrossEncoder {
    /// The bearer token defaults to `CFRAG_EMBED_TOKEN`.
    pub fn new(url: impl Into<String>, dim: usize, timeout: Duration, max_retries: u32) -> Self {
        RemoteCrossEncoder {
            url: url.into(),
            dim,
            token: token_from_env(EMBED_TOKEN_ENV),
            client: HttpClient::new(timeout, max_retries),
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn with_client(mut self, client: HttpClient) -> Self {
        self.client = client;
        self
    }
}

impl CrossFeaturizer for RemoteCrossEncoder {
    fn id(&self) -> String {
        format!("remote-cross:{}", self.url)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, query: &str, document: &str) -> Result<Vec<f64>> {
        Ok(self.features_batch(query, &[document])?.remove(0))
    }

    fn features_batch(&self, query: &str, documents: &[&str]) -> Result<Vec<Vec<f64>>> {
        let req = CrossRequest {
            pairs: documents
                .iter()
                .map(|document| Pair { query, document })
                .collect(),
        };
        let resp: CrossResponse = self
            .client
            .post_json(&self.url, self.token.as_deref(), &req)?;
        if resp.vectors.len() != documents.len() {
            return Err(Error::Transport {
                attempts: 1,
                message: format!(
                    "asked for {} vectors, got {}",
                    documents.len(),
                    resp.vectors.len()
                ),
            });
        }
        for v in &resp.vectors {
            if v.len() != self.dim {
                return Err(Error::dim(format!(
                    "cross-encoder returned {} values, expected {}",
                    v.len(),
                    self.dim
                )));
            }
        }
        Ok(resp.vectors)
    }
}

#[derive(Clone, Debug)]
pub struct RerankerParams {
    pub dim: usize,
    pub seed: u64,
    pub store: ParamStore,
    mlp2: Mlp,
    mlp3: Mlp,
}

impl RerankerParams {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("reranker dimension must be positive"));
        }
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let mlp2 = Mlp::new(&mut store, "reranker.mlp2", dim, dim, dim, &mut rng);
        let mlp3 = Mlp::scorer(&mut store, "reranker.mlp3", 2 * dim, 2 * dim, 1, &mut rng);
        Ok(RerankerParams {
            dim,
            seed,
            store,
            mlp2,
            mlp3,
        })
    }

    pub fn mlp2(&self) -> Mlp {
        self.mlp2
    }

    pub fn mlp3(&self) -> Mlp {
        self.mlp3
    }

    /// Scores for each feature row, as an `n x 1` block.
    pub fn score_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &[Vec<f64>],
        user: &[f64],
    ) -> Result<Var> {
        let d = self.dim;
        if features.is_empty() {
            return Err(Error::contract("no candidates to rerank"));
        }
        if user.len() != d {
            return Err(Error::dim(format!(
                "user embedding has {} dims, expected {d}",
                user.len()
            )));
        }
        if let Some(h) = features.iter().find(|h| h.len() != d) {
            return Err(Error::dim(format!(
                "cross features have {} dims, expected {d}",
                h.len()
            )));
        }
        let h = g.constant(&Tensor::matrix(features.len(), d, features.concat())?)?;
        let u = g.constant_row(user);
        let u = self.mlp2.forward(g, store, u)?;
        let repeated = if features.len() == 1 {
            u
        } else {
            g.concat_rows(&vec![u; features.len()])?
        };
        let joined = g.concat_cols(&[h, repeated])?;
        self.mlp3.forward(g, store, joined)
    }

    pub fn scores(&self, features: &[Vec<f64>], user: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let s = self.score_graph(&mut g, &self.store, features, user)?;
        Ok(g.value(s).to_vec())
    }

    pub fn rerank_score(&self, features: &[f64], user: &[f64]) -> Result<f64> {
        Ok(self.scores(&[features.to_vec()], user)?[0])
    }

    /// Indices of the `k` best candidates with their scores, best first,
    /// ties by ascending document id.
    pub fn rerank_topk(
        &self,
        featurizer: &dyn CrossFeaturizer,
        query: &str,
        docs: &[(&str, &str)],
        user: &[f64],
        k: usize,
    ) -> Result<Vec<(usize, f64)>> {
        if docs.is_empty() {
            return Err(Error::contract("no candidates to rerank"));
        }
        let texts: Vec<&str> = docs.iter().map(|(_, t)| *t).collect();
        let features = featurizer.features_batch(query, &texts)?;
        let scores = self.scores(&features, user)?;
        Ok(top_k_by_score(&scores, |i| docs[i].0, k))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({"seed": self.seed});
        checkpoint::save(path, RERANKER_MAGIC, self.dim, &meta, &self.store)
    }

    pub fn load(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let path = path.as_ref();
        let ck = checkpoint::load(path, RERANKER_MAGIC)?;
        checkpoint::expect_dim(&ck, dim, path)?;
        let mut params = RerankerParams::new(dim, ck.meta["seed"].as_u64().unwrap_or(0))?;
        params
            .store
            .load_map(&ck.params)
            .map_err(|e| Error::Checkpoint {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        Ok(params)
    }
}

/// Sorts indices by descending score, ties by ascending id, keeping `k`.
pub fn top_k_by_score<'a>(
    scores: &[f64],
    id_of: impl Fn(usize) -> &'a str,
    k: usize,
) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| id_of(a).cmp(id_of(b)))
    });
    order.truncate(k);
    order.into_iter().map(|i| (i, scores[i])).collect()
}

pub fn reranker_distribution(scores: &[f64]) -> Result<Vec<f64>> {
    softmax(scores)
}

/// `KL(p_reranker || p_llm)`.
pub fn reranker_loss(p_reranker: &[f64], p_llm: &[f64]) -> Result<f64> {
    kl_divergence(p_reranker, p_llm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RerankerExample {
    pub sample_id: String,
    pub user: Vec<f64>,
    pub features: Vec<Vec<f64>>,
    pub target: Vec<f64>,
}

pub fn reranker_example_loss(
    params: &RerankerParams,
    g: &mut Graph,
    store: &ParamStore,
    ex: &RerankerExample,
) -> Result<Var> {
    let s = params.score_graph(g, store, &ex.features, &ex.user)?;
    kl_loss(g, s, &ex.target)
}

pub fn train_reranker(
    params: &mut RerankerParams,
    examples: &[RerankerExample],
    cfg: &DistillConfig,
) -> Result<Vec<f64>> {
    let frozen = params.clone();
    distill(
        "reranker",
        &mut params.store,
        examples.len(),
        cfg,
        |g, store, i| {
            reranker_example_loss(&frozen, g, store, &examples[i]).map_err(|e| match e {
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

    #[test]
    fn mock_features_unit_and_asymmetric() {
        let f = MockCrossFeaturizer::new(16).unwrap();
        let a = f
            .features("graph neural networks", "spectral methods on graphs")
            .unwrap();
        let b = f
            .features("spectral methods on graphs", "graph neural networks")
            .unwrap();
        assert_eq!(
            a,
            f.features("graph neural networks", "spectral methods on graphs")
                .unwrap()
        );
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
        assert_ne!(a, b);
    }

    #[test]
    fn mock_features_count_query_matches() {
        let f = MockCrossFeaturizer::new(32).unwrap();
        let doc = "alpha beta gamma";
        let none = f.features("delta", doc).unwrap();
        let two = f.features("alpha gamma", doc).unwrap();
        let expected = hash_embed_tokens(["alpha", "beta", "gamma", MATCH_TOKEN, MATCH_TOKEN], 32);
        assert_eq!(two, expected);
        assert_eq!(none, hash_embed_tokens(["alpha", "beta", "gamma"], 32));
    }

    #[test]
    fn zeroed_output_layer_scores_zero() {
        let mut r = RerankerParams::new(4, 1).unwrap();
        let out = r.mlp3().out.weight;
        r.store
            .get_mut(out)
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let s = r
            .scores(
                &[vec![0.1, 0.2, 0.3, 0.4], vec![1.0, 0.0, 0.0, 0.0]],
                &[0.5, -0.5, 0.2, 0.0],
            )
            .unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
    }

    #[test]
    fn topk_ties_by_id() {
        let ids = ["c", "a", "b"];
        let got = top_k_by_score(&[0.5, 0.5, 0.9], |i| ids[i], 5);
        assert_eq!(
            got.iter().map(|(i, _)| *i).collect::<Vec<_>>(),
            vec![2, 1, 0]
        );
        assert_eq!(top_k_by_score(&[0.5, 0.5, 0.9], |i| ids[i], 1).len(), 1);
    }

    #[test]
    fn kl_gradient_check() {
        let mut rng = seeded(2);
        let r = RerankerParams::new(4, 3).unwrap();
        let ex = RerankerExample {
            sample_id: "s".into(),
            user: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            features: (0..3)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
            target: vec![0.6, 0.3, 0.1],
        };
        let err = finite_diff_check(|g, s| reranker_example_loss(&r, g, s, &ex), &r.store, 1e-5);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let r = RerankerParams::new(4, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rr.ckpt");
        r.save(&path).unwrap();
        assert_eq!(
            RerankerParams::load(&path, 4).unwrap().store.to_map(),
            r.store.to_map()
        );
        assert!(RerankerParams::load(&path, 5).is_err());
    }
}
