use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::cache::{read_embedding_cache, EmbeddingCache};
use super::Document;
use crate::error::{Error, Result};
use crate::http::{token_from_env, HttpClient};
use crate::text::{fnv1a64, tokenize};

pub const EMBED_TOKEN_ENV: &str = "CFRAG_EMBED_TOKEN";

/// Source of frozen base embeddings. Implementations are pure: the same
/// input always yields the same vector.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier, used in cache keys.
    fn id(&self) -> String;

    fn dim(&self) -> usize;

    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;

    fn embed_document(&self, doc: &Document) -> Result<Vec<f64>> {
        self.embed_text(&doc.text)
    }
}

/// Embeds one document, enforcing the provider contract.
pub fn embed_document(provider: &dyn EmbeddingProvider, doc: &Document) -> Result<Vec<f64>> {
    if doc.text.is_empty() {
        return Err(Error::contract(format!(
            "document `{}` has empty text",
            doc.id
        )));
    }
    let v = provider.embed_document(doc)?;
    if v.len() != provider.dim() {
        return Err(Error::dim(format!(
            "provider {} returned {} values for `{}`, expected {}",
            provider.id(),
            v.len(),
            doc.id,
            provider.dim()
        )));
    }
    Ok(v)
}

/// Signed feature hashing: every token adds ±1 to one of `dim` buckets,
/// then the sum is L2-normalized. Texts without tokens (or whose tokens
/// cancel exactly) map to the first basis vector.
pub fn hash_embed(text: &str, dim: usize) -> Vec<f64> {
    hash_embed_tokens(tokenize(text), dim)
}

/// [`hash_embed`] over an already tokenized text.
pub fn hash_embed_tokens<S: AsRef<str>>(
    tokens: impl IntoIterator<Item = S>,
    dim: usize,
) -> Vec<f64> {
    assert!(dim > 0, "embedding dimension must be positive");
    let mut v = vec![0.0; dim];
    for tok in tokens {
        let h = fnv1a64(tok.as_ref().as_bytes());
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        Ok(HashEmbedder { dim })
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn id(&self) -> String {
        format!("hash-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(hash_embed(text, self.dim))
    }
}

/// Vectors loaded from an embedding cache file. Documents are looked up by
/// id first, then by text; free text is looked up by its exact string.
#[derive(Clone, Debug)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    source: String,
    vectors: HashMap<String, Vec<f64>>,
}

impl PrecomputedEmbeddings {
    pub fn from_cache(cache: EmbeddingCache, source: impl Into<String>) -> Self {
        let vectors = cache
            .entries
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().map(f64::from).collect()))
            .collect();
        PrecomputedEmbeddings {
            dim: cache.dim,
            source: source.into(),
            vectors,
        }
    }

    pub fn open(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Self> {
        let path = path.as_ref();
        let cache = read_embedding_cache(path, expected_dim)?;
        Ok(Self::from_cache(cache, path.display().to_string()))
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl EmbeddingProvider for PrecomputedEmbeddings {
    fn id(&self) -> String {
        format!("file:{}", self.source)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.vectors
            .get(text)
            .cloned()
            .ok_or_else(|| Error::Lookup {
                kind: "embedding",
                key: text.to_string(),
            })
    }

    fn embed_document(&self, doc: &Document) -> Result<Vec<f64>> {
        self.vectors
            .get(&doc.id)
            .or_else(|| self.vectors.get(&doc.text))
            .cloned()
            .ok_or_else(|| Error::Lookup {
                kind: "embedding",
                key: doc.id.clone(),
            })
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for an HTTP embedding service: `POST {"texts": [...]}` answered
/// by `{"vectors": [[...], ...]}`. Returned vectors are re-normalized.
#[derive(Clone, Debug)]
pub struct RemoteEmbedder {
    pub url: String,
    pub dim: usize,
    token: Option<String>,
    client: HttpClient,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, dim: usize, timeout: Duration, max_retries: u32) -> Self {
        RemoteEmbedder {
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

    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let resp: EmbedResponse =
            self.client
                .post_json(&self.url, self.token.as_deref(), &EmbedRequest { texts })?;
        if resp.vectors.len() != texts.len() {
            return Err(Error::Transport {
                attempts: 1,
                message: format!(
                    "asked for {} vectors, got {}",
                    texts.len(),
                    resp.vectors.len()
                ),
            });
        }
        resp.vectors
            .into_iter()
            .map(|mut v| {
                if v.len() != self.dim {
                    return Err(Error::dim(format!(
                        "remote vector has {} values, expected {}",
                        v.len(),
                        self.dim
                    )));
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n == 0.0 || !n.is_finite() {
                    return Err(Error::Numeric("remote embedding with zero norm".into()));
                }
                v.iter_mut().for_each(|x| *x /= n);
                Ok(v)
            })
            .collect()
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote:{}", self.url)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }
}

/// In-memory memoization in front of any provider. Results are identical
/// to calling the inner provider directly.
pub struct MemoEmbedder<P> {
    inner: P,
    memo: Mutex<HashMap<String, Vec<f64>>>,
}

impl<P: EmbeddingProvider> MemoEmbedder<P> {
    pub fn new(inner: P) -> Self {
        MemoEmbedder {
            inner,
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    pub fn len(&self) -> usize {
        self.memo.lock().expect("memo lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Exports memoized document vectors (keyed by document id) as a cache.
    pub fn to_cache(&self) -> EmbeddingCache {
        let memo = self.memo.lock().expect("memo lock");
        let mut keys: Vec<_> = memo
            .keys()
            .filter_map(|k| k.strip_prefix("doc\u{0}"))
            .collect();
        keys.sort_unstable();
        let mut cache = EmbeddingCache::new(self.inner.dim());
        for k in keys {
            cache.push(k, &memo[&format!("doc\u{0}{k}")]);
        }
        cache
    }

    fn memoized(
        &self,
        key: String,
        compute: impl FnOnce() -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        if let Some(v) = self.memo.lock().expect("memo lock").get(&key) {
            return Ok(v.clone());
        }
        let v = compute()?;
        self.memo.lock().expect("memo lock").insert(key, v.clone());
        Ok(v)
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for MemoEmbedder<P> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.memoized(format!("text\u{0}{text}"), || self.inner.embed_text(text))
    }

    fn embed_document(&self, doc: &Document) -> Result<Vec<f64>> {
        self.memoized(format!("doc\u{0}{}", doc.id), || {
            self.inner.embed_document(doc)
        })
    }
}

impl EmbeddingProvider for Box<dyn EmbeddingProvider> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        (**self).embed_text(text)
    }

    fn embed_document(&self, doc: &Document) -> Result<Vec<f64>> {
        (**self).embed_document(doc)
    }
}
