//! Text generators: an HTTP chat-completion client and a deterministic
//! oracle for synthetic benchmarks.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::http::{token_from_env, HttpClient};
use crate::nn::SeededRng;
use crate::text::{fnv1a64, tokenize};

pub const LLM_TOKEN_ENV: &str = "CFRAG_LLM_TOKEN";

pub trait GenerationProvider: Send + Sync {
    /// Stable identifier, used in feedback cache keys.
    fn id(&self) -> String;

    fn generate(&self, prompt: &str) -> Result<String>;
}

impl<P: GenerationProvider + ?Sized> GenerationProvider for Box<P> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn generate(&self, prompt: &str) -> Result<String> {
        (**self).generate(prompt)
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    top_p: f64,
    n: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: Option<String>,
}

/// OpenAI-style chat-completion client requesting greedy decoding
/// (`temperature = 0`, `top_p = 1`, one choice).
#[derive(Clone, Debug)]
pub struct HttpChatProvider {
    pub endpoint: String,
    pub model: String,
    token: Option<String>,
    client: HttpClient,
}

impl HttpChatProvider {
    /// `base_url` is the API root; requests go to `{base_url}/chat/completions`.
    /// The bearer token defaults to `CFRAG_LLM_TOKEN`.
    pub fn new(
        base_url: &str,
        model: impl Into<String>,
        timeout: Duration,
        max_retries: u32,
    ) -> Self {
        HttpChatProvider {
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.into(),
            token: token_from_env(LLM_TOKEN_ENV),
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

impl GenerationProvider for HttpChatProvider {
    fn id(&self) -> String {
        format!("chat:{}:{}", self.endpoint, self.model)
    }

    fn generate(&self, prompt: &str) -> Result<String> {
        if prompt.is_empty() {
            return Err(Error::contract("empty prompt"));
        }
        let req = ChatRequest {
            model: &self.model,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: 0.0,
            top_p: 1.0,
            n: 1,
        };
        let resp: ChatResponse =
            self.client
                .post_json(&self.endpoint, self.token.as_deref(), &req)?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::Transport {
                attempts: 1,
                message: "response has no choices[0].message.content".into(),
            })
    }
}

/// Ground truth for the mock oracle. Every document belongs to a latent
/// cluster; a sample is answered well exactly when a document of its gold
/// cluster appears in the prompt.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MockOracleConfig {
    pub doc_cluster: BTreeMap<String, String>,
    pub sample_gold: BTreeMap<String, String>,
    /// Answer given when no gold evidence is present.
    pub fallback: BTreeMap<String, String>,
    /// Per-token drop probability applied to every answer.
    pub sigma: f64,
    pub seed: u64,
}

struct OracleSample {
    query: String,
    target: String,
    fallback: String,
    evidence: Vec<String>,
}

/// Deterministic generator driven by [`MockOracleConfig`]. It recognizes
/// the sample from its query text inside the prompt and answers with the
/// target when gold evidence is present, otherwise with the fallback.
pub struct MockOracle {
    config: MockOracleConfig,
    samples: Vec<OracleSample>,
}

impl MockOracle {
    pub fn new(config: MockOracleConfig, dataset: &Dataset) -> Result<Self> {
        if !(config.sigma >= 0.0) {
            return Err(Error::config(format!(
                "oracle noise must be non-negative, got {}",
                config.sigma
            )));
        }
        let mut by_cluster: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for doc in dataset.users.iter().flat_map(|u| &u.history) {
            if let Some(c) = config.doc_cluster.get(&doc.id) {
                by_cluster
                    .entry(c.as_str())
                    .or_default()
                    .push(doc.text.clone());
            }
        }
        let mut samples = Vec::with_capacity(dataset.samples.len());
        for s in &dataset.samples {
            let evidence = config
                .sample_gold
                .get(&s.id)
                .and_then(|c| by_cluster.get(c.as_str()))
                .cloned()
                .unwrap_or_default();
            samples.push(OracleSample {
                query: s.query.clone(),
                target: s.target.clone(),
                fallback: config.fallback.get(&s.id).cloned().unwrap_or_default(),
                evidence,
            });
        }
        // Longest queries first so a query that is a substring of another
        // never shadows it.
        samples.sort_by_key(|s| std::cmp::Reverse(s.query.len()));
        Ok(MockOracle { config, samples })
    }

    pub fn config(&self) -> &MockOracleConfig {
        &self.config
    }

    fn perturb(&self, prompt: &str, answer: &str) -> String {
        if self.config.sigma == 0.0 {
            return answer.to_string();
        }
        let p = self.config.sigma.min(1.0);
        let mut rng = SeededRng::seed_from_u64(self.config.seed ^ fnv1a64(prompt.as_bytes()));
        tokenize(answer)
            .into_iter()
            .filter(|_| !rng.random_bool(p))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl GenerationProvider for MockOracle {
    fn id(&self) -> String {
        format!("mock-oracle:{}:{}", self.config.seed, self.config.sigma)
    }

    fn generate(&self, prompt: &str) -> Result<String> {
        if prompt.is_empty() {
            return Err(Error::contract("empty prompt"));
        }
        let Some(sample) = self
            .samples
            .iter()
            .find(|s| !s.query.is_empty() && prompt.contains(&s.query))
        else {
            return Ok(String::new());
        };
        let answer = if sample.evidence.iter().any(|t| prompt.contains(t.as_str())) {
            &sample.target
        } else {
            &sample.fallback
        };
        Ok(self.perturb(prompt, answer))
    }
}
