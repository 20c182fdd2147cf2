//! Clustered synthetic benchmark with cross-user planted evidence.
//!
//! Users fall into latent clusters with disjoint core vocabularies. Each
//! sample's answer is written down in one evidence document placed in the
//! history of a *different* user of the same cluster, so only retrieval
//! across similar users can surface it. Answers are three words drawn from
//! a vocabulary shared by all samples. The evidence document repeats the
//! sample's two key words twice and carries the marker words common to all
//! evidence documents, which is the signal the retriever and reranker can
//! learn from feedback.
//!
//! Two short decoys per sample hold only the key words and one query topic
//! word, one in the querying user's own history and one in a cluster
//! mate's. Being short, they sit closer to the query than the evidence
//! does, so plain semantic similarity prefers a decoy.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::parse_flat;
use crate::corpus::{Dataset, Document, Sample, Task, UserProfile};
use crate::error::{Error, Result};
use crate::feedback::MockOracleConfig;
use crate::nn::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub users_per_cluster: usize,
    /// Background documents per user, before evidence and decoys are added.
    pub history_len: usize,
    pub vocab_per_cluster: usize,
    pub shared_vocab: usize,
    pub doc_len: usize,
    /// Marker words carried by every evidence document.
    pub markers: usize,
    /// Words that answers are drawn from, shared by all samples.
    pub answer_vocab: usize,
    /// Probability that a background token comes from the cluster
    /// vocabulary rather than the shared one.
    pub cluster_purity: f64,
    pub samples_per_user: usize,
    pub test_fraction: f64,
    /// Oracle per-token drop probability.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            clusters: 8,
            users_per_cluster: 4,
            history_len: 14,
            vocab_per_cluster: 30,
            shared_vocab: 40,
            doc_len: 10,
            markers: 4,
            answer_vocab: 40,
            cluster_purity: 0.7,
            samples_per_user: 8,
            test_fraction: 0.3,
            sigma: 0.0,
            seed: 17,
        }
    }
}

impl SyntheticSpec {
    /// Keys accepted by [`SyntheticSpec::set`].
    pub const KEYS: [&'static str; 13] = [
        "clusters",
        "users_per_cluster",
        "history_len",
        "vocab_per_cluster",
        "shared_vocab",
        "doc_len",
        "markers",
        "answer_vocab",
        "cluster_purity",
        "samples_per_user",
        "test_fraction",
        "sigma",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.users_per_cluster == 0 || self.history_len == 0 {
            return Err(Error::config(
                "clusters, users_per_cluster and history_len must be positive",
            ));
        }
        if self.clusters * self.users_per_cluster < 2 {
            return Err(Error::config("the benchmark needs at least two users"));
        }
        if self.vocab_per_cluster < 4 || self.doc_len == 0 {
            return Err(Error::config(
                "vocab_per_cluster must be at least 4 and doc_len positive",
            ));
        }
        if self.answer_vocab < 3 {
            return Err(Error::config("answer_vocab must be at least 3"));
        }
        if !(0.0..=1.0).contains(&self.cluster_purity) || !(0.0..1.0).contains(&self.test_fraction)
        {
            return Err(Error::config(
                "cluster_purity must be in [0, 1] and test_fraction in [0, 1)",
            ));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::config("sigma must be non-negative"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
        }
        match key {
            "clusters" => self.clusters = p(key, value)?,
            "users_per_cluster" => self.users_per_cluster = p(key, value)?,
            "history_len" => self.history_len = p(key, value)?,
            "vocab_per_cluster" => self.vocab_per_cluster = p(key, value)?,
            "shared_vocab" => self.shared_vocab = p(key, value)?,
            "doc_len" => self.doc_len = p(key, value)?,
            "markers" => self.markers = p(key, value)?,
            "answer_vocab" => self.answer_vocab = p(key, value)?,
            "cluster_purity" => self.cluster_purity = p(key, value)?,
            "samples_per_user" => self.samples_per_user = p(key, value)?,
            "test_fraction" => self.test_fraction = p(key, value)?,
            "sigma" => self.sigma = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            _ => return Err(Error::config(format!("unknown synthetic key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_flat(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (k, v) in parse_flat(text)? {
            spec.set(&k, &v)?;
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub oracle: MockOracleConfig,
    /// Latent cluster of each user.
    pub user_cluster: BTreeMap<String, usize>,
}

/// Pronounceable unique words from consonant-vowel syllables.
struct WordSource {
    seen: HashSet<String>,
}

impl WordSource {
    const CONSONANTS: &'static [u8] = b"bdfgklmnprstvz";
    const VOWELS: &'static [u8] = b"aeiou";

    fn next(&mut self, rng: &mut impl Rng) -> String {
        loop {
            let syllables = rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(*Self::CONSONANTS.choose(rng).expect("nonempty") as char);
                w.push(*Self::VOWELS.choose(rng).expect("nonempty") as char);
            }
            if w.len() >= 5 && self.seen.insert(w.clone()) {
                return w;
            }
        }
    }

    fn many(&mut self, n: usize, rng: &mut impl Rng) -> Vec<String> {
        (0..n).map(|_| self.next(rng)).collect()
    }
}

fn shuffled_text(mut tokens: Vec<String>, rng: &mut impl Rng) -> String {
    tokens.shuffle(rng);
    tokens.join(" ")
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let mut words = WordSource {
        seen: HashSet::new(),
    };
    let cluster_vocab: Vec<Vec<String>> = (0..spec.clusters)
        .map(|_| words.many(spec.vocab_per_cluster, &mut rng))
        .collect();
    let shared = words.many(spec.shared_vocab, &mut rng);
    let markers = words.many(spec.markers, &mut rng);
    let answer_words = words.many(spec.answer_vocab, &mut rng);

    let num_users = spec.clusters * spec.users_per_cluster;
    let user_ids: Vec<String> = (0..num_users).map(|i| format!("user-{i:03}")).collect();
    let cluster_of = |u: usize| u / spec.users_per_cluster;
    let mut next_doc = 0usize;
    let mut new_id = || {
        next_doc += 1;
        format!("doc-{next_doc:05}")
    };

    let mut oracle = MockOracleConfig {
        sigma: spec.sigma,
        seed: spec.seed,
        ..Default::default()
    };
    let mut histories: Vec<Vec<Document>> = Vec::with_capacity(num_users);
    for u in 0..num_users {
        let c = cluster_of(u);
        let mut docs = Vec::with_capacity(spec.history_len);
        for _ in 0..spec.history_len {
            let tokens: Vec<String> = (0..spec.doc_len)
                .map(|_| {
                    if rng.random_bool(spec.cluster_purity) || shared.is_empty() {
                        cluster_vocab[c].choose(&mut rng).expect("nonempty").clone()
                    } else {
                        shared.choose(&mut rng).expect("nonempty").clone()
                    }
                })
                .collect();
            let id = new_id();
            oracle
                .doc_cluster
                .insert(id.clone(), format!("cluster-{c}"));
            docs.push(Document::new(id, tokens.join(" ")));
        }
        histories.push(docs);
    }

    let mut samples = Vec::new();
    let mut planted: Vec<(usize, Document)> = Vec::new();
    for u in 0..num_users {
        let c = cluster_of(u);
        let vocab = &cluster_vocab[c];
        let topic = &vocab[0];
        let mates: Vec<usize> = (0..num_users)
            .filter(|&v| v != u && cluster_of(v) == c)
            .collect();
        let others: Vec<usize> = (0..num_users).filter(|&v| v != u).collect();
        let hosts = if mates.is_empty() { &others } else { &mates };
        for _ in 0..spec.samples_per_user {
            let sample_id = format!("sample-{:04}", samples.len());
            let keys = words.many(2, &mut rng);
            let answer: Vec<String> = answer_words.choose_multiple(&mut rng, 3).cloned().collect();
            let mut topic_words: Vec<String> =
                vocab[1..].choose_multiple(&mut rng, 3).cloned().collect();
            topic_words.insert(0, topic.clone());

            let query = format!("{} {} {}", keys[0], keys[1], topic_words[1..].join(" "));
            let target = format!("{} {topic}", answer.join(" "));

            let mut evidence: Vec<String> = keys.iter().chain(keys.iter()).cloned().collect();
            evidence.extend(markers.iter().cloned());
            evidence.extend(answer.iter().cloned());
            evidence.extend(vocab[1..].choose(&mut rng).cloned());
            let gold_id = new_id();
            let gold_cluster = format!("evidence-{sample_id}");
            oracle
                .doc_cluster
                .insert(gold_id.clone(), gold_cluster.clone());
            let host = *hosts.choose(&mut rng).expect("at least one other user");
            planted.push((
                host,
                Document::new(gold_id, shuffled_text(evidence, &mut rng)),
            ));

            for decoy_host in [u, *hosts.choose(&mut rng).expect("at least one other user")] {
                let mut tokens: Vec<String> = keys.clone();
                tokens.extend(topic_words[1..].choose(&mut rng).cloned());
                let id = new_id();
                oracle
                    .doc_cluster
                    .insert(id.clone(), format!("cluster-{c}"));
                planted.push((
                    decoy_host,
                    Document::new(id, shuffled_text(tokens, &mut rng)),
                ));
            }

            oracle.sample_gold.insert(sample_id.clone(), gold_cluster);
            oracle
                .fallback
                .insert(sample_id.clone(), format!("{topic} unknown"));
            let mut fields = BTreeMap::new();
            let split = if rng.random_bool(spec.test_fraction) {
                "test"
            } else {
                "train"
            };
            fields.insert("split".to_string(), split.to_string());
            samples.push(Sample {
                id: sample_id,
                user_id: user_ids[u].clone(),
                query,
                target,
                task: Task::Synthetic,
                fields,
            });
        }
    }
    for (host, doc) in planted {
        let at = rng.random_range(0..=histories[host].len());
        histories[host].insert(at, doc);
    }

    let users = user_ids
        .iter()
        .zip(histories)
        .map(|(id, docs)| UserProfile::new(id.clone(), docs))
        .collect();
    let user_cluster = user_ids
        .iter()
        .enumerate()
        .map(|(u, id)| (id.clone(), cluster_of(u)))
        .collect();
    let dataset = Dataset { users, samples };
    dataset.validate()?;
    Ok(SyntheticData {
        dataset,
        oracle,
        user_cluster,
    })
}
