//! Users, documents, samples, and the JSON-lines dataset format.
//!
//! A dataset file holds one record per line, tagged by `kind`:
//!
//! ```text
//! {"kind":"user","user_id":"u1","history":[{"id":"d1","text":"...","aux":{"title":"..."}}]}
//! {"kind":"sample","id":"s1","user_id":"u1","query":"...","target":"...","task":"LaMP-5"}
//! ```

mod cache;
mod embed;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cache::{read_embedding_cache, write_embedding_cache, EmbeddingCache, CACHE_MAGIC};
pub use embed::{
    embed_document, hash_embed, hash_embed_tokens, EmbeddingProvider, HashEmbedder, MemoEmbedder,
    PrecomputedEmbeddings, RemoteEmbedder, EMBED_TOKEN_ENV,
};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_HISTORY: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aux: BTreeMap<String, String>,
    #[serde(default)]
    pub position: usize,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            aux: BTreeMap::new(),
            position: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub history: Vec<Document>,
}

impl UserProfile {
    /// Builds a profile from documents in chronological order, assigning
    /// positions `0..N`.
    pub fn new(user_id: impl Into<String>, docs: Vec<Document>) -> Self {
        let history = docs
            .into_iter()
            .enumerate()
            .map(|(i, mut d)| {
                d.position = i;
                d
            })
            .collect();
        UserProfile {
            user_id: user_id.into(),
            history,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "LaMP-1")]
    Lamp1,
    #[serde(rename = "LaMP-2")]
    Lamp2,
    #[serde(rename = "LaMP-3")]
    Lamp3,
    #[serde(rename = "LaMP-4")]
    Lamp4,
    #[serde(rename = "LaMP-5")]
    Lamp5,
    #[serde(rename = "LaMP-7")]
    Lamp7,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::Lamp1,
        Task::Lamp2,
        Task::Lamp3,
        Task::Lamp4,
        Task::Lamp5,
        Task::Lamp7,
        Task::Synthetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Lamp1 => "LaMP-1",
            Task::Lamp2 => "LaMP-2",
            Task::Lamp3 => "LaMP-3",
            Task::Lamp4 => "LaMP-4",
            Task::Lamp5 => "LaMP-5",
            Task::Lamp7 => "LaMP-7",
            Task::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub user_id: String,
    pub query: String,
    pub target: String,
    pub task: Task,
    /// Named template inputs (e.g. `title`, `reference_1`); the query fills
    /// the main input slot when absent.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub fields: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub users: Vec<UserProfile>,
    pub samples: Vec<Sample>,
}

#[derive(Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    User(UserRecord),
    Sample(SampleRecord),
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct UserRecord {
    user_id: String,
    history: Vec<DocRecord>,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct DocRecord {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    aux: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    position: Option<usize>,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    user_id: String,
    query: String,
    target: String,
    task: Task,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    fields: BTreeMap<String, String>,
}

impl Dataset {
    pub fn user(&self, user_id: &str) -> Option<&UserProfile> {
        self.users.iter().find(|u| u.user_id == user_id)
    }

    pub fn user_index(&self) -> HashMap<&str, usize> {
        self.users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.user_id.as_str(), i))
            .collect()
    }

    pub fn num_documents(&self) -> usize {
        self.users.iter().map(|u| u.history.len()).sum()
    }

    /// Keeps only the most recent `max_len` documents of each history.
    pub fn truncate_histories(&mut self, max_len: usize) {
        for u in &mut self.users {
            let n = u.history.len();
            if n > max_len {
                u.history.drain(..n - max_len);
            }
        }
    }

    /// Checks the cross-record invariants: unique ids, non-empty ordered
    /// histories, and resolvable sample users.
    pub fn validate(&self) -> Result<()> {
        let mut users = HashSet::new();
        let mut docs = HashSet::new();
        for u in &self.users {
            if u.user_id.is_empty() {
                return Err(Error::Integrity("empty user id".into()));
            }
            if !users.insert(u.user_id.as_str()) {
                return Err(Error::Integrity(format!("duplicate user `{}`", u.user_id)));
            }
            if u.history.is_empty() {
                return Err(Error::Integrity(format!(
                    "user `{}` has an empty history",
                    u.user_id
                )));
            }
            for w in u.history.windows(2) {
                if w[0].position >= w[1].position {
                    return Err(Error::Integrity(format!(
                        "history of `{}` is not strictly ordered at `{}`",
                        u.user_id, w[1].id
                    )));
                }
            }
            for d in &u.history {
                if d.id.is_empty() {
                    return Err(Error::Integrity(format!(
                        "empty document id in `{}`",
                        u.user_id
                    )));
                }
                if !docs.insert(d.id.as_str()) {
                    return Err(Error::Integrity(format!("duplicate document `{}`", d.id)));
                }
            }
        }
        let mut sample_ids = HashSet::new();
        for s in &self.samples {
            if !users.contains(s.user_id.as_str()) {
                return Err(Error::Integrity(format!(
                    "sample `{}` references unknown user `{}`",
                    s.id, s.user_id
                )));
            }
            if !sample_ids.insert(s.id.as_str()) {
                return Err(Error::Integrity(format!("duplicate sample `{}`", s.id)));
            }
        }
        Ok(())
    }
}

pub fn parse_dataset(reader: impl BufRead) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        match record {
            Record::User(u) => ds.users.push(user_from_record(u, line_no)?),
            Record::Sample(s) => {
                let id = s.id.unwrap_or_else(|| format!("sample-{line_no}"));
                ds.samples.push(Sample {
                    id,
                    user_id: s.user_id,
                    query: s.query,
                    target: s.target,
                    task: s.task,
                    fields: s.fields,
                });
            }
        }
    }
    ds.validate()?;
    Ok(ds)
}

fn user_from_record(u: UserRecord, line: usize) -> Result<UserProfile> {
    let mut history: Vec<Document> = u
        .history
        .into_iter()
        .enumerate()
        .map(|(i, d)| Document {
            id: d.id,
            text: d.text,
            aux: d.aux,
            position: d.position.unwrap_or(i),
        })
        .collect();
    history.sort_by_key(|d| d.position);
    if history.windows(2).any(|w| w[0].position == w[1].position) {
        return Err(Error::Parse {
            line,
            message: format!("duplicate history positions for `{}`", u.user_id),
        });
    }
    Ok(UserProfile {
        user_id: u.user_id,
        history,
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let ds = parse_dataset(BufReader::new(file))?;
    log::info!(
        "loaded {} users, {} documents, {} samples",
        ds.users.len(),
        ds.num_documents(),
        ds.samples.len()
    );
    Ok(ds)
}

pub fn write_dataset(ds: &Dataset, mut out: impl Write) -> Result<()> {
    for u in &ds.users {
        let rec = Record::User(UserRecord {
            user_id: u.user_id.clone(),
            history: u
                .history
                .iter()
                .map(|d| DocRecord {
                    id: d.id.clone(),
                    text: d.text.clone(),
                    aux: d.aux.clone(),
                    position: Some(d.position),
                })
                .collect(),
        });
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    for s in &ds.samples {
        let rec = Record::Sample(SampleRecord {
            id: Some(s.id.clone()),
            user_id: s.user_id.clone(),
            query: s.query.clone(),
            target: s.target.clone(),
            task: s.task,
            fields: s.fields.clone(),
        });
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{"kind":"user","user_id":"u1","history":[{"id":"d1","text":"first paper","aux":{"title":"A Title","abstract":"An abstract."}},{"id":"d2","text":"second paper"}]}
{"kind":"user","user_id":"u2","history":[{"id":"d3","text":"only doc"}]}
{"kind":"sample","id":"s1","user_id":"u1","query":"q1","target":"t1","task":"LaMP-5"}
{"kind":"sample","user_id":"u2","query":"q2","target":"t2","task":"LaMP-7"}
{"kind":"sample","id":"s3","user_id":"u1","query":"q3","target":"t3","task":"synthetic"}
"#;

    #[test]
    fn fixture_loads_and_round_trips() {
        let ds = parse_dataset(FIXTURE.as_bytes()).unwrap();
        assert_eq!(ds.users.len(), 2);
        assert_eq!(ds.samples.len(), 3);
        assert_eq!(ds.samples[1].id, "sample-4");
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let again = parse_dataset(buf.as_slice()).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn aux_fields_preserved_verbatim() {
        let ds = parse_dataset(FIXTURE.as_bytes()).unwrap();
        let d1 = &ds.users[0].history[0];
        assert_eq!(d1.aux["title"], "A Title");
        assert_eq!(d1.aux["abstract"], "An abstract.");
    }

    #[test]
    fn missing_user_id_reports_line() {
        let bad =
            "{\"kind\":\"user\",\"user_id\":\"u1\",\"history\":[{\"id\":\"d\",\"text\":\"x\"}]}\n\
                   {\"kind\":\"sample\",\"query\":\"q\",\"target\":\"t\",\"task\":\"LaMP-4\"}\n";
        match parse_dataset(bad.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("user_id"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_user_is_integrity_error() {
        let bad = "{\"kind\":\"user\",\"user_id\":\"u1\",\"history\":[{\"id\":\"d\",\"text\":\"x\"}]}\n\
                   {\"kind\":\"sample\",\"user_id\":\"ghost\",\"query\":\"q\",\"target\":\"t\",\"task\":\"LaMP-4\"}\n";
        assert!(matches!(
            parse_dataset(bad.as_bytes()),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn explicit_positions_reorder_history() {
        let src = r#"{"kind":"user","user_id":"u","history":[{"id":"b","text":"x","position":5},{"id":"a","text":"y","position":2}]}"#;
        let ds = parse_dataset(src.as_bytes()).unwrap();
        let ids: Vec<_> = ds.users[0].history.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn duplicate_documents_rejected() {
        let src = r#"{"kind":"user","user_id":"u","history":[{"id":"a","text":"x"}]}
{"kind":"user","user_id":"v","history":[{"id":"a","text":"y"}]}"#;
        assert!(matches!(
            parse_dataset(src.as_bytes()),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let docs = (0..10)
            .map(|i| Document::new(format!("d{i}"), "t"))
            .collect();
        let mut ds = Dataset {
            users: vec![UserProfile::new("u", docs)],
            samples: vec![],
        };
        ds.truncate_histories(4);
        let ids: Vec<_> = ds.users[0].history.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["d6", "d7", "d8", "d9"]);
        ds.validate().unwrap();
    }

    #[test]
    fn task_names_parse() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
        assert!("LaMP-6".parse::<Task>().is_err());
    }
}
