//! Generation feedback: providers, per-task scoring of generated outputs,
//! and the feedback distribution over candidate documents.

mod cache;
mod provider;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use cache::{prompt_key, CacheEntry, FeedbackCache};
pub use provider::{
    GenerationProvider, HttpChatProvider, MockOracle, MockOracleConfig, LLM_TOKEN_ENV,
};

use crate::corpus::{Document, Sample, Task};
use crate::distribution::softmax;
use crate::error::{Error, Result};
use crate::metrics::{extract_json_field, parse_rating, rouge1};

/// Score given to a rating prediction that has no number in it: the widest
/// possible gap on the 1-5 scale.
pub const UNPARSEABLE_RATING_SCORE: f64 = -4.0;

pub const DEFAULT_WORKERS: usize = 4;

/// The JSON field the task's prompt asks the model to answer in.
pub fn output_field(task: Task) -> Option<&'static str> {
    match task {
        Task::Lamp4 | Task::Lamp5 => Some("title"),
        Task::Lamp7 => Some("tweet"),
        _ => None,
    }
}

/// The answer part of a raw generation.
pub fn extract_prediction(task: Task, output: &str) -> String {
    match output_field(task) {
        Some(field) => extract_json_field(output, field),
        None => output.trim().to_string(),
    }
}

/// Quality of `output` against `target`; higher is better for every task.
///
/// Generation tasks use ROUGE-1 F1, classification tasks exact match after
/// trimming and lowercasing, and rating prediction the negative absolute
/// error.
pub fn eval_output(task: Task, target: &str, output: &str) -> Result<f64> {
    let pred = extract_prediction(task, output);
    Ok(match task {
        Task::Lamp4 | Task::Lamp5 | Task::Lamp7 | Task::Synthetic => rouge1(&pred, target).f1,
        Task::Lamp1 | Task::Lamp2 => {
            if pred.to_lowercase() == target.trim().to_lowercase() {
                1.0
            } else {
                0.0
            }
        }
        Task::Lamp3 => {
            let y = parse_rating(target).ok_or_else(|| {
                Error::contract(format!("rating target `{target}` is not a number"))
            })?;
            match parse_rating(&pred) {
                Some(p) => -(p - y).abs(),
                None => UNPARSEABLE_RATING_SCORE,
            }
        }
    })
}

/// Softmax of the eval scores.
pub fn llm_distribution(scores: &[f64]) -> Result<Vec<f64>> {
    softmax(scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub sample_id: String,
    pub doc_id: String,
    pub output: String,
    pub score: f64,
}

/// Generates one output per candidate (prompt = query plus that single
/// document) and scores it against the sample target.
///
/// Up to `workers` generations run at once. Outputs are looked up in and
/// written to `cache` by (provider id, prompt). Records come back in
/// candidate order regardless of completion order. If any candidate fails,
/// the error lists every failed document id.
pub fn collect_feedback(
    provider: &dyn GenerationProvider,
    sample: &Sample,
    candidates: &[&Document],
    build_prompt: &(dyn Fn(&Document) -> Result<String> + Sync),
    cache: &FeedbackCache,
    workers: usize,
) -> Result<Vec<FeedbackRecord>> {
    if candidates.is_empty() {
        return Err(Error::contract(format!(
            "sample `{}` has no candidates",
            sample.id
        )));
    }
    let provider_id = provider.id();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<FeedbackRecord>>>> =
        Mutex::new((0..candidates.len()).map(|_| None).collect());
    let run_one = |doc: &Document| -> Result<FeedbackRecord> {
        let prompt = build_prompt(doc)?;
        let key = prompt_key(&provider_id, &prompt);
        let output = match cache.get(&key) {
            Some(hit) => hit.output,
            None => {
                let output = provider.generate(&prompt)?;
                let score = eval_output(sample.task, &sample.target, &output)?;
                cache.insert(CacheEntry {
                    prompt_hash: key,
                    output: output.clone(),
                    score,
                })?;
                output
            }
        };
        let score = eval_output(sample.task, &sample.target, &output)?;
        Ok(FeedbackRecord {
            sample_id: sample.id.clone(),
            doc_id: doc.id.clone(),
            output,
            score,
        })
    };
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, candidates.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= candidates.len() {
                    break;
                }
                let result = run_one(candidates[i]);
                slots.lock().expect("feedback slots")[i] = Some(result);
            });
        }
    });

    let mut records = Vec::with_capacity(candidates.len());
    let mut failed = Vec::new();
    let mut first_error = None;
    for (slot, doc) in slots
        .into_inner()
        .expect("feedback slots")
        .into_iter()
        .zip(candidates)
    {
        match slot.expect("every candidate ran") {
            Ok(r) => records.push(r),
            Err(e) => {
                failed.push(doc.id.clone());
                first_error.get_or_insert(e.to_string());
            }
        }
    }
    if !failed.is_empty() {
        return Err(Error::Feedback {
            sample: sample.id.clone(),
            failed,
            message: first_error.unwrap_or_default(),
        });
    }
    Ok(records)
}
