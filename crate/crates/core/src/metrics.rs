//! Task metrics: ROUGE-1/ROUGE-L, accuracy with macro F1, MAE/RMSE, and
//! extraction of a field from JSON-formatted model output.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

/// Midpoint of the 1-5 rating scale, imputed for unparseable predictions.
pub const RATING_MIDPOINT: f64 = 3.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_overlap(overlap: usize, cand_len: usize, ref_len: usize) -> Self {
        match (cand_len, ref_len) {
            (0, 0) => RougeScore {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            },
            (0, _) | (_, 0) => RougeScore::default(),
            _ => {
                let p = overlap as f64 / cand_len as f64;
                let r = overlap as f64 / ref_len as f64;
                let f1 = if p + r == 0.0 {
                    0.0
                } else {
                    2.0 * p * r / (p + r)
                };
                RougeScore {
                    precision: p,
                    recall: r,
                    f1,
                }
            }
        }
    }
}

/// Clipped unigram overlap.
pub fn rouge1(candidate: &str, reference: &str) -> RougeScore {
    let cand = tokenize(candidate);
    let refs = tokenize(reference);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &refs {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &cand {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    RougeScore::from_overlap(overlap, cand.len(), refs.len())
}

/// Longest-common-subsequence based ROUGE.
pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let cand = tokenize(candidate);
    let refs = tokenize(reference);
    RougeScore::from_overlap(lcs_len(&cand, &refs), cand.len(), refs.len())
}

/// LCS length with a rolling two-row table.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn normalize_label(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Accuracy and macro-averaged F1 over `labels`.
///
/// A class that is never predicted and never the target scores F1 = 0.
/// A prediction outside the label set is wrong for every class.
pub fn classification_metrics(
    preds: &[&str],
    targets: &[&str],
    labels: &[&str],
) -> Result<(f64, f64)> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::contract(format!(
            "classification metrics need equal non-empty inputs, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    let preds: Vec<String> = preds.iter().map(|p| normalize_label(p)).collect();
    let targets: Vec<String> = targets.iter().map(|t| normalize_label(t)).collect();
    let correct = preds.iter().zip(&targets).filter(|(p, t)| p == t).count();
    let accuracy = correct as f64 / preds.len() as f64;

    let mut labels: Vec<String> = labels.iter().map(|l| normalize_label(l)).collect();
    labels.sort();
    labels.dedup();
    if labels.is_empty() {
        return Ok((accuracy, 0.0));
    }
    let mut f1_sum = 0.0;
    for c in &labels {
        let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
        for (p, t) in preds.iter().zip(&targets) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fnn;
        if denom > 0 {
            f1_sum += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok((accuracy, f1_sum / labels.len() as f64))
}

/// Mean absolute error and root mean squared error.
pub fn regression_metrics(preds: &[f64], targets: &[f64]) -> Result<(f64, f64)> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::contract(format!(
            "regression metrics need equal non-empty inputs, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    let n = preds.len() as f64;
    let mae = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n;
    let mse = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / n;
    Ok((mae, mse.sqrt()))
}

/// First number in the text, if any.
pub fn parse_rating(text: &str) -> Option<f64> {
    let start = text.find(|c: char| c.is_ascii_digit())?;
    let rest = &text[start..];
    let end = rest
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(rest.len());
    rest[..end].trim_end_matches('.').parse().ok()
}

/// Rating parsed from free text, or the scale midpoint when unparseable.
pub fn rating_or_midpoint(text: &str) -> f64 {
    parse_rating(text).unwrap_or(RATING_MIDPOINT)
}

/// Returns `field` from the first well-formed JSON object in `text`.
///
/// Falls back to a lenient `"field": value` scan (models often drop the
/// quotes around the value), then to the trimmed raw text.
pub fn extract_json_field(text: &str, field: &str) -> String {
    for (i, _) in text.match_indices('{') {
        let mut stream =
            serde_json::Deserializer::from_str(&text[i..]).into_iter::<serde_json::Value>();
        if let Some(Ok(serde_json::Value::Object(map))) = stream.next() {
            return match map.get(field) {
                Some(serde_json::Value::String(s)) => s.clone(),
                Some(other) => other.to_string(),
                None => text.trim().to_string(),
            };
        }
    }
    let key = format!("\"{field}\"");
    if let Some(pos) = text.find(&key) {
        let rest = text[pos + key.len()..].trim_start();
        if let Some(rest) = rest.strip_prefix(':') {
            let value = rest.split('}').next().unwrap_or(rest).trim();
            let value = value.trim_matches('"').trim();
            if !value.is_empty() {
                return value.to_string();
            }
        }
    }
    text.trim().to_string()
}
