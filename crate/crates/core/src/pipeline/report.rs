//! Run reports: JSON plus flat CSVs for per-sample scores and loss traces.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTraces {
    /// Mean contrastive loss per epoch.
    pub user: Vec<f64>,
    /// Retriever KL loss per step.
    pub retriever: Vec<f64>,
    /// Reranker KL loss per step.
    pub reranker: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub m: usize,
    pub alpha: f64,
    /// Mean feedback score (the same quality measure used for training).
    pub mean_score: f64,
    /// Task metrics keyed `task/metric`.
    pub metrics: BTreeMap<String, f64>,
    /// Share of samples whose prompt contained planted evidence, when
    /// ground truth is known.
    pub evidence_hit_rate: Option<f64>,
    pub samples: usize,
}

/// How often the trained and untrained scorers put the planted evidence
/// first among their candidates, against the chance rate
/// `mean(1 / candidate count)`. Queries whose candidates miss the evidence
/// are counted in `*_missed` and excluded from the rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillationReport {
    pub retriever_queries: usize,
    pub retriever_missed: usize,
    pub retriever_top1_trained: f64,
    pub retriever_top1_untrained: f64,
    pub retriever_chance: f64,
    pub reranker_queries: usize,
    pub reranker_missed: usize,
    pub reranker_top1_trained: f64,
    pub reranker_top1_untrained: f64,
    pub reranker_chance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub variant: String,
    pub sample_id: String,
    pub task: String,
    pub score: f64,
    pub prediction: String,
    pub evidence_hit: Option<bool>,
    /// Documents placed in the prompt, in rank order.
    pub docs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: PipelineConfig,
    pub losses: LossTraces,
    pub variants: Vec<VariantReport>,
    pub distillation: Option<DistillationReport>,
    pub samples: Vec<SampleResult>,
}

impl RunReport {
    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("seed {}\n", self.seed));
        for (stage, trace) in [
            ("user", &self.losses.user),
            ("retriever", &self.losses.retriever),
            ("reranker", &self.losses.reranker),
        ] {
            if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
                out.push_str(&format!(
                    "{stage:>10} loss {first:.4} -> {last:.4} ({} points)\n",
                    trace.len()
                ));
            }
        }
        for v in &self.variants {
            out.push_str(&format!(
                "{:<20} m={} alpha={} score={:.4}",
                v.name, v.m, v.alpha, v.mean_score
            ));
            if let Some(h) = v.evidence_hit_rate {
                out.push_str(&format!(" evidence-hit={h:.3}"));
            }
            for (k, x) in &v.metrics {
                out.push_str(&format!(" {k}={x:.4}"));
            }
            out.push('\n');
        }
        if let Some(d) = &self.distillation {
            out.push_str(&format!(
                "retriever top-1: trained {:.3}, untrained {:.3}, chance {:.3} ({} queries, {} missed)\n",
                d.retriever_top1_trained, d.retriever_top1_untrained, d.retriever_chance, d.retriever_queries, d.retriever_missed
            ));
            out.push_str(&format!(
                "reranker top-1: trained {:.3}, untrained {:.3}, chance {:.3} ({} queries, {} missed)\n",
                d.reranker_top1_trained, d.reranker_top1_untrained, d.reranker_chance, d.reranker_queries, d.reranker_missed
            ));
        }
        out
    }
}

pub const REPORT_JSON: &str = "report.json";
pub const SAMPLES_CSV: &str = "samples.csv";
pub const LOSSES_CSV: &str = "losses.csv";

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// The exact text written to `report.json`.
pub fn report_json(report: &RunReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

/// Writes `report.json`, `samples.csv` (one row per evaluated sample, one
/// score and hit column per variant) and `losses.csv` into `dir`.
pub fn emit_report(report: &RunReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(REPORT_JSON), report_json(report)?)?;

    let variants: Vec<&str> = report.variants.iter().map(|v| v.name.as_str()).collect();
    let mut rows: BTreeMap<&str, (&str, BTreeMap<&str, &SampleResult>)> = BTreeMap::new();
    for s in &report.samples {
        rows.entry(&s.sample_id)
            .or_insert_with(|| (&s.task, BTreeMap::new()))
            .1
            .insert(&s.variant, s);
    }
    let mut w = csv::Writer::from_path(dir.join(SAMPLES_CSV)).map_err(csv_error)?;
    let mut header = vec!["sample_id".to_string(), "task".to_string()];
    for v in &variants {
        header.push(format!("{v}_score"));
        header.push(format!("{v}_evidence_hit"));
    }
    w.write_record(&header).map_err(csv_error)?;
    for (id, (task, by_variant)) in &rows {
        let mut rec = vec![id.to_string(), task.to_string()];
        for v in &variants {
            match by_variant.get(v) {
                Some(s) => {
                    rec.push(s.score.to_string());
                    rec.push(s.evidence_hit.map(|h| h.to_string()).unwrap_or_default());
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(LOSSES_CSV)).map_err(csv_error)?;
    w.write_record(["stage", "step", "loss"])
        .map_err(csv_error)?;
    for (stage, trace) in [
        ("user", &report.losses.user),
        ("retriever", &report.losses.retriever),
        ("reranker", &report.losses.reranker),
    ] {
        for (i, l) in trace.iter().enumerate() {
            w.write_record([stage.to_string(), i.to_string(), l.to_string()])
                .map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_report(path: impl AsRef<Path>) -> Result<RunReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
