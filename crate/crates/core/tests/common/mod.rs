//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use cfrag::corpus::{Document, Sample, Task};
use cfrag::pipeline::{write_synthetic, PipelineConfig, SyntheticData, DATASET_FILE, ORACLE_FILE};

pub const GOLDEN_DIR: &str = "tests/golden";

/// Writes `data` under `root/data` and returns the default pipeline config
/// pointed at it, with outputs in `root/run`.
pub fn synthetic_config(data: &SyntheticData, root: &Path, seed: u64) -> PipelineConfig {
    let data_dir = root.join("data");
    write_synthetic(data, &data_dir).expect("write synthetic benchmark");
    PipelineConfig {
        dataset: data_dir.join(DATASET_FILE),
        oracle: Some(data_dir.join(ORACLE_FILE)),
        out_dir: root.join("run"),
        seed,
        ..PipelineConfig::default()
    }
}

fn doc(id: &str, text: &str, aux: &[(&str, &str)]) -> Document {
    let mut d = Document::new(id, text);
    for (k, v) in aux {
        d.aux.insert(k.to_string(), v.to_string());
    }
    d
}

fn sample(task: Task, query: &str, fields: &[(&str, &str)]) -> Sample {
    Sample {
        id: format!("{task}-golden"),
        user_id: "u1".into(),
        query: query.into(),
        target: String::new(),
        task,
        fields: fields
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect::<BTreeMap<_, _>>(),
    }
}

/// `(golden file stem, sample, history documents in slot order)`.
pub fn golden_samples() -> Vec<(String, Sample, Vec<Document>)> {
    vec![
        (
            "lamp1".into(),
            sample(
                Task::Lamp1,
                "Sparse coding for vision",
                &[
                    ("title", "Sparse coding for vision"),
                    ("reference_1", "Deep belief networks"),
                    ("reference_2", "Routing in sensor networks"),
                ],
            ),
            vec![
                doc(
                    "p1",
                    "Learning sparse codes",
                    &[
                        ("title", "Learning sparse codes"),
                        ("abstract", "We learn codes"),
                    ],
                ),
                doc(
                    "p2",
                    "Edge detectors",
                    &[("title", "Edge detectors"), ("abstract", "Edges emerge")],
                ),
            ],
        ),
        (
            "lamp2".into(),
            sample(Task::Lamp2, "A robot learns to love", &[]),
            vec![
                doc("m1", "A heist goes wrong", &[("tag", "action")]),
                doc(
                    "m2",
                    "Two friends on a road trip",
                    &[
                        ("description", "Two friends on a road trip"),
                        ("tag", "comedy"),
                    ],
                ),
            ],
        ),
        (
            "lamp3".into(),
            sample(
                Task::Lamp3,
                "Cold soup and slow service",
                &[("review", "Cold soup and slow service")],
            ),
            vec![
                doc("r1", "Great noodles", &[("score", "5")]),
                doc("r2", "Too loud", &[("score", "2")]),
            ],
        ),
        (
            "lamp4".into(),
            sample(Task::Lamp4, "Divorce can open a new chapter", &[]),
            vec![doc(
                "n1",
                "Markets rallied today",
                &[("title", "Stocks Up")],
            )],
        ),
        (
            "lamp5".into(),
            sample(
                Task::Lamp5,
                "We study two-hop routing",
                &[("abstract", "We study two-hop routing")],
            ),
            vec![
                doc(
                    "a1",
                    "A survey of mesh networks",
                    &[("title", "Mesh Survey")],
                ),
                doc("a2", "Energy aware MAC design", &[("title", "Energy MAC")]),
                doc(
                    "a3",
                    "Clock sync in sensor fields",
                    &[("title", "Clock Sync")],
                ),
            ],
        ),
        (
            "lamp7".into(),
            sample(Task::Lamp7, "the danny picture is good", &[]),
            vec![
                doc("t1", "so tired today", &[]),
                doc("t2", "coffee first!!", &[("tweet", "coffee first!!")]),
            ],
        ),
        (
            "lamp3_zero_shot".into(),
            sample(Task::Lamp3, "Cold soup and slow service", &[]),
            vec![],
        ),
    ]
}
