//! End-to-end orchestration: configuration, prompts, the synthetic
//! benchmark, staged training, evaluation and reports.

mod config;
mod prompt;
mod report;
mod run;
mod synth;

pub use config::{
    parse_flat, EmbedderKind, FeaturizerKind, GeneratorKind, PipelineConfig, ALPHA_GRID,
    ALPHA_RANGE, LR_GRID, M_GRID, TAU_GRID,
};
pub use prompt::{build_prompt, format_history, LAMP2_TAGS};
pub use report::{
    emit_report, load_report, report_json, DistillationReport, LossTraces, RunReport, SampleResult,
    VariantReport, LOSSES_CSV, REPORT_JSON, SAMPLES_CSV,
};
pub use run::{
    is_test_sample, load_oracle, run_all, run_eval, run_train, write_synthetic, Workspace,
    CLUSTERS_FILE, DATASET_FILE, FEEDBACK_FILE, LOSSES_FILE, ORACLE_FILE, RERANKER_FILE,
    RETRIEVER_FILE, USER_ENCODER_FILE, USER_INDEX_FILE,
};
pub use synth::{generate_synthetic, SyntheticData, SyntheticSpec};
