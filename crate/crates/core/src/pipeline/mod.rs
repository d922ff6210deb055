//! End-to-end experiment orchestration: configuration, the staged run
//! directory, and the in-memory building blocks the stages share.

mod config;
mod experiment;
mod run;

pub use config::{validate_config, CalibrationSection, ExperimentConfig, GenerationConfig, LmDims, NGramConfig};
pub use experiment::{
    bias_lexicon, continuation_texts, files, evaluate_mode, generate_records, generation_plan, lm_config, naive_records,
    split_corpus, synth_corpus, tradeoff_calibration, tradeoff_sweep, train_debias_head, train_judge,
    train_language_model, vanilla_ngram, Artifacts, PlanItem, Splits, TrainingSummary,
};
pub use run::{config_hash, generations_file, traces_file, GenerateOptions, Run, RunManifest, Stage, StageFailure, StageRecord, TOOL_VERSION};
