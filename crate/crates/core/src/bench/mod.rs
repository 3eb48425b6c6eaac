//! Configuration, training pipeline and vanilla-vs-speculative benchmarks.

mod config;
mod pipeline;
mod report;
mod selftest;

pub use config::{AppConfig, BenchConfig, TrainingSection};
pub use pipeline::{
    build_corpus, corpus_with, teacher_pool, train_draft_stage, train_drafts_stage, train_target_stage, Artifacts,
};
pub use report::{
    ablation_summary, bench_prompts, check_consistency, emit_plots, output_paths, read_reports, recount_tau,
    reports_csv, run_ablation, run_bench, run_cell, task_prompts, write_run, AblationSummary, BenchReport,
    BenchRun, CellSpec, StepRecord,
};
pub use selftest::{selftest, SelfCheck};
