//! Training loop, evaluation and the multi-seed experiment runner.

mod config;
mod eval;
mod experiment;
mod train;

pub use config::{ContrastiveMode, ExperimentConfig};
pub use eval::{argmax_labels, evaluate, Confusion, Evaluation};
pub use experiment::{
    class_name, compare, run_experiment, run_id, run_seed, summarize, CompareReport, CompareRow,
    EpochRecord, RunMetrics, RunOptions, RunSummary, SeedResult, Stat,
};
pub use train::{contrastive_terms, ContrastiveTerms, SetLog, StepLog, Trainer};
