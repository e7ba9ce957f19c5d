//! Run configuration, training loops, evaluation, checkpoints and the
//! gradient-check suite behind the command-line tool.

mod config;
mod gradsuite;
mod pipeline;
mod train;

pub use config::{
    parse_toml_with_overrides, DataConfig, OptimizerConfig, OptimizerKind, RunConfig,
    CONFIG_VERSION, ENV_OUTPUT_DIR, ENV_THREADS,
};
pub use gradsuite::{
    grad_check_suite, tiny_config, tiny_corpus, GradCheckRow, SUITE_EPS, SUITE_RTOL,
};
pub use pipeline::{
    Checkpoint, Decoded, FeatureNorm, NluTargets, Pipeline, SavedTensor, ASR_PREFIX, NLU_PREFIX,
};
pub use train::{
    evaluate, evaluate_reference_text, load_splits, run, thread_pool, train_independent,
    train_joint, train_on, write_outputs, EpochLog, Phase, RunOutcome, RunReport,
};
