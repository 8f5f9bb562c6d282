//! Stage orchestration: the training loop, the individual stages and the
//! strategies built from them.

pub mod runlog;
pub mod stages;
pub mod strategy;
pub mod trainer;

pub use runlog::RunLog;
pub use stages::{
    run_distillation_stage, run_finetune_stage, run_ssl_stage, run_supervised_stage, sample_digest, stage_key,
    verify_handoff, Init, Run, StageOutput, StagePlace, StageResult, RESULT_FILE, WEIGHTS_FILE,
};
pub use strategy::{run_strategies, Datasets, Experiment, StrategyReport, TrainingStrategy};
pub use trainer::{train, EarlyStopState, LoopOutcome, LoopSpec, Model, StepOutput, Validation};
