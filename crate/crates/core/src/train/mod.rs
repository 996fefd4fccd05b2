//! Training loop, checkpoints, evaluation and benchmarking.

mod ablate;
mod bench;
pub mod checkpoint;
mod config;
mod eval;
mod optim;
mod run;
mod state;
mod step;

pub use ablate::{render_table, run_ablation, AblationRow};
pub use bench::{monotonicity_violations, throughput_bench, BenchRow, MIN_REPEATS};
pub use config::{CorpusConfig, OptimConfig, RunConfig, TrainConfig, CONFIG_VERSION};
pub use eval::{
    chance_recall_at_1, class_prompt_rows, embed_images, embed_texts, evaluate, recall_at_k, zero_shot_accuracy,
    Encoder, EvalReport, Recall, CLASS_COUNT,
};
pub use optim::{learning_rate, AdamW};
pub use run::{eval_corpus, read_metrics, run_training, train_corpus, TrainOutcome, FINAL_CHECKPOINT, METRICS_CSV, TIMING_CSV};
pub use state::{Model, TrainState};
pub use step::{build_graph, dump_non_finite, train_step, MetricsRow, StepGraph};
