//! Completion network, training loop and evaluation.

mod config;
mod eval;
mod net;
mod optim;
mod train;

pub use config::{FoldGrid, ModelConfig};
pub use eval::{evaluate, evaluate_predictions, predict, EvalTable, AVG_ROW, EVAL_CSV_HEADER};
pub use net::{
    analytic_macs, analytic_param_count, fold_seeds, positional_encoding, stack_clouds, Completion,
    Decoder, Model, TrainNodes, FOLD_SEED_EXTENT,
};
pub use optim::AdamW;
pub use train::{
    load_model, loss_csv, train_loop, StepOutput, TrainReport, Trainer, CONFIG_SNAPSHOT,
    DIVERGENCE_LIMIT, FINAL_CHECKPOINT, LOSS_CSV_HEADER,
};
