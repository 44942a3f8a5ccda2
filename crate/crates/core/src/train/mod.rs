//! Training: hand-derived gradients with straight-through TopK, Adam,
//! progressive sparsity, token sampling, and dead-latent revival.

mod config;
mod grad;
mod optim;
mod revival;
mod sampling;
mod trainer;

pub use config::{sparsity_at, Rate, SparsityKind, SparsitySchedule, TrainConfig};
pub use grad::{forward_backward, BatchStats, Grads, ModulatorGrads, SparsityMode};
pub use optim::{optimizer_step, AdamConfig, Moments, OptimState};
pub use revival::{detect_and_revive, DeadLatentTracker, WorstToken, WorstTokens};
pub use sampling::{sample_tokens, BatchStream};
pub use trainer::{
    init_params, load_table, log_path_for, resolve_steps, smooth, state_path_for, train, StepLog,
    Trainer, TrainingLog, TOOL_VERSION,
};
