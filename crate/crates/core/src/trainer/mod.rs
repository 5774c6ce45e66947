//! Fine-tuning loop, baselines and pretraining.
//!
//! Every step builds the loss on a fresh tape, filters expert gradients by
//! the specialization masks, restricts the update to the groups the policy
//! allows, and takes one optimizer step. Under DES_MOE the schedule decides
//! the groups; FFT trains everything; STATIC_ESFT trains a fixed expert subset
//! picked once from routing statistics before training.

mod config;
mod finetune;
mod grads;
mod metrics;
mod pretrain;

pub use config::{Policy, PretrainConfig, TrainConfig};
pub use finetune::{run_finetune, FinetuneOutcome, Finetuner, StepReport};
pub use grads::{accumulate_batch, affinity_positions, compute_gradients, task_loss, LossSpec, StepGrads};
pub use metrics::{forgetting_report, metrics_csv, parse_metrics_csv, Event, ForgettingReport, MetricsRecord};
pub use pretrain::{pretrain, pretrain_batch, PretrainOutcome};
