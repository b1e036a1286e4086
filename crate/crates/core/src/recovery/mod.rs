//! Accuracy recovery after surgery: the mimic loss, fine-tuning and the
//! round-by-round pruning pipeline.

pub mod finetune;
pub mod loss;
pub mod pipeline;

pub use finetune::{finetune, FinetuneConfig, FinetuneOutcome};
pub use loss::{cross_entropy_with_grad, mimic_ce_grad, mimic_ce_loss, mimic_ce_with_grad, DistillLossInputs};
pub use pipeline::{run_pipeline, run_pipeline_with, PipelineOutcome};
