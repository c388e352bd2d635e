//! Toy dual-stream denoiser, rectified-flow sampling with closed-loop
//! feedback, and the dual-task training objective.

mod config;
mod model;
mod sampler;
mod train;

pub use config::{Ablations, DiTConfig, FeedbackConfig};
pub use model::{stream_layouts, BlockParams, DiTParams, DiTWeights, DualStreamModel, ForwardOutput, StreamInput};
pub use sampler::{
    euler_sample, feedback_gate, one_step_x0, sample, sigma_at, DenoiseState, GuidanceClients, SampleFailure,
    SampleOutput, SampleRequest, StepRecord, Trace,
};
pub use train::{
    adapter_pretrain_step, batch_loss, noisy_latent, rectified_flow_loss, train_step, AdapterGradients, PretrainItem,
    TrainItem, TrainOutput,
};
