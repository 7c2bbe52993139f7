//! Model assembly, loss, optimization, metrics, checkpoints and training.

pub mod ablation;
pub mod checkpoint;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{loss_total, CharbonnierMode, LossConfig};
pub use metrics::{psnr, ssim, SsimConfig, PSNR_CAP};
pub use model::{iagc_forward, GammaVariant, IagcConfig, IagcModel, StageOutputs};
pub use optim::{adam_step, lr_schedule, AdamConfig, AdamState};
pub use train::{StepRecord, TrainConfig, TrainSummary, Trainer};
