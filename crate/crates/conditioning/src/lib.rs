//! Toy-scale conditioning networks and their training objective.
//!
//! A motion encoder turns motion guidance into six taps that gate the
//! denoiser's spatial-attention outputs; an illumination encoder adds a
//! zero-initialised feature map at the denoiser input; audio enters through
//! cross-attention behind an expression-driven AdaLN. Training runs in two
//! stages and inference samples with DDPM.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod latent;
pub mod layers;
pub mod loss;
pub mod nets;
pub mod objective;
pub mod optim;
pub mod schedule;
pub mod shapes;
pub mod train;

pub use checkpoint::{
    decode_checkpoint, decode_checkpoint_meta, encode_checkpoint, load_checkpoint, save_checkpoint,
    Checkpoint, CheckpointMeta,
};
pub use config::{NetConfig, OptimizerKind, ScheduleConfig, TrainConfig};
pub use error::{Error, Result};
pub use infer::{infer, InferMode, InferOptions, InferRequest};
pub use layers::{adaln_modulate, gate_fuse, Fwd};
pub use loss::{loss_latent, loss_spatial, loss_total, Perceptual};
pub use nets::{
    adaln_head, denoise_predict, illumination_encode, motion_encode, param_layout, reference_encode,
    Conditions, FrameInput, NetBundle,
};
pub use schedule::{diffusion_forward, spatial_weight, DiffusionSchedule};
pub use shapes::{plan_shapes, ShapePlan};
pub use train::{loss_log_csv, train, LossRecord, TrainOutcome};
pub use gradcheck::{check_network_gradients, GradCheckOutcome, GRAD_TOLERANCE};
