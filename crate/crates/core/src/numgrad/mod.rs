//! Dense tensors, reverse-mode autodiff, the layer catalog, Adam and the
//! step learning-rate schedule.

mod gradcheck;
mod layers;
mod loss;
mod optim;
mod real;
mod store;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheckOptions, GradCheckReport};
pub use layers::{Layer, LayerSpec, Mode, Session, BN_EPS, BN_MOMENTUM, DROPOUT_RATE};
pub use loss::{loss, LossKind};
pub use optim::{adam_step, step_lr, AdamConfig, AdamState, StepLr};
pub use real::Real;
pub use store::{parse_checkpoint, CheckpointRecord, ParameterStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tape::{ChannelGeom, ConvGeom, Gradients, Tape, Var, PROB_CLAMP};
pub use tensor::Tensor;
