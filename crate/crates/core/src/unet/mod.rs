//! The fully convolutional 1-D U-net mapping white noise to velocity
//! increments, and its checkpoint format.

mod checkpoint;
mod model;
mod spec;

pub use checkpoint::{
    checkpoint_hash, decode_checkpoint, encode_checkpoint, load_checkpoint, model_digest, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION, PRECISION_F64,
};
pub use model::{BnRunning, Mode, UNetModel};
pub use spec::{ConvSpec, ModelSpec, SkipSpec, ALLOWED_KERNELS};

/// Build a model with the default architecture.
pub fn build_model(seed: u64) -> UNetModel {
    UNetModel::build(ModelSpec::default(), seed).expect("default spec is valid")
}
