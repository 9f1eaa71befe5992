//! Image-to-triplane reconstructors with motion cross-attention.

mod checkpoint;
mod model;
mod motion;
mod params;

pub use checkpoint::{read_tensors, write_tensors, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{
    cross_attention_block, cross_attention_on_tape, is_motion_param, Mode, ToyConfig, ToyReconstructor,
};
pub use motion::{MotionEmbedding, MotionStub};
pub use params::{ParamVars, ParameterSet, Tensor};
