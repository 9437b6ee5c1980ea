//! Dense `f64` numerics with reverse-mode differentiation, plus the sequence
//! encoders, outcome head and optimizer built on top of it.

mod adam;
mod encoder;
mod head;
mod model;
mod params;
mod tape;
mod tensor;

pub use adam::Adam;
pub use encoder::{
    attention_block, gru_cell, positional_encoding, BlockWeights, Encoded, EncoderConfig, EncoderParams,
    EncoderVariant, GruWeights, Mode,
};
pub use head::RegressorParams;
pub use model::{BoundModel, Checkpoint, SeqModel, TREATMENT_WIDTH};
pub use params::ParamSet;
pub use tape::{AttentionLayout, Gradients, Tape, Var};
pub(crate) use tape::euclid;
pub use tensor::DenseTensor;
