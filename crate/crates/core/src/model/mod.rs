//! 3D transformer encoder-decoder.
//!
//! The condition (text ids, or the reserved `None` id for video prediction) is
//! embedded, given axis-wise positional encodings and run through an encoder of
//! nearby self-attention layers. The decoder sees the target grid in canonical
//! order, shifted by one behind a learned begin-of-sequence vector; each layer
//! sums causal nearby self-attention and nearby cross-attention to the final
//! encoder output.

mod checkpoint;
mod config;
mod forward;
mod params;
mod sample;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::{LossReduction, ModelConfig};
pub use forward::{
    add_positional, logits, position_weights, AttentionPath, Condition, Graph, ModelVars, NONE_TOKEN,
};
pub use params::{DecoderLayer, EncoderLayer, Ffn, Model, ParamIndex, ParamLayout};
pub use sample::{sample, Strategy};
