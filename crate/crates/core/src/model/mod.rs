//! Patch-token body transformer with a global token, three region-local
//! tokens, global-local fusion and LoRA adapters.

mod checkpoint;
mod config;
mod layers;
mod vit;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, read_checkpoint_header, save_checkpoint,
    CheckpointHeader, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use config::{LoraConfig, ModelConfig, Region, RegionMask, RegionRows, RowRange};
pub use layers::{softmax_last, LoraAdapter, ParamMap};
pub use vit::{
    attention_mask, average_local, average_regions, BodyTransformer, FeatureBundle, Fusion,
};
