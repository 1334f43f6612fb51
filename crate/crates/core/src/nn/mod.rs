//! Parameters, layers, optimizer and checkpoints.

mod checkpoint;
mod layers;
mod optim;
mod params;

pub use checkpoint::{Checkpoint, VERSION as CHECKPOINT_VERSION};
pub use layers::{AttnBlock, Conv2d, Linear, ResBlock};
pub use optim::{cosine_lr, AdamW};
pub use params::{init_rng, Init, ParamId, ParamStore};
