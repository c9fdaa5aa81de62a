//! Three-player training: discriminator ascent followed by joint descent of
//! the generator, mask generator and inference network.

mod baseline;
mod checkpoint;
mod config;
mod model;
mod session;
mod step;

pub use baseline::{cross_entropy, split_images, train_supervised};
pub use checkpoint::{load_checkpoint, read_meta, save_checkpoint, CheckpointMeta, META_FILE, PARAMS_FILE};
pub use config::{GeneratorSection, Precision, TrainConfig};
pub use model::{latent_seed, mix64, DataConsensus, DclModel, LatentConsensus};
pub use session::{run, train, TrainOptions, TrainSummary, FINAL_CHECKPOINT, METRICS_FILE};
pub use step::{forward, train_step, Forward, TrainState};
