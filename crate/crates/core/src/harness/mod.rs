//! Synthetic paired-modality data, episodic sampling, a toy detection head
//! and the two-stage training loop.

pub mod data;
pub mod episode;
pub mod model;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use data::{generate_synthetic, load_index, write_index, DatasetIndex, MapStore, Modality, SynthConfig};
pub use episode::{build_supports, sample_episode, Episode, EpisodeConfig, SplitSpec, Stage, SupportSet};
pub use model::{infer, precompute_prototypes, toy_head, train_loss, ModelConfig, ToyHeadParams};
pub use train::{run_training, TrainConfig, TrainOutcome};

/// Deterministic generator for sub-stream `stream` of `master`.
pub fn rng_stream(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}
