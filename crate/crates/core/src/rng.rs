//! Seeded random number generation shared by every stochastic component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The generator used throughout the crate. ChaCha is portable, so a seed
/// reproduces the same stream on every platform.
pub type DfaRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DfaRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Serializable position of a [`DfaRng`], enough to resume the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &DfaRng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> DfaRng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
