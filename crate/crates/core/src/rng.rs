//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit `Rng`; experiments derive
//! independent ChaCha streams from one master seed so that parallel chains
//! never share state and results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ChainRng = ChaCha8Rng;

/// Independent stream `stream` of the generator seeded by `master`.
pub fn stream(master: u64, stream: u64) -> ChainRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

/// Stream identifiers used by the experiment drivers.
pub mod streams {
    pub const PHANTOM: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const STAGE1: u64 = 3;
    /// Stage-2 inclusion `i` uses `STAGE2_BASE + i`.
    pub const STAGE2_BASE: u64 = 1000;
}
