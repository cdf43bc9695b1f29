//! Named random sub-streams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Grid;

/// Every consumer of randomness draws from its own stream so that toggling
/// one component never shifts the numbers another component sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    WarmupNoise,
    QueueInit,
    TailNoise,
    RenoiseNoise,
    ToyWeights,
    Scene,
    Condition,
    Test,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::WarmupNoise => 1,
            Stream::QueueInit => 2,
            Stream::TailNoise => 3,
            Stream::RenoiseNoise => 4,
            Stream::ToyWeights => 5,
            Stream::Scene => 6,
            Stream::Condition => 7,
            Stream::Test => 99,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Sub-stream keyed by an extra integer (for example a subject id).
pub fn keyed_stream(seed: u64, which: Stream, key: u64) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .rotate_left(17)
        ^ key.wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(which.id());
    rng
}

pub fn gaussian_grid<R: rand::Rng>(rng: &mut R, shape: (usize, usize, usize)) -> Grid {
    Grid::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}
