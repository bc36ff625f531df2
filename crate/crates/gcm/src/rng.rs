//! Seeded counter-based randomness.
//!
//! Everything stochastic in the crate draws from ChaCha streams derived
//! from a single user seed: the 64-bit stream id encodes a named purpose
//! in the top byte and a counter (replication index, chunk index, ...) in
//! the remaining bits. Replications therefore consume independent streams
//! no matter how the work is scheduled, and a backend drawing more or
//! fewer variates cannot desynchronise its neighbours.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named purpose of a derived stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Data generation inside the simulation engine.
    Model,
    /// Randomness a test itself consumes (Monte-Carlo calibration draws).
    Test,
    /// Stand-alone Monte-Carlo quantile computations.
    Mc,
    /// The half-sample split of the conditional-covariance estimator.
    Split,
    /// The hidden-null sampler.
    Hiding,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Model => 1,
            Stream::Test => 2,
            Stream::Mc => 3,
            Stream::Split => 4,
            Stream::Hiding => 5,
        }
    }
}

/// The ChaCha stream for `(seed, stream, index)`.
pub fn substream(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    assert!(index < (1 << 56), "stream index out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream.tag() << 56) | index);
    rng
}
