//! Named random substreams derived from one scenario seed, so enabling or
//! disabling one component never shifts the draws of another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stream {
    Arrivals,
    Degradation,
    /// Selection and routing draws of one broker.
    Selection(u32),
    Workload,
}

impl Stream {
    pub fn id(self) -> u64 {
        match self {
            Stream::Arrivals => 1,
            Stream::Degradation => 2,
            Stream::Workload => 3,
            Stream::Selection(b) => 1_000 + u64::from(b),
        }
    }
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}
