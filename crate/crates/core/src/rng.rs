//! Keyed random streams.
//!
//! Every tensor gets its own ChaCha stream whose key is derived from
//! `(seed, purpose, tensor name)`. Element `i` of a tensor always consumes
//! the `i`-th draw of that stream, so results do not depend on which other
//! tensors exist or on the order in which tensors are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    DropMask,
    Magnitude,
    Init,
    Data,
}

impl Purpose {
    fn tag(self) -> &'static [u8] {
        match self {
            Purpose::DropMask => b"drop-mask",
            Purpose::Magnitude => b"magnitude",
            Purpose::Init => b"init",
            Purpose::Data => b"data",
        }
    }
}

pub fn substream(seed: u64, purpose: Purpose, name: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((purpose.tag().len() as u64).to_le_bytes());
    hasher.update(purpose.tag());
    hasher.update(name.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    ChaCha20Rng::from_seed(key)
}
