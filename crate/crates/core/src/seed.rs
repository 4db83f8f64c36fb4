//! Named, deterministic random streams derived from one master seed.
//!
//! A stream's seed is `SHA-256("deacl/stream" || master_le || name)`, used
//! as the 32-byte key of a ChaCha8 generator. Distinct names give
//! independent generators; the same `(master, name)` pair always gives the
//! same sequence. Nothing is ever seeded from the clock.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    master: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, name: &str) -> StreamRng {
        let mut h = Sha256::new();
        h.update(b"deacl/stream");
        h.update(self.master.to_le_bytes());
        h.update(name.as_bytes());
        StreamRng::from_seed(h.finalize().into())
    }

    /// Stream for `name` further keyed by a tuple of counters, e.g.
    /// `(epoch, sample index, view)`.
    pub fn keyed(&self, name: &str, keys: &[u64]) -> StreamRng {
        let mut full = String::with_capacity(name.len() + keys.len() * 8);
        full.push_str(name);
        for k in keys {
            full.push('/');
            full.push_str(&k.to_string());
        }
        self.stream(&full)
    }

    /// Child namespace: streams of the child never coincide with the parent's.
    pub fn child(&self, name: &str) -> SeedStreams {
        use rand::RngCore;
        SeedStreams {
            master: self.stream(&format!("child:{name}")).next_u64(),
        }
    }
}
