//! One master seed expanded into independent named streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const DATA_ORDER: &str = "data_order";
pub const DROPOUT: &str = "dropout";
pub const INIT: &str = "init";
pub const SAMPLING: &str = "sampling";

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

    /// 64-bit seed for `name`, further split by `index` (epoch, step, sample...).
    pub fn seed(&self, name: &str, index: u64) -> u64 {
        let mut h = Sha256::new();
        h.update(self.master.to_le_bytes());
        h.update(name.as_bytes());
        h.update([0]);
        h.update(index.to_le_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    /// Seed for `name` split by a string key such as a sample id.
    pub fn seed_for_key(&self, name: &str, key: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(key.as_bytes());
        let d = h.finalize();
        self.seed(name, u64::from_le_bytes(d[..8].try_into().expect("8 bytes")))
    }

    pub fn rng(&self, name: &str, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(name, index))
    }
}
