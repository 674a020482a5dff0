//! Counter-style random streams keyed by `(master seed, replica, label)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const DOMAIN_TAG: &[u8] = b"logfield-v1";

/// Identifies one random stream. Equal triples give equal streams.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub replica_index: u64,
    pub stream_label: String,
}

impl SeedSpec {
    pub fn new(master_seed: u64, replica_index: u64, stream_label: impl Into<String>) -> Self {
        Self { master_seed, replica_index, stream_label: stream_label.into() }
    }

    /// Same master seed and label, another replica.
    pub fn replica(&self, replica_index: u64) -> Self {
        Self { replica_index, ..self.clone() }
    }

    /// Same master seed and replica, label extended with `/suffix`.
    pub fn child(&self, suffix: &str) -> Self {
        Self { stream_label: format!("{}/{suffix}", self.stream_label), ..self.clone() }
    }

    /// The 256-bit key of this stream.
    pub fn key(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(DOMAIN_TAG);
        h.update(self.master_seed.to_le_bytes());
        h.update(self.replica_index.to_le_bytes());
        h.update((self.stream_label.len() as u64).to_le_bytes());
        h.update(self.stream_label.as_bytes());
        h.finalize().into()
    }

    pub fn rng(&self) -> ChaCha12Rng {
        ChaCha12Rng::from_seed(self.key())
    }
}

/// `n` standard normal draws.
pub fn normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}
