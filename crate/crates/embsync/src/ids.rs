use embsync_core::message::IdGen;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Random v4 UUIDs from a seeded stream, so a fixed seed replays the same ids.
#[derive(Debug, Clone)]
pub struct SeededIds {
    rng: ChaCha8Rng,
}

impl SeededIds {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl IdGen for SeededIds {
    fn next_id(&mut self) -> String {
        let mut bytes = [0u8; 16];
        self.rng.fill_bytes(&mut bytes);
        uuid::Builder::from_random_bytes(bytes).into_uuid().to_string()
    }
}
