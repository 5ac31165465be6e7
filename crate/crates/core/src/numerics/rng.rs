//! Keyed random streams.
//!
//! Every random draw in the simulator comes from a stream addressed by
//! `(seed, purpose, client, round)`. Two streams with the same key produce the
//! same sequence no matter which other streams were consumed before, so the
//! outcome of a run never depends on scheduling.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Init = 1,
    ClientSelection = 2,
    NegativeSampling = 3,
    Shuffle = 4,
    Dropout = 5,
    LocalNoise = 6,
    CentralNoise = 7,
    EvalNegatives = 8,
    Features = 9,
    Synthetic = 10,
    KMeans = 11,
    Pretrain = 12,
    HashParams = 13,
    AdapterInit = 14,
    UserInit = 15,
}

/// Address of a stream within one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub purpose: Purpose,
    pub client: u64,
    pub round: u64,
}

impl StreamKey {
    pub fn new(purpose: Purpose, client: u64, round: u64) -> Self {
        Self {
            purpose,
            client,
            round,
        }
    }

    /// Key for server-side or one-off streams.
    pub fn global(purpose: Purpose) -> Self {
        Self::new(purpose, u64::MAX, 0)
    }
}

/// A deterministic random stream backed by ChaCha8.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    key: StreamKey,
    inner: ChaCha8Rng,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, key: &StreamKey) -> [u8; 32] {
    let mut state = seed;
    for field in [key.purpose as u64, key.client, key.round] {
        let mut mixed = state ^ field.wrapping_mul(GOLDEN).rotate_left(17);
        state = splitmix64(&mut mixed);
    }
    let mut out = [0u8; 32];
    for chunk in out.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    out
}

impl RngStream {
    pub fn new(seed: u64, key: StreamKey) -> Self {
        Self {
            seed,
            key,
            inner: ChaCha8Rng::from_seed(derive_seed(seed, &key)),
        }
    }

    pub fn global(seed: u64, purpose: Purpose) -> Self {
        Self::new(seed, StreamKey::global(purpose))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }

    /// A child stream whose key differs only in `round`; used for
    /// sub-sequences such as per-level or per-epoch draws.
    pub fn fork(&self, round: u64) -> RngStream {
        let mut key = self.key;
        key.round = key.round.wrapping_mul(1_000_003).wrapping_add(round + 1);
        RngStream::new(self.seed, key)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn draws(mut r: RngStream) -> Vec<u64> {
        (0..8).map(|_| r.random()).collect()
    }

    #[test]
    fn same_key_same_sequence() {
        let key = StreamKey::new(Purpose::Dropout, 3, 7);
        assert_eq!(
            draws(RngStream::new(11, key)),
            draws(RngStream::new(11, key))
        );
    }

    #[test]
    fn independent_of_other_streams() {
        let key = StreamKey::new(Purpose::Shuffle, 1, 1);
        let mut other = RngStream::new(5, StreamKey::new(Purpose::Shuffle, 2, 1));
        let _: u64 = other.random();
        assert_eq!(draws(RngStream::new(5, key)), draws(RngStream::new(5, key)));
    }

    #[test]
    fn distinct_keys_differ() {
        let a = draws(RngStream::new(5, StreamKey::new(Purpose::LocalNoise, 1, 1)));
        let b = draws(RngStream::new(5, StreamKey::new(Purpose::LocalNoise, 2, 1)));
        let c = draws(RngStream::new(5, StreamKey::new(Purpose::LocalNoise, 1, 2)));
        let d = draws(RngStream::new(6, StreamKey::new(Purpose::LocalNoise, 1, 1)));
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_ne!(b, c);
    }
}
