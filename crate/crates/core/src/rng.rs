//! Deterministic random streams.
//!
//! All stochastic choices in the crate flow through [`SeedRng`], a ChaCha8
//! generator whose full state (seed, stream id, word position) can be captured
//! and restored, which is what makes bit-exact checkpoint resume possible.
//! Independent purposes draw from independent streams derived statelessly from
//! the run seed, so e.g. the epoch-shuffle sequence does not depend on how many
//! noise samples the trainer consumed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stream tags: one per independent consumer of randomness.
pub mod stream {
    pub const PHANTOM: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const MODEL_INIT: u64 = 4;
    pub const INFERENCE: u64 = 5;
    pub const EVAL: u64 = 6;
}

/// Seeded ChaCha8 generator with capturable state.
#[derive(Debug, Clone)]
pub struct SeedRng {
    inner: ChaCha8Rng,
}

/// Serializable snapshot of a [`SeedRng`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte ChaCha seed, hex encoded.
    pub seed_hex: String,
    /// ChaCha stream id.
    pub stream: u64,
    /// 128-bit word position, hex encoded.
    pub word_pos_hex: String,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedRng {
    /// Generator for `(seed, stream)`; position starts at zero.
    pub fn new(seed: u64, stream_tag: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_tag);
        SeedRng { inner }
    }

    /// Stateless derivation of a sub-generator, e.g. `(seed, SHUFFLE, epoch)`.
    ///
    /// The extra tags are folded into the seed so that every `(stream, tags)`
    /// combination yields an independent sequence regardless of draw order
    /// elsewhere.
    pub fn derive(seed: u64, stream_tag: u64, tags: &[u64]) -> Self {
        let mut s = splitmix64(seed ^ 0xa076_1d64_78bd_642f);
        for &t in tags {
            s = splitmix64(s ^ splitmix64(t));
        }
        SeedRng::new(s, stream_tag)
    }

    /// Capture the complete generator state.
    pub fn state(&self) -> RngState {
        RngState {
            seed_hex: hex_encode(&self.inner.get_seed()),
            stream: self.inner.get_stream(),
            word_pos_hex: format!("{:032x}", self.inner.get_word_pos()),
        }
    }

    /// Restore a generator from a captured state.
    pub fn from_state(state: &RngState) -> crate::Result<Self> {
        let seed_bytes = hex_decode(&state.seed_hex)
            .ok_or_else(|| crate::Error::Checkpoint("bad rng seed hex".into()))?;
        if seed_bytes.len() != 32 {
            return Err(crate::Error::Checkpoint("rng seed must be 32 bytes".into()));
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&seed_bytes);
        let word_pos = u128::from_str_radix(&state.word_pos_hex, 16)
            .map_err(|_| crate::Error::Checkpoint("bad rng word position".into()))?;
        let mut inner = ChaCha8Rng::from_seed(seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(word_pos);
        Ok(SeedRng { inner })
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.random_range(lo..hi)
    }

    /// Standard normal draw (f64 stream).
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(rand_distr::StandardNormal)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Deterministic permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    /// Weighted sampling of `k` distinct indices from `weights`, by exponent
    /// keys (Efraimidis-Spirakis): draw `u_i`, rank by `u_i^(1/w_i)`.
    ///
    /// Zero-weight items are never selected while any positive-weight item
    /// remains. Uniform weights reduce to unweighted sampling with the same
    /// number of generator draws, because the key transform is monotone.
    pub fn weighted_indices(&mut self, weights: &[f64], k: usize) -> Vec<usize> {
        assert!(
            k <= weights.len(),
            "cannot sample {k} from {} items",
            weights.len()
        );
        let mut keyed: Vec<(f64, usize)> = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let u = self.uniform();
                let key = if w > 0.0 { u.powf(1.0 / w) } else { -1.0 };
                (key, i)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut out: Vec<usize> = keyed[..k].iter().map(|&(_, i)| i).collect();
        out.sort_unstable();
        out
    }

    /// Access the raw generator (for `rand_distr` sampling at a given dtype).
    pub fn raw(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len() / 2)
        .map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok())
        .collect()
}
