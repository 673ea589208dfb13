//! Splittable counter-based random streams.
//!
//! Every stochastic operation draws from an explicitly passed [`RngStream`].
//! Streams are cheap to clone, so a checkpoint can snapshot the exact substate
//! before running a segment and restore it for replay. Substreams are derived
//! by hashing a label into the ChaCha stream id, which keeps sibling streams
//! statistically independent and fully reproducible from the global seed.

use crate::array::DiffArray;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Mix a 64-bit value (splitmix64 finalizer).
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Combine a seed with a label into a derived seed.
pub fn mix_seed(seed: u64, label: u64) -> u64 {
    mix64(seed ^ mix64(label))
}

/// A reproducible, splittable random stream.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    /// Root stream for a global seed.
    pub fn from_seed(seed: u64) -> Self {
        RngStream::new(seed, 0)
    }

    /// Derive an independent child stream; the parent is not advanced.
    pub fn substream(&self, label: u64) -> Self {
        RngStream::new(self.seed, mix_seed(self.stream, label))
    }

    /// Position within the stream (draw counter), for diagnostics.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    pub fn normal_scalar(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, shape: &[usize]) -> DiffArray {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.sample(StandardNormal)).collect();
        DiffArray::new(shape.to_vec(), data).expect("fill_normal shape")
    }

    pub fn fill_uniform(&mut self, lo: f64, hi: f64, shape: &[usize]) -> DiffArray {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(lo..hi)).collect();
        DiffArray::new(shape.to_vec(), data).expect("fill_uniform shape")
    }

    pub fn gen_index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// `k` distinct indices drawn without replacement from `0..n`.
    pub fn choose_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} from {n} without replacement");
        // Partial Fisher-Yates over an index vector.
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.rng.gen_range(0..n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    pub fn shuffle(&mut self, items: &mut [usize]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            items.swap(i, j);
        }
    }
}
