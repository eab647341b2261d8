//! Deterministic, splittable, counter-based pseudo-random generator.
//!
//! Every stochastic step in this crate (weight init, data synthesis, batch
//! shuffling, augmentation) draws from this generator so that a run is a pure
//! function of its seed on every platform.
//!
//! The algorithm is pinned as follows and must not change without bumping the
//! checkpoint/dataset format versions:
//!
//! * Output `i` of a stream with 64-bit key `k` is
//!   `mix64(k + i * 0x9E3779B97F4A7C15)` (wrapping arithmetic, `i` starting
//!   at 1), where `mix64` is the SplitMix64 finalizer:
//!   `z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
//!    z *= 0x94D049BB133111EB; z ^= z >> 31`.
//! * A root stream uses the user seed directly as its key.
//! * A child stream labeled `s` has key `mix64(k ^ 0x9E3779B97F4A7C15 ^ fnv1a64(s))`,
//!   with FNV-1a over the UTF-8 bytes of the label (offset basis
//!   `0xcbf29ce484222325`, prime `0x100000001b3`).
//! * `next_f64` is `(next_u64() >> 11) * 2^-53`, uniform on `[0, 1)`.
//! * `normal` is one Box-Muller draw consuming exactly two `u64`s, with
//!   `u1 = ((next_u64() >> 11) + 1) * 2^-53` so the logarithm never sees zero.
//!
//! Because the counter never hashes into the key, streams for distinct labels
//! are independent: drawing from one stream does not shift another, which is
//! what lets two pipelines share initialization draws bit-for-bit even when
//! one of them allocates extra components.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a byte slice, 64-bit variant.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Splittable counter-based generator. Cloning forks the current position.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: seed,
            counter: 0,
        }
    }

    /// Derive an independent child stream from `(key, label)`.
    pub fn child(&self, label: &str) -> Rng {
        Rng {
            key: mix64(self.key ^ GAMMA ^ fnv1a64(label.as_bytes())),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(GAMMA.wrapping_mul(self.counter)))
    }

    /// Uniform on `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Uniform integer in `[0, n)`. The modulo bias of ~n/2^64 is irrelevant
    /// for the index ranges used here; determinism is what matters.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// One standard-normal draw (Box-Muller, always consumes two u64s).
    pub fn normal(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * SCALE; // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}
