//! Counter-based random streams.
//!
//! Every random draw in the crate is a pure function of a [`StreamKey`] and
//! an integer counter: `draw = splitmix64(key ^ splitmix64(counter))`.
//! Results therefore do not depend on evaluation order or thread count.
//! Keys are derived hierarchically (seed -> domain -> example id -> target)
//! with [`StreamKey::derive`] so unrelated consumers never share a stream.

/// SplitMix64 finalizer.
#[inline]
pub const fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a, used to turn example ids into key components.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Domain tags separating the streams of different consumers.
pub mod domain {
    pub const ABLATION: u64 = 0x01;
    pub const LDS: u64 = 0x02;
    pub const BATCH: u64 = 0x03;
    pub const TARGET_CHOICE: u64 = 0x04;
    pub const RANDOM_PRUNE: u64 = 0x05;
    pub const PLANTED: u64 = 0x06;
    pub const PLANTED_NOISE: u64 = 0x07;
    pub const TOY_WEIGHTS: u64 = 0x08;
    pub const TOY_DATA: u64 = 0x09;
    pub const ESM: u64 = 0x0A;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey(pub u64);

impl StreamKey {
    pub const fn new(seed: u64) -> Self {
        StreamKey(seed)
    }

    pub const fn derive(self, component: u64) -> StreamKey {
        StreamKey(splitmix64(self.0 ^ splitmix64(component ^ 0xD6E8_FEB8_6659_FD93)))
    }

    pub fn derive_str(self, s: &str) -> StreamKey {
        self.derive(fnv1a(s.as_bytes()))
    }

    #[inline]
    pub const fn u64_at(self, counter: u64) -> u64 {
        splitmix64(self.0 ^ splitmix64(counter))
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform_at(self, counter: u64) -> f64 {
        (self.u64_at(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1)`; never returns zero.
    #[inline]
    pub fn open_uniform_at(self, counter: u64) -> f64 {
        ((self.u64_at(counter) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn bit_at(self, counter: u64) -> bool {
        self.u64_at(counter) >> 63 == 1
    }

    /// Standard normal via Box-Muller over counters `2c` and `2c + 1`.
    pub fn gaussian_at(self, counter: u64) -> f64 {
        let u1 = self.open_uniform_at(counter.wrapping_mul(2));
        let u2 = self.uniform_at(counter.wrapping_mul(2).wrapping_add(1));
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Exponential with mean 1.
    pub fn exponential_at(self, counter: u64) -> f64 {
        -self.open_uniform_at(counter).ln()
    }

    /// Uniform integer in `0..n` (n > 0) by multiply-shift.
    pub fn index_at(self, counter: u64, n: usize) -> usize {
        ((self.u64_at(counter) as u128 * n as u128) >> 64) as usize
    }

    pub fn stream(self) -> Stream {
        Stream {
            key: self,
            counter: 0,
        }
    }
}

/// Sequential view over a keyed stream.
#[derive(Debug, Clone)]
pub struct Stream {
    key: StreamKey,
    counter: u64,
}

impl Stream {
    fn bump(&mut self) -> u64 {
        let c = self.counter;
        self.counter += 1;
        c
    }

    pub fn uniform(&mut self) -> f64 {
        let c = self.bump();
        self.key.uniform_at(c)
    }

    pub fn gaussian(&mut self) -> f64 {
        let c = self.bump();
        self.key.gaussian_at(c)
    }

    pub fn exponential(&mut self) -> f64 {
        let c = self.bump();
        self.key.exponential_at(c)
    }

    pub fn index(&mut self, n: usize) -> usize {
        let c = self.bump();
        self.key.index_at(c, n)
    }

    /// `k` distinct indices from `0..n` via partial Fisher-Yates.
    pub fn choose(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k.min(n) {
            let j = i + self.index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k.min(n));
        pool
    }
}
