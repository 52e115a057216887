//! Counter-based random numbers.
//!
//! Every draw is a pure hash of `(seed, key...)`, so a value depends only on
//! its key and never on evaluation order or thread count. Callers build keys
//! from a domain tag plus indices such as `(pixel, iteration, sample, dim)`.

use std::f64::consts::PI;

/// Domain tags that keep independent consumers from sharing keys.
pub mod domain {
    pub const SHADE: u64 = 1;
    pub const AO: u64 = 2;
    pub const PATH: u64 = 3;
    pub const SURFACE: u64 = 4;
    pub const PIXEL_BATCH: u64 = 5;
    pub const VIEW_PICK: u64 = 6;
    pub const INIT: u64 = 7;
    pub const RESIDUAL_LIGHT: u64 = 8;
    pub const DATASET: u64 = 9;
    pub const RELIGHT: u64 = 10;
    pub const STAGE1: u64 = 11;
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DetRng {
    seed: u64,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        DetRng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// 64 random bits for `key`.
    #[inline]
    pub fn bits(&self, key: &[u64]) -> u64 {
        let mut h = mix64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        for (i, &k) in key.iter().enumerate() {
            h = mix64(h ^ mix64(k.wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))));
        }
        h
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&self, key: &[u64]) -> f64 {
        (self.bits(key) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    #[inline]
    pub fn below(&self, key: &[u64], n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.bits(key) as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller over two derived keys.
    pub fn normal(&self, key: &[u64]) -> f64 {
        let mut k = key.to_vec();
        k.push(0);
        let u1 = self.uniform(&k).max(1e-300);
        *k.last_mut().unwrap() = 1;
        let u2 = self.uniform(&k);
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    /// A sequential cursor over the keys `(tag, 0), (tag, 1), ...`.
    pub fn stream(&self, tag: u64) -> RngStream {
        RngStream {
            rng: *self,
            tag,
            counter: 0,
        }
    }
}

/// Sequential view of a counter-based generator, for single-threaded
/// initialization code.
#[derive(Clone, Debug)]
pub struct RngStream {
    rng: DetRng,
    tag: u64,
    counter: u64,
}

impl RngStream {
    pub fn next_f64(&mut self) -> f64 {
        let v = self.rng.uniform(&[domain::INIT, self.tag, self.counter]);
        self.counter += 1;
        v
    }

    pub fn next_normal(&mut self) -> f64 {
        let v = self.rng.normal(&[domain::INIT, self.tag, self.counter]);
        self.counter += 1;
        v
    }

    pub fn next_below(&mut self, n: usize) -> usize {
        let v = self.rng.below(&[domain::INIT, self.tag, self.counter], n);
        self.counter += 1;
        v
    }
}
