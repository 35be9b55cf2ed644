//! Deterministic random number generation.
//!
//! Every seeded op in the runtime draws from [`Xoshiro256StarStar`], so a
//! fixed `(shape, seed)` pair yields bitwise-identical output on every run
//! and on every thread. State layout:
//!
//! * four `u64` words, initialized from the user seed by iterating
//!   SplitMix64 four times;
//! * `next_u64` is the xoshiro256** scramble (`rotl(s1 * 5, 7) * 9`)
//!   followed by the linear engine update;
//! * uniform doubles take the top 53 bits and map them to the open
//!   interval (0, 1) as `(bits + 0.5) / 2^53`, so `ln` never sees zero;
//! * standard normals come from the Box-Muller transform, two per pair of
//!   uniforms, with the spare cached.

/// SplitMix64 step, used for seeding and for deriving independent
/// sub-seeds (e.g. one per data-loader worker).
pub fn split_mix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a named sub-seed from a root seed. Used to give parameter init,
/// data generation, and per-op noise independent streams.
pub fn derive_seed(root: u64, tag: u64) -> u64 {
    let mut s = root ^ tag.wrapping_mul(0x9e3779b97f4a7c15);
    split_mix64(&mut s)
}

/// xoshiro256** generator.
#[derive(Debug, Clone)]
pub struct Xoshiro256StarStar {
    s: [u64; 4],
    spare_normal: Option<f64>,
}

impl Xoshiro256StarStar {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            split_mix64(&mut sm),
            split_mix64(&mut sm),
            split_mix64(&mut sm),
            split_mix64(&mut sm),
        ];
        Xoshiro256StarStar {
            s,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform double in the open interval (0, 1).
    pub fn next_open01(&mut self) -> f64 {
        let bits = self.next_u64() >> 11; // top 53 bits
        (bits as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Uniform double in the half-open interval [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        let bits = self.next_u64() >> 11;
        bits as f64 / (1u64 << 53) as f64
    }

    /// Uniform integer in [0, bound), unbiased (Lemire multiply-shift
    /// with rejection).
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let mut m = (self.next_u64() as u128) * (bound as u128);
        let mut low = m as u64;
        if low < bound {
            let threshold = bound.wrapping_neg() % bound;
            while low < threshold {
                m = (self.next_u64() as u128) * (bound as u128);
                low = m as u64;
            }
        }
        (m >> 64) as u64
    }

    /// Standard normal sample via Box-Muller; one spare is cached.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_open01();
        let u2 = self.next_open01();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Seed-deterministic Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
