//! Counter-based random numbers (Philox4x32-10).
//!
//! Every random draw in the crate comes from a [`Stream`]: a 64-bit key (the
//! seed) plus a 64-bit stream id, with a 64-bit block counter. Block `n` of
//! stream `s` under key `k` is
//!
//! ```text
//! philox4x32_10(counter = [lo(n), hi(n), lo(s), hi(s)], key = [lo(k), hi(k)])
//! ```
//!
//! Each block yields four 32-bit words. Uniforms take two words
//! (`((w0 << 32 | w1) >> 11) * 2^-53`), normals use Box-Muller on a full block
//! and return both the cosine and sine branch. Nothing depends on platform
//! endianness or on the `rand` crate's algorithm choices, so seeded runs are
//! reproducible across machines and languages.

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

/// The Philox4x32 bijection with 10 rounds.
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut ctr = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let p0 = u64::from(PHILOX_M0) * u64::from(ctr[0]);
        let p1 = u64::from(PHILOX_M1) * u64::from(ctr[2]);
        let (hi0, lo0) = ((p0 >> 32) as u32, p0 as u32);
        let (hi1, lo1) = ((p1 >> 32) as u32, p1 as u32);
        ctr = [hi1 ^ ctr[1] ^ k[0], lo1, hi0 ^ ctr[3] ^ k[1], lo0];
    }
    ctr
}

/// Stream ids used by the sampler and the data tools. A stream id is
/// `domain << 32 | index`, so e.g. the per-step noise of stage 2 lives at
/// `purpose::STEP_NOISE << 32 | 2`.
pub mod purpose {
    pub const START_POINT: u64 = 1;
    pub const STEP_NOISE: u64 = 2;
    pub const SKETCH_PERTURB: u64 = 3;
    pub const EXEMPLAR_PERTURB: u64 = 4;
    pub const REPEAT_NOISE: u64 = 5;
    pub const DATASET_ITEM: u64 = 16;
    pub const NET_INIT: u64 = 32;
    pub const TRAIN_BATCH: u64 = 33;
    pub const PYRAMID_WEIGHTS: u64 = 48;
    pub const PROJECTIONS: u64 = 64;
    pub const GRADCHECK: u64 = 80;
    pub const MISC: u64 = 96;
}

/// Derive a stream id from a purpose and an index (stage number, item id, ...).
pub fn stream_id(purpose: u64, index: u32) -> u64 {
    (purpose << 32) | u64::from(index)
}

#[derive(Clone, Debug)]
pub struct Stream {
    key: [u32; 2],
    stream: u64,
    block: u64,
    buf: [u32; 4],
    buf_pos: usize,
    spare_normal: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            key: [seed as u32, (seed >> 32) as u32],
            stream,
            block: 0,
            buf: [0; 4],
            buf_pos: 4,
            spare_normal: None,
        }
    }

    pub fn for_purpose(seed: u64, purpose: u64, index: u32) -> Self {
        Self::new(seed, stream_id(purpose, index))
    }

    fn next_block(&mut self) -> [u32; 4] {
        let ctr = [
            self.block as u32,
            (self.block >> 32) as u32,
            self.stream as u32,
            (self.stream >> 32) as u32,
        ];
        self.block = self.block.wrapping_add(1);
        philox4x32_10(ctr, self.key)
    }

    pub fn next_u32(&mut self) -> u32 {
        if self.buf_pos == 4 {
            self.buf = self.next_block();
            self.buf_pos = 0;
        }
        let w = self.buf[self.buf_pos];
        self.buf_pos += 1;
        w
    }

    pub fn next_u64(&mut self) -> u64 {
        let hi = u64::from(self.next_u32());
        let lo = u64::from(self.next_u32());
        (hi << 32) | lo
    }

    /// Uniform on [0, 1) with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (multiply-shift; bias below 2^-32 for small n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((u64::from(self.next_u32()) * n as u64) >> 32) as usize
    }

    /// Standard normal via Box-Muller over one fresh Philox block.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let b = self.next_block();
        let a = ((u64::from(b[0]) << 32) | u64::from(b[1])) >> 11;
        let c = ((u64::from(b[2]) << 32) | u64::from(b[3])) >> 11;
        let scale = 1.0 / (1u64 << 53) as f64;
        // u1 in (0, 1] keeps the log finite
        let u1 = 1.0 - a as f64 * scale;
        let u2 = c as f64 * scale;
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        self.fill_normal(&mut v);
        v
    }
}
