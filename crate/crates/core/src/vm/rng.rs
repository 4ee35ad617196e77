//! Counter-based splitmix64 stream: the k-th draw depends only on
//! `(seed, k)`, so restoring `(seed, draw_count)` restores the stream.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EngineRng {
    pub seed: u64,
    pub draw_count: u64,
}

impl EngineRng {
    pub fn new(seed: u64) -> Self {
        EngineRng {
            seed,
            draw_count: 0,
        }
    }

    /// Value of the `k`-th draw (0-based) without advancing.
    pub fn draw_at(seed: u64, k: u64) -> u64 {
        mix64(seed.wrapping_add(k.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = Self::draw_at(self.seed, self.draw_count);
        self.draw_count += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Fills `out` from a single draw mixed with `tag`. Consumes exactly one
    /// draw regardless of length.
    pub fn fill_blob(&mut self, tag: u64, out: &mut [u8]) {
        let mut state = mix64(self.next_u64() ^ tag.rotate_left(17));
        let mut chunks = out.chunks_exact_mut(8);
        for chunk in &mut chunks {
            state = state.wrapping_add(GOLDEN);
            chunk.copy_from_slice(&mix64(state).to_le_bytes());
        }
        let rest = chunks.into_remainder();
        if !rest.is_empty() {
            state = state.wrapping_add(GOLDEN);
            let bytes = mix64(state).to_le_bytes();
            rest.copy_from_slice(&bytes[..rest.len()]);
        }
    }
}
