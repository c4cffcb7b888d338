//! Counter-based, splittable random streams.
//!
//! Every random quantity in the crate is drawn from a stream addressed by
//! `(experiment seed, tag, index)`. The stream for a given address is a pure
//! function of that address, so results do not depend on how work is split
//! across threads or in which order draws are generated.

use rand::RngCore;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn mix64_alt(mut z: u64) -> u64 {
    // Moremur constants; independent of the splitmix finalizer above.
    z = (z ^ (z >> 27)).wrapping_mul(0x3C79_AC49_2BA7_B653);
    z = (z ^ (z >> 33)).wrapping_mul(0x1C69_B3F7_4AC4_AE35);
    z ^ (z >> 27)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives the key of the stream at `(seed, tag, index)`.
pub fn stream_key(seed: u64, tag: &str, index: u64) -> u64 {
    let base = mix64(seed ^ mix64_alt(fnv1a(tag)));
    mix64(base.wrapping_add(mix64_alt(index.wrapping_add(GOLDEN))))
}

/// A random stream whose `i`-th output is a pure function of `(key, i)`.
#[derive(Clone, Debug)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn from_key(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    /// Stream for draw `index` of the component named `tag` in experiment `seed`.
    pub fn stream(seed: u64, tag: &str, index: u64) -> Self {
        Self::from_key(stream_key(seed, tag, index))
    }

    /// Output at an arbitrary counter position, without advancing.
    pub fn at(&self, counter: u64) -> u64 {
        mix64(self.key ^ mix64_alt(counter.wrapping_mul(GOLDEN).wrapping_add(1)))
    }

    /// A child stream; children with different labels never share outputs
    /// with each other or with the parent except by hash collision.
    pub fn split(&self, label: u64) -> Self {
        Self::from_key(mix64(self.key ^ mix64_alt(label ^ 0xA5A5_A5A5_5A5A_5A5A)))
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let out = self.at(self.counter);
        self.counter = self.counter.wrapping_add(1);
        out
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
