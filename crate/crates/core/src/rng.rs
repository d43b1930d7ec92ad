//! Deterministic normal sampler.
//!
//! Uniforms come from ChaCha8 (a counter-based stream generator) seeded with
//! `seed_from_u64`; pairs of uniforms are turned into normals with the
//! Box-Muller transform. Identical seeds give bit-identical streams.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f32>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        NormalStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform in the open interval (0, 1), 53-bit resolution.
    fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f32 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some((r * theta.sin()) as f32);
        (r * theta.cos()) as f32
    }

    pub fn fill(&mut self, out: &mut [f32]) {
        for v in out {
            *v = self.next_normal();
        }
    }
}

/// Mix a base seed with a stream index so sub-streams are decorrelated.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
