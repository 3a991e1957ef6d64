//! Per-sample random streams and inverse-CDF sampling of lattice laws.

use rand::RngCore;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::dist::Dist;
use crate::mass::Mass;

pub type SampleRng = Xoshiro256PlusPlus;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for sample `index` of a run seeded with `seed`.
/// Depends only on the pair, never on scheduling.
pub fn stream(seed: u64, index: u64) -> SampleRng {
    SampleRng::seed_from_u64(splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D))))
}

/// Inverse-CDF sampler over 64-bit thresholds.
#[derive(Debug, Clone)]
pub struct LatticeSampler {
    /// `thresholds[k]` ≈ `P(X ≤ k)·2^64`; the last entry saturates.
    thresholds: Vec<u64>,
}

impl LatticeSampler {
    pub fn new<T: Mass>(law: &Dist<T>) -> Self {
        let f = law.to_f64_dist();
        let total: f64 = f.total_mass();
        let mut acc = crate::numeric::NeumaierSum::new();
        let scale = 2f64.powi(64);
        let mut thresholds: Vec<u64> = f
            .probs()
            .iter()
            .map(|&p| {
                acc.add(p / total);
                let c = acc.value() * scale;
                if c >= scale {
                    u64::MAX
                } else {
                    c as u64
                }
            })
            .collect();
        *thresholds.last_mut().expect("laws are nonempty") = u64::MAX;
        LatticeSampler { thresholds }
    }

    #[inline]
    pub fn sample(&self, rng: &mut SampleRng) -> u64 {
        let u = rng.next_u64();
        if self.thresholds.len() <= 8 {
            let mut k = 0;
            while self.thresholds[k] <= u && k + 1 < self.thresholds.len() {
                k += 1;
            }
            k as u64
        } else {
            let k = self.thresholds.partition_point(|&t| t <= u);
            k.min(self.thresholds.len() - 1) as u64
        }
    }
}
