//! Seeded, splittable randomness.
//!
//! Every stochastic component takes its own [`Rng`] forked from a parent seed
//! by label, so adding a draw in one component never shifts another's stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// A 64-bit seed that can be split into independent child seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seed(pub u64);

impl Seed {
    pub fn rng(self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Derives a child seed for the component named `label`.
    pub fn fork(self, label: &str) -> Seed {
        let mut h = self.0 ^ 0x9e37_79b9_7f4a_7c15;
        for b in label.bytes() {
            h = splitmix(h ^ u64::from(b));
        }
        Seed(splitmix(h))
    }

    pub fn fork_index(self, index: u64) -> Seed {
        Seed(splitmix(self.0 ^ splitmix(index.wrapping_add(0x2545_f491_4f6c_dd1d))))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
