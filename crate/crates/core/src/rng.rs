//! Counter-based random substreams.
//!
//! Every draw is addressed by `(seed, domain, a, b)`, so results never depend
//! on evaluation order or on how the work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream domains; keeps outer paths, inner resimulations and pricing draws apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    OuterPath = 1,
    Inner = 2,
    VixPricing = 3,
    Prop1 = 4,
    Oracle = 5,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a key into a 64-bit substream seed.
pub fn substream_seed(seed: u64, domain: Domain, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ (domain as u64));
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(17))
}

/// A standalone generator for one substream.
#[derive(Debug, Clone)]
pub struct Substream {
    rng: ChaCha8Rng,
}

impl Substream {
    pub fn new(seed: u64, domain: Domain, a: u64, b: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(substream_seed(seed, domain, a, b)),
        }
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        use rand::Rng;
        self.rng.random::<f64>()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
