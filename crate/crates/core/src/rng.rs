//! Counter-based seeding.
//!
//! Every random draw in an experiment comes from a ChaCha stream whose seed
//! is a hash of `(master seed, purpose, indices...)`. Trials therefore never
//! share a stream and the draws of trial `k` do not depend on which worker
//! ran it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type TrialRng = ChaCha8Rng;

/// What a stream is used for. Part of the key so that, e.g., the sketch and
/// the parameter of the same trial are independent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    Sketch,
    Parameter,
    Data,
    Rotation,
    Feature,
    Check,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Sketch => 0x5345_4b54,
            Purpose::Parameter => 0x5041_5241,
            Purpose::Data => 0x4441_5441,
            Purpose::Rotation => 0x524f_5441,
            Purpose::Feature => 0x4645_4154,
            Purpose::Check => 0x4348_4543,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, purpose: Purpose, indices: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ splitmix64(purpose.tag()));
    for &i in indices {
        h = splitmix64(h ^ splitmix64(i.wrapping_add(0x2545_f491_4f6c_dd1d)));
    }
    h
}

pub fn stream(master: u64, purpose: Purpose, indices: &[u64]) -> TrialRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, indices))
}

pub fn seeded(seed: u64) -> TrialRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn keys_separate_streams() {
        let a = derive_seed(1, Purpose::Sketch, &[0]);
        assert_ne!(a, derive_seed(1, Purpose::Parameter, &[0]));
        assert_ne!(a, derive_seed(1, Purpose::Sketch, &[1]));
        assert_ne!(a, derive_seed(2, Purpose::Sketch, &[0]));
        assert_eq!(a, derive_seed(1, Purpose::Sketch, &[0]));
    }

    #[test]
    fn stream_is_reproducible() {
        let x: Vec<u64> = stream(9, Purpose::Data, &[3, 4]).random_iter().take(4).collect();
        let y: Vec<u64> = stream(9, Purpose::Data, &[3, 4]).random_iter().take(4).collect();
        assert_eq!(x, y);
    }
}
