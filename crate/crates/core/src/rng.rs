//! Counter-based stream splitting.
//!
//! Every random stream is a ChaCha8 generator whose 256-bit key is the tuple
//! `(root seed, domain, a, b)`. Streams for different scenarios and particles are
//! therefore independent of each other and of the order in which threads consume
//! them, which makes every result a pure function of the root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct domains never share a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Regime = 1,
    Common = 2,
    Idiosyncratic = 3,
    Initial = 4,
    Perturbation = 5,
    User = 6,
}

pub fn stream(root: u64, domain: Domain, a: u64, b: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&root.to_le_bytes());
    seed[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    seed[16..24].copy_from_slice(&a.to_le_bytes());
    seed[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, Domain::Common, 3, 0).random();
        let b: u64 = stream(7, Domain::Common, 3, 0).random();
        let c: u64 = stream(7, Domain::Common, 4, 0).random();
        let d: u64 = stream(7, Domain::Idiosyncratic, 3, 0).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
