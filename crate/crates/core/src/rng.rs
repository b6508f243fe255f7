//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator seeded with
//! `seed_from_u64(seed)` and then moved to a fixed stream number with
//! `set_stream`. Each consumer owns its own stream, so adding draws in one
//! place never shifts the values seen by another. ChaCha output is specified
//! bit-for-bit, which keeps runs reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream numbers. Values are part of the reproducibility contract; never
/// renumber an existing entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    ModelInit = 1,
    Calibration = 2,
    Training = 3,
    Search = 4,
    Distill = 5,
    MarkovStructure = 6,
    Sampling = 7,
    Verification = 8,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_independent_and_repeatable() {
        let a: Vec<u64> = (0..4).map(|_| stream(9, Stream::Search).gen()).collect();
        let mut r1 = stream(9, Stream::Search);
        let mut r2 = stream(9, Stream::Search);
        let mut r3 = stream(9, Stream::Training);
        let x: u64 = r1.gen();
        assert_eq!(x, r2.gen::<u64>());
        assert_ne!(x, r3.gen::<u64>());
        assert!(a.iter().all(|&v| v == a[0]));
    }
}
