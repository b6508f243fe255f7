//! Synthetic calibration data: an order-2 Markov chain over the vocabulary.
//!
//! With probability [`FOLLOW_PROB`] the next token is `succ[a % 2][b]`, where
//! `a, b` are the previous two tokens and `succ` are two fixed permutations;
//! otherwise it is uniform. The permutations depend only on the vocabulary
//! size, so corpora drawn with different seeds share one chain.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

pub const FOLLOW_PROB: f64 = 0.85;
const STRUCTURE_SEED: u64 = 0x5eed_c4a1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkovChain {
    vocab: usize,
    succ: [Vec<u32>; 2],
}

impl MarkovChain {
    pub fn new(vocab: usize) -> Self {
        let mut rng = stream(STRUCTURE_SEED ^ vocab as u64, Stream::MarkovStructure);
        let mut perm = || {
            let mut p: Vec<u32> = (0..vocab as u32).collect();
            p.shuffle(&mut rng);
            p
        };
        let succ = [perm(), perm()];
        Self { vocab, succ }
    }

    /// Most likely successor of `(a, b)`.
    pub fn successor(&self, a: u32, b: u32) -> u32 {
        self.succ[(a % 2) as usize][b as usize]
    }

    pub fn sample(&self, seed: u64, n_samples: usize, len: usize) -> Result<Vec<Vec<u32>>> {
        if len < 2 {
            return Err(Error::Argument(format!(
                "sequence length must be at least 2, got {len}"
            )));
        }
        let mut rng = stream(seed, Stream::Calibration);
        let v = self.vocab as u32;
        Ok((0..n_samples)
            .map(|_| {
                let mut seq = vec![rng.gen_range(0..v), rng.gen_range(0..v)];
                while seq.len() < len {
                    let (a, b) = (seq[seq.len() - 2], seq[seq.len() - 1]);
                    let next = if rng.gen_bool(FOLLOW_PROB) {
                        self.successor(a, b)
                    } else {
                        rng.gen_range(0..v)
                    };
                    seq.push(next);
                }
                seq.truncate(len);
                seq
            })
            .collect())
    }
}

/// `n_samples` sequences of `len` tokens drawn from the vocabulary's chain.
pub fn generate_calibration(
    seed: u64,
    n_samples: usize,
    len: usize,
    vocab: usize,
) -> Result<Vec<Vec<u32>>> {
    if vocab < 2 {
        return Err(Error::Argument("vocab must be at least 2".into()));
    }
    MarkovChain::new(vocab).sample(seed, n_samples, len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_and_shape() {
        let s = generate_calibration(1, 4, 16, 64).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|q| q.len() == 16 && q.iter().all(|&t| t < 64)));
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            generate_calibration(1, 4, 16, 64).unwrap(),
            generate_calibration(1, 4, 16, 64).unwrap()
        );
        assert_ne!(
            generate_calibration(1, 4, 16, 64).unwrap(),
            generate_calibration(2, 4, 16, 64).unwrap()
        );
    }

    #[test]
    fn empty_and_short() {
        assert!(generate_calibration(1, 0, 16, 64).unwrap().is_empty());
        assert!(matches!(
            generate_calibration(1, 3, 1, 64),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn chain_is_mostly_followed() {
        let chain = MarkovChain::new(32);
        let data = chain.sample(3, 50, 40).unwrap();
        let mut hits = 0;
        let mut total = 0;
        for s in &data {
            for w in s.windows(3) {
                total += 1;
                hits += (chain.successor(w[0], w[1]) == w[2]) as usize;
            }
        }
        let rate = hits as f64 / total as f64;
        assert!(rate > 0.8 && rate < 0.92, "rate {rate}");
    }
}
