use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Molecule;

/// Molecules with a named regression target.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub molecules: Vec<Molecule>,
    pub target: String,
    pub units: String,
}

impl Dataset {
    pub fn new(molecules: Vec<Molecule>) -> Self {
        Self {
            molecules,
            target: "energy".into(),
            units: "eV".into(),
        }
    }

    pub fn len(&self) -> usize {
        self.molecules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.molecules.is_empty()
    }

    pub fn has_energies(&self) -> bool {
        self.molecules.iter().all(|m| m.energy().is_some())
    }

    pub fn has_forces(&self) -> bool {
        self.molecules.iter().all(|m| m.forces().is_some())
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<Molecule> {
        indices.iter().map(|&i| self.molecules[i].clone()).collect()
    }
}

/// Index sets of a train/validation/test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed` and partitions it. Validation and test sizes
/// are `floor(n * fraction)`; the remainder goes to training.
pub fn split_dataset(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::config(format!("split fractions must lie in [0, 1], got {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions sum to {total}, expected 1")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 * fractions[1]).floor() as usize;
    let n_test = (n as f64 * fractions[2]).floor() as usize;
    let n_train = n - n_val - n_test;
    Ok(Split {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_floor_with_remainder_to_train() {
        let s = split_dataset(10, [0.8, 0.1, 0.1], 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let s = split_dataset(7, [0.5, 0.25, 0.25], 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5, 1, 1));
        let s = split_dataset(0, [0.8, 0.1, 0.1], 0).unwrap();
        assert!(s.train.is_empty() && s.val.is_empty() && s.test.is_empty());
    }

    #[test]
    fn rejects_bad_fractions() {
        assert!(matches!(split_dataset(10, [0.8, 0.1, 0.2], 0), Err(Error::Config(_))));
        assert!(split_dataset(10, [1.2, -0.1, -0.1], 0).is_err());
    }

    #[test]
    fn partition_is_disjoint_and_seeded() {
        let a = split_dataset(50, [0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(a, split_dataset(50, [0.6, 0.2, 0.2], 3).unwrap());
        assert_ne!(a, split_dataset(50, [0.6, 0.2, 0.2], 4).unwrap());
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }
}
