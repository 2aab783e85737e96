//! Random clusters labelled with a pairwise Morse potential.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Molecule;

/// `V(r) = D_e [(1 - exp(-a (r - r_e)))^2 - 1]`, minimum `-D_e` at `r_e`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Morse {
    pub depth: f64,
    pub width: f64,
    pub r_eq: f64,
}

impl Morse {
    pub fn energy(&self, r: f64) -> f64 {
        let e = (-self.width * (r - self.r_eq)).exp();
        self.depth * ((1.0 - e) * (1.0 - e) - 1.0)
    }

    pub fn d_energy(&self, r: f64) -> f64 {
        let e = (-self.width * (r - self.r_eq)).exp();
        2.0 * self.depth * self.width * e * (1.0 - e)
    }

    /// Mixing rule from per-element radius and well depth.
    pub fn for_pair(zi: u32, zj: u32) -> Morse {
        let (ri, di) = element_params(zi);
        let (rj, dj) = element_params(zj);
        Morse {
            depth: (di * dj).sqrt(),
            width: 1.5,
            r_eq: ri + rj,
        }
    }
}

fn element_params(z: u32) -> (f64, f64) {
    match z {
        1 => (0.55, 0.8),
        6 => (0.75, 1.4),
        7 => (0.72, 1.2),
        8 => (0.68, 1.1),
        // generic fallback growing slowly with atomic number
        _ => (0.6 + 0.01 * z.min(60) as f64, 1.0),
    }
}

/// Total Morse energy and physical forces `-dE/dr`, with pair parameters
/// from `potential`.
pub fn morse_energy_forces(
    atomic_numbers: &[u32],
    coords: &[[f64; 3]],
    potential: impl Fn(u32, u32) -> Morse,
) -> (f64, Vec<[f64; 3]>) {
    let n = coords.len();
    let mut energy = 0.0;
    let mut forces = vec![[0.0; 3]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = [
                coords[i][0] - coords[j][0],
                coords[i][1] - coords[j][1],
                coords[i][2] - coords[j][2],
            ];
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let m = potential(atomic_numbers[i], atomic_numbers[j]);
            energy += m.energy(r);
            let g = m.d_energy(r) / r;
            for k in 0..3 {
                forces[i][k] -= g * d[k];
                forces[j][k] += g * d[k];
            }
        }
    }
    (energy, forces)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_molecules: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub elements: Vec<u32>,
    /// Per element pair overrides; other pairs use [`Morse::for_pair`].
    pub pair_params: Vec<(u32, u32, Morse)>,
    /// New atoms are placed this far (uniform range) from a random existing atom.
    pub bond_range: (f64, f64),
    pub min_distance: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_molecules: 600,
            min_atoms: 4,
            max_atoms: 8,
            elements: vec![1, 6, 8],
            pair_params: Vec::new(),
            bond_range: (0.9, 1.8),
            min_distance: 0.8,
            max_attempts: 1000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn morse(&self, zi: u32, zj: u32) -> Morse {
        self.pair_params
            .iter()
            .find(|(a, b, _)| (*a, *b) == (zi, zj) || (*a, *b) == (zj, zi))
            .map(|p| p.2)
            .unwrap_or_else(|| Morse::for_pair(zi, zj))
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_atoms == 0 || self.min_atoms > self.max_atoms {
            return Err(Error::config(format!(
                "need 1 <= min_atoms <= max_atoms, got {}..{}",
                self.min_atoms, self.max_atoms
            )));
        }
        if self.elements.is_empty() {
            return Err(Error::config("synthetic element list is empty"));
        }
        let (lo, hi) = self.bond_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) || self.min_distance <= 0.0 {
            return Err(Error::config("synthetic distances must be positive and ordered"));
        }
        if self
            .pair_params
            .iter()
            .any(|(_, _, m)| !(m.depth.is_finite() && m.width > 0.0 && m.r_eq > 0.0))
        {
            return Err(Error::config("Morse parameters need finite depth and positive width and r_e"));
        }
        if self.max_attempts == 0 {
            return Err(Error::config("max_attempts must be positive"));
        }
        Ok(())
    }
}

fn random_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-4 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Grows random clusters atom by atom, rejecting placements closer than
/// `min_distance` to an existing atom, and labels them with Morse energies
/// and forces.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Molecule>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_molecules);
    for m in 0..spec.n_molecules {
        let n = rng.random_range(spec.min_atoms..=spec.max_atoms);
        let z: Vec<u32> = (0..n)
            .map(|_| spec.elements[rng.random_range(0..spec.elements.len())])
            .collect();
        let mut coords: Vec<[f64; 3]> = vec![[0.0; 3]];
        let mut attempts = 0;
        while coords.len() < n {
            attempts += 1;
            if attempts > spec.max_attempts {
                return Err(Error::config(format!(
                    "could not place {n} atoms for molecule {m} within {} attempts",
                    spec.max_attempts
                )));
            }
            let anchor = coords[rng.random_range(0..coords.len())];
            let dir = random_direction(&mut rng);
            let r = rng.random_range(spec.bond_range.0..=spec.bond_range.1);
            let p = [anchor[0] + r * dir[0], anchor[1] + r * dir[1], anchor[2] + r * dir[2]];
            let clear = coords.iter().all(|c| {
                let d2: f64 = (0..3).map(|k| (c[k] - p[k]).powi(2)).sum();
                d2 >= spec.min_distance * spec.min_distance
            });
            if clear {
                coords.push(p);
            }
        }
        let (energy, forces) = morse_energy_forces(&z, &coords, |a, b| spec.morse(a, b));
        out.push(Molecule::new(z, coords)?.with_energy(energy).with_forces(forces)?);
    }
    Ok(out)
}
