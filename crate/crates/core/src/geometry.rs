//! Molecules, interatomic distances, radial basis expansions and the
//! learned two-body kernel that gates attention.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, normal, Bound, ParamId, ParamStore};

pub const MAX_ATOMIC_NUMBER: u32 = 118;

/// Atoms with positions in Å and optional energy/force labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Molecule {
    atomic_numbers: Vec<u32>,
    coords: Vec<[f64; 3]>,
    energy: Option<f64>,
    forces: Option<Vec<[f64; 3]>>,
}

impl Molecule {
    pub fn new(atomic_numbers: Vec<u32>, coords: Vec<[f64; 3]>) -> Result<Self> {
        if atomic_numbers.is_empty() {
            return Err(Error::data("molecule has no atoms"));
        }
        if atomic_numbers.len() != coords.len() {
            return Err(Error::data(format!(
                "{} atomic numbers but {} positions",
                atomic_numbers.len(),
                coords.len()
            )));
        }
        if let Some(z) = atomic_numbers
            .iter()
            .find(|&&z| z == 0 || z > MAX_ATOMIC_NUMBER)
        {
            return Err(Error::data(format!("unknown atomic number {z}")));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite coordinate"));
        }
        for i in 0..coords.len() {
            for j in 0..i {
                if coords[i] == coords[j] {
                    return Err(Error::data(format!("atoms {j} and {i} coincide")));
                }
            }
        }
        Ok(Self {
            atomic_numbers,
            coords,
            energy: None,
            forces: None,
        })
    }

    pub fn with_energy(mut self, energy: f64) -> Self {
        self.energy = Some(energy);
        self
    }

    pub fn with_forces(mut self, forces: Vec<[f64; 3]>) -> Result<Self> {
        if forces.len() != self.len() {
            return Err(Error::data(format!(
                "{} force rows for {} atoms",
                forces.len(),
                self.len()
            )));
        }
        if forces.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite force"));
        }
        self.forces = Some(forces);
        Ok(self)
    }

    pub fn without_labels(&self) -> Self {
        Self {
            energy: None,
            forces: None,
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atomic_numbers.is_empty()
    }

    pub fn atomic_numbers(&self) -> &[u32] {
        &self.atomic_numbers
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn energy(&self) -> Option<f64> {
        self.energy
    }

    pub fn forces(&self) -> Option<&[[f64; 3]]> {
        self.forces.as_deref()
    }

    pub fn coords_tensor(&self) -> Tensor {
        Tensor::from_fn(self.len(), 3, |r, c| self.coords[r][c])
    }

    /// Same molecule with atom `k` of the result taken from atom `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if perm.len() != self.len() || perm.iter().any(|&p| p >= self.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::data("not a permutation of the atom indices"));
        }
        Ok(Self {
            atomic_numbers: perm.iter().map(|&p| self.atomic_numbers[p]).collect(),
            coords: perm.iter().map(|&p| self.coords[p]).collect(),
            energy: self.energy,
            forces: self
                .forces
                .as_ref()
                .map(|f| perm.iter().map(|&p| f[p]).collect()),
        })
    }

    /// Applies `r -> rotation * r + shift` to every position (and rotates
    /// force labels).
    pub fn transformed(&self, rotation: &[[f64; 3]; 3], shift: [f64; 3]) -> Result<Self> {
        let rot = |v: &[f64; 3]| -> [f64; 3] {
            std::array::from_fn(|a| (0..3).map(|b| rotation[a][b] * v[b]).sum())
        };
        let coords = self
            .coords
            .iter()
            .map(|r| {
                let p = rot(r);
                [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]
            })
            .collect();
        let mut out = Molecule::new(self.atomic_numbers.clone(), coords)?;
        out.energy = self.energy;
        out.forces = self.forces.as_ref().map(|f| f.iter().map(rot).collect());
        Ok(out)
    }
}

/// `N x N` matrix of Euclidean distances.
pub fn pairwise_distances(coords: &[[f64; 3]]) -> Tensor {
    let n = coords.len();
    Tensor::from_fn(n, n, |i, j| {
        let d: f64 = (0..3).map(|a| (coords[i][a] - coords[j][a]).powi(2)).sum();
        d.sqrt()
    })
}

/// Unordered atom pairs `i <= j` and the map from ordered pair `i*N + j`
/// to its unordered index. Per-pair quantities that are symmetric in the
/// atoms are computed once per unordered pair and expanded with this map.
#[derive(Clone, Debug)]
pub struct PairIndex {
    n_atoms: usize,
    first: Arc<[usize]>,
    second: Arc<[usize]>,
    expand: Arc<[usize]>,
}

impl PairIndex {
    pub fn new(n_atoms: usize) -> Self {
        let mut first = Vec::new();
        let mut second = Vec::new();
        let mut slot = vec![0usize; n_atoms * n_atoms];
        for i in 0..n_atoms {
            for j in i..n_atoms {
                slot[i * n_atoms + j] = first.len();
                slot[j * n_atoms + i] = first.len();
                first.push(i);
                second.push(j);
            }
        }
        Self {
            n_atoms,
            first: first.into(),
            second: second.into(),
            expand: slot.into(),
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn n_unique(&self) -> usize {
        self.first.len()
    }

    pub fn first(&self) -> &Arc<[usize]> {
        &self.first
    }

    pub fn second(&self) -> &Arc<[usize]> {
        &self.second
    }

    /// Expand `(unique pairs x c)` to `(N*N x c)`.
    pub fn expand<'t>(&self, unique: Var<'t>) -> Result<Var<'t>> {
        unique.gather(Arc::clone(&self.expand))
    }
}

/// Distances of the unordered pairs of `coords` (`N x 3` var), as a
/// `(unique pairs x 1)` var. Coincident points (the diagonal) get distance
/// zero and a zero gradient.
pub fn pair_distances<'t>(coords: Var<'t>, pairs: &PairIndex) -> Result<Var<'t>> {
    let a = coords.gather(Arc::clone(&pairs.first))?;
    let b = coords.gather(Arc::clone(&pairs.second))?;
    a.sub(b)?
        .square()?
        .row_sum()?
        .unary(Unary::Pow { coef: 1.0, exp: 0.5 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BasisKind {
    #[default]
    Gaussian,
    Linear,
    Bessel,
}

impl BasisKind {
    pub const ALL: [BasisKind; 3] = [BasisKind::Gaussian, BasisKind::Linear, BasisKind::Bessel];

    pub fn name(self) -> &'static str {
        match self {
            BasisKind::Gaussian => "gaussian",
            BasisKind::Linear => "linear",
            BasisKind::Bessel => "bessel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(BasisKind::Gaussian),
            "linear" => Ok(BasisKind::Linear),
            "bessel" => Ok(BasisKind::Bessel),
            other => Err(Error::config(format!(
                "unknown basis `{other}` (expected gaussian, linear or bessel)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasisConfig {
    pub kind: BasisKind,
    pub n_basis: usize,
    /// Gaussian width.
    pub gamma: f64,
    /// Gaussian centre spacing in Å; centre `k` sits at `spacing * k`.
    pub spacing: f64,
    /// Bessel cutoff in Å.
    pub cutoff: f64,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            kind: BasisKind::Gaussian,
            n_basis: 300,
            gamma: 10.0,
            spacing: 0.1,
            cutoff: 5.0,
        }
    }
}

impl BasisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_basis == 0 {
            return Err(Error::config("n_basis must be at least 1"));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("spacing", self.spacing),
            ("cutoff", self.cutoff),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// `g_k(r) = exp(-gamma (r - spacing*k)^2)` for `k = 1..=n_basis`.
pub fn gaussian_basis(r: f64, cfg: &BasisConfig) -> Vec<f64> {
    (1..=cfg.n_basis)
        .map(|k| (-cfg.gamma * (r - cfg.spacing * k as f64).powi(2)).exp())
        .collect()
}

/// `sqrt(2/c) sin(n pi r / c) / r` for `n = 1..=n_basis`, continuous at 0.
pub fn bessel_basis(r: f64, cfg: &BasisConfig) -> Vec<f64> {
    let c = cfg.cutoff;
    let amp = (2.0 / c).sqrt();
    (1..=cfg.n_basis)
        .map(|n| {
            let freq = n as f64 * PI / c;
            amp * freq * Unary::Sinc.eval(freq * r)
        })
        .collect()
}

/// `offset_k + slope_k * r`.
pub fn linear_basis(r: f64, offset: &[f64], slope: &[f64]) -> Vec<f64> {
    offset.iter().zip(slope).map(|(a, b)| a + b * r).collect()
}

/// Radial expansion of pair distances; the linear family carries trainable
/// offsets and slopes.
#[derive(Clone, Debug)]
pub struct RadialBasis {
    cfg: BasisConfig,
    linear: Option<(ParamId, ParamId)>,
}

impl RadialBasis {
    pub fn new(cfg: BasisConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let linear = match cfg.kind {
            BasisKind::Linear => {
                let k = cfg.n_basis;
                let offset = store.add("basis.offset", normal(rng, 1, k, 1.0));
                let slope = store.add("basis.slope", normal(rng, 1, k, 1.0));
                Some((offset, slope))
            }
            _ => None,
        };
        Ok(Self { cfg, linear })
    }

    pub fn config(&self) -> &BasisConfig {
        &self.cfg
    }

    pub fn width(&self) -> usize {
        self.cfg.n_basis
    }

    pub fn linear_params(&self) -> Option<(ParamId, ParamId)> {
        self.linear
    }

    /// `(pairs x 1)` distances to `(pairs x n_basis)` features.
    pub fn expand<'t>(&self, r: Var<'t>, bound: &Bound<'t>) -> Result<Var<'t>> {
        let tape = r.tape();
        let rows = r.shape().0;
        let k = self.cfg.n_basis;
        let wide = r.col_broadcast(k)?;
        match self.cfg.kind {
            BasisKind::Gaussian => {
                let centres = Tensor::from_fn(rows, k, |_, c| self.cfg.spacing * (c + 1) as f64);
                wide.sub(tape.constant(centres)?)?
                    .square()?
                    .scale(-self.cfg.gamma)?
                    .exp()
            }
            BasisKind::Bessel => {
                let c = self.cfg.cutoff;
                let freq = Tensor::from_fn(rows, k, |_, n| (n + 1) as f64 * PI / c);
                let amp = (2.0 / c).sqrt();
                let scale = freq.map(|f| f * amp);
                wide.mul(tape.constant(freq)?)?
                    .unary(Unary::Sinc)?
                    .mul(tape.constant(scale)?)
            }
            BasisKind::Linear => {
                let (offset, slope) = self.linear.expect("linear basis owns parameters");
                wide.mul(bound[slope].row_broadcast(rows)?)?
                    .add(bound[offset].row_broadcast(rows)?)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KernelMode {
    Plain,
    #[default]
    AtomAware,
}

impl KernelMode {
    pub fn name(self) -> &'static str {
        match self {
            KernelMode::Plain => "plain",
            KernelMode::AtomAware => "atom_aware",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(KernelMode::Plain),
            "atom_aware" => Ok(KernelMode::AtomAware),
            other => Err(Error::config(format!(
                "unknown kernel mode `{other}` (expected plain or atom_aware)"
            ))),
        }
    }
}

/// Pairwise kernel tensor `N x N x d_m`, stored as `N*N` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTensor {
    n_atoms: usize,
    values: Tensor,
}

impl KernelTensor {
    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        self.values.row(i * self.n_atoms + j)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.values
    }
}

/// Per-layer two-body kernel: a two-layer swish MLP over the radial basis,
/// optionally concatenated with a symmetric code of the two atom types.
#[derive(Clone, Debug)]
pub struct TwoBodyKernel {
    mode: KernelMode,
    atom_codes: Option<ParamId>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl TwoBodyKernel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        mode: KernelMode,
        basis_width: usize,
        code_width: usize,
        hidden: usize,
        out: usize,
    ) -> Self {
        let (atom_codes, in_width) = match mode {
            KernelMode::Plain => (None, basis_width),
            KernelMode::AtomAware => {
                let table = normal(
                    rng,
                    MAX_ATOMIC_NUMBER as usize + 1,
                    code_width,
                    1.0 / (code_width as f64).sqrt(),
                );
                (
                    Some(store.add(format!("{prefix}.atom_codes"), table)),
                    basis_width + code_width,
                )
            }
        };
        let w1 = store.add(format!("{prefix}.w1"), glorot_uniform(rng, in_width, hidden));
        let b1 = store.add(format!("{prefix}.b1"), Tensor::zeros(1, hidden));
        let w2 = store.add(format!("{prefix}.w2"), glorot_uniform(rng, hidden, out));
        let b2 = store.add(format!("{prefix}.b2"), Tensor::zeros(1, out));
        Self {
            mode,
            atom_codes,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn mode(&self) -> KernelMode {
        self.mode
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.atom_codes.into_iter().collect();
        ids.extend([self.w1, self.b1, self.w2, self.b2]);
        ids
    }

    /// `Z(z_i) + Z(z_j)` for each pair, as `(pairs x code_width)`.
    pub fn pair_code<'t>(
        &self,
        bound: &Bound<'t>,
        z_first: &[u32],
        z_second: &[u32],
    ) -> Result<Var<'t>> {
        let table = self
            .atom_codes
            .ok_or_else(|| Error::config("plain kernel has no atom codes"))?;
        let idx = |zs: &[u32]| -> Result<Arc<[usize]>> {
            zs.iter()
                .map(|&z| {
                    if z == 0 || z > MAX_ATOMIC_NUMBER {
                        Err(Error::data(format!("unknown atomic number {z}")))
                    } else {
                        Ok(z as usize)
                    }
                })
                .collect()
        };
        let a = bound[table].gather(idx(z_first)?)?;
        let b = bound[table].gather(idx(z_second)?)?;
        a.add(b)
    }

    /// Kernel values for rows of `basis` (`pairs x n_basis`), whose atoms have
    /// atomic numbers `z_first[p]`, `z_second[p]`.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        basis: Var<'t>,
        z_first: &[u32],
        z_second: &[u32],
    ) -> Result<Var<'t>> {
        let rows = basis.shape().0;
        let input = match self.mode {
            KernelMode::Plain => basis,
            KernelMode::AtomAware => {
                Var::concat_cols(&[basis, self.pair_code(bound, z_first, z_second)?])?
            }
        };
        let hidden = input
            .matmul(bound[self.w1])?
            .add(bound[self.b1].row_broadcast(rows)?)?
            .swish()?;
        hidden
            .matmul(bound[self.w2])?
            .add(bound[self.b2].row_broadcast(rows)?)
    }

    /// Kernel for every unordered pair of `molecule` given its distances
    /// `r` (`unique pairs x 1`).
    pub fn forward_pairs<'t>(
        &self,
        bound: &Bound<'t>,
        basis: &RadialBasis,
        r: Var<'t>,
        pairs: &PairIndex,
        z: &[u32],
    ) -> Result<Var<'t>> {
        let features = basis.expand(r, bound)?;
        let zf: Vec<u32> = pairs.first().iter().map(|&i| z[i]).collect();
        let zs: Vec<u32> = pairs.second().iter().map(|&j| z[j]).collect();
        self.forward(bound, features, &zf, &zs)
    }

    /// Kernel vector for a single pair at distance `r`.
    pub fn eval_pair(
        &self,
        store: &ParamStore,
        basis: &RadialBasis,
        r: f64,
        z_i: u32,
        z_j: u32,
    ) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = store.bind(&tape)?;
        let rv = tape.constant(Tensor::scalar(r))?;
        let features = basis.expand(rv, &bound)?;
        let out = self.forward(&bound, features, &[z_i], &[z_j])?;
        Ok(out.value().data().to_vec())
    }

    /// Full `N x N x d_m` kernel tensor for `molecule`.
    pub fn tensor(
        &self,
        store: &ParamStore,
        basis: &RadialBasis,
        molecule: &Molecule,
    ) -> Result<KernelTensor> {
        let tape = Tape::new();
        let bound = store.bind(&tape)?;
        let pairs = PairIndex::new(molecule.len());
        let coords = tape.constant(molecule.coords_tensor())?;
        let r = pair_distances(coords, &pairs)?;
        let unique = self.forward_pairs(&bound, basis, r, &pairs, molecule.atomic_numbers())?;
        let full = pairs.expand(unique)?;
        Ok(KernelTensor {
            n_atoms: molecule.len(),
            values: (*full.value()).clone(),
        })
    }
}
