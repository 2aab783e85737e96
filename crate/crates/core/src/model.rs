//! The GeoT network: embedding, stacked attention blocks, sum readout, and
//! forces by differentiating the energy with respect to coordinates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, AttentionLayer, AttentionRecord};
use crate::autodiff::{Precision, Tape, Tensor, Var};
use crate::data_io::config::{parse_bool, parse_value};
use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::geometry::{
    pair_distances, BasisConfig, BasisKind, KernelMode, KernelTensor, Molecule, PairIndex,
    RadialBasis, TwoBodyKernel, MAX_ATOMIC_NUMBER,
};
use crate::params::{glorot_uniform, normal, Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BlockKind {
    /// `LN(MSA(X) + X)` followed by `LN(FFN(X') + X')`.
    Sequential,
    /// `LN(MSA(X) + FFN(X) + X)`.
    #[default]
    ParallelMlp,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Sequential => "sequential",
            BlockKind::ParallelMlp => "parallel_mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(BlockKind::Sequential),
            "parallel_mlp" | "parallel" => Ok(BlockKind::ParallelMlp),
            _ => Err(Error::config(format!(
                "unknown block kind `{s}` (expected sequential or parallel_mlp)"
            ))),
        }
    }
}

/// Sign applied to `dE/dr` when reporting forces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ForceSign {
    /// `F = +dE/dr`.
    #[default]
    Paper,
    /// `F = -dE/dr`.
    Physical,
}

impl ForceSign {
    pub fn name(self) -> &'static str {
        match self {
            ForceSign::Paper => "paper",
            ForceSign::Physical => "physical",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(ForceSign::Paper),
            "physical" => Ok(ForceSign::Physical),
            _ => Err(Error::config(format!(
                "unknown force sign `{s}` (expected paper or physical)"
            ))),
        }
    }

    pub fn factor(self) -> f64 {
        match self {
            ForceSign::Paper => 1.0,
            ForceSign::Physical => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Hidden width of the kernel MLP.
    pub d_rbf: usize,
    /// Width of the atom-type code fed to the kernel.
    pub d_code: usize,
    pub block: BlockKind,
    pub kernel: KernelMode,
    pub basis: BasisConfig,
    pub use_attn_scale: bool,
    pub use_softmax_baseline: bool,
    pub scale_per_head: bool,
    pub layer_norm_eps: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            d_rbf: 64,
            d_code: 64,
            block: BlockKind::default(),
            kernel: KernelMode::default(),
            basis: BasisConfig {
                n_basis: 64,
                ..BasisConfig::default()
            },
            use_attn_scale: true,
            use_softmax_baseline: false,
            scale_per_head: true,
            layer_norm_eps: 1e-5,
            precision: Precision::F64,
        }
    }
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "n_layers",
        "d_model",
        "heads",
        "d_ff",
        "d_rbf",
        "d_code",
        "block",
        "kernel",
        "basis",
        "n_basis",
        "gamma",
        "spacing",
        "bessel_cutoff",
        "attn_scale",
        "softmax_baseline",
        "scale_per_head",
        "layer_norm_eps",
        "precision",
    ];

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("d_rbf", self.d_rbf),
            ("d_code", self.d_code),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.layer_norm_eps > 0.0 && self.layer_norm_eps.is_finite()) {
            return Err(Error::config("layer_norm_eps must be positive"));
        }
        self.attention().validate()?;
        self.basis.validate()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            heads: self.heads,
            use_softmax_baseline: self.use_softmax_baseline,
            use_attn_scale: self.use_attn_scale,
            scale_per_head: self.scale_per_head,
        }
    }

    /// Applies one `key = value` setting. Returns `Ok(false)` for keys this
    /// config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_layers" => self.n_layers = parse_value(key, value)?,
            "d_model" => self.d_model = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "d_ff" => self.d_ff = parse_value(key, value)?,
            "d_rbf" => self.d_rbf = parse_value(key, value)?,
            "d_code" => self.d_code = parse_value(key, value)?,
            "block" => self.block = BlockKind::parse(value)?,
            "kernel" => self.kernel = KernelMode::parse(value)?,
            "basis" => self.basis.kind = BasisKind::parse(value)?,
            "n_basis" => self.basis.n_basis = parse_value(key, value)?,
            "gamma" => self.basis.gamma = parse_value(key, value)?,
            "spacing" => self.basis.spacing = parse_value(key, value)?,
            "bessel_cutoff" => self.basis.cutoff = parse_value(key, value)?,
            "attn_scale" => self.use_attn_scale = parse_bool(key, value)?,
            "softmax_baseline" => self.use_softmax_baseline = parse_bool(key, value)?,
            "scale_per_head" => self.scale_per_head = parse_bool(key, value)?,
            "layer_norm_eps" => self.layer_norm_eps = parse_value(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f64" => Precision::F64,
                    "f32" => Precision::F32,
                    _ => return Err(Error::config(format!("precision must be f64 or f32, got `{value}`"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_layers", self.n_layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("d_rbf", self.d_rbf.to_string()),
            ("d_code", self.d_code.to_string()),
            ("block", self.block.name().to_string()),
            ("kernel", self.kernel.name().to_string()),
            ("basis", self.basis.kind.name().to_string()),
            ("n_basis", self.basis.n_basis.to_string()),
            ("gamma", self.basis.gamma.to_string()),
            ("spacing", self.basis.spacing.to_string()),
            ("bessel_cutoff", self.basis.cutoff.to_string()),
            ("attn_scale", self.use_attn_scale.to_string()),
            ("softmax_baseline", self.use_softmax_baseline.to_string()),
            ("scale_per_head", self.scale_per_head.to_string()),
            ("layer_norm_eps", self.layer_norm_eps.to_string()),
            (
                "precision",
                match self.precision {
                    Precision::F64 => "f64",
                    Precision::F32 => "f32",
                }
                .to_string(),
            ),
        ]
    }
}

/// Position-wise `Linear -> ELU -> Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, hidden: usize) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), glorot_uniform(rng, d, hidden)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(1, hidden)),
            w2: store.add(format!("{prefix}.w2"), glorot_uniform(rng, hidden, d)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(1, d)),
        }
    }

    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let n = x.shape().0;
        x.matmul(bound[self.w1])?
            .add(bound[self.b1].row_broadcast(n)?)?
            .elu()?
            .matmul(bound[self.w2])?
            .add(bound[self.b2].row_broadcast(n)?)
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(1, d, 1.0)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(1, d)),
        }
    }

    fn apply<'t>(&self, bound: &Bound<'t>, x: Var<'t>, eps: f64) -> Result<Var<'t>> {
        x.layer_norm(bound[self.gain], bound[self.bias], eps)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    kernel: TwoBodyKernel,
    attention: AttentionLayer,
    ffn: FeedForward,
    norms: Vec<Norm>,
}

impl Block {
    pub fn kernel(&self) -> &TwoBodyKernel {
        &self.kernel
    }

    pub fn attention(&self) -> &AttentionLayer {
        &self.attention
    }

    pub fn ffn(&self) -> &FeedForward {
        &self.ffn
    }
}

/// Tape values of one forward pass.
pub struct ForwardPass<'t> {
    pub energy: Var<'t>,
    /// Final per-atom features (`N x d_model`).
    pub features: Var<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub energy: f64,
    pub forces: Vec<[f64; 3]>,
}

#[derive(Clone, Debug)]
pub struct GeoTModel {
    cfg: ModelConfig,
    store: ParamStore,
    embedding: ParamId,
    basis: RadialBasis,
    blocks: Vec<Block>,
    w_pool: ParamId,
    b_pool: ParamId,
}

impl GeoTModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let embedding = store.add(
            "embedding",
            normal(&mut rng, MAX_ATOMIC_NUMBER as usize + 1, d, 1.0 / (d as f64).sqrt()),
        );
        let basis = RadialBasis::new(cfg.basis, &mut store, &mut rng)?;
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let prefix = format!("layer{l}");
                let kernel = TwoBodyKernel::new(
                    &mut store,
                    &mut rng,
                    &format!("{prefix}.kernel"),
                    cfg.kernel,
                    basis.width(),
                    cfg.d_code,
                    cfg.d_rbf,
                    d,
                );
                let attention =
                    AttentionLayer::new(&mut store, &mut rng, &format!("{prefix}.attn"), cfg.attention())?;
                let ffn = FeedForward::new(&mut store, &mut rng, &format!("{prefix}.ffn"), d, cfg.d_ff);
                let n_norms = match cfg.block {
                    BlockKind::Sequential => 2,
                    BlockKind::ParallelMlp => 1,
                };
                let norms = (0..n_norms)
                    .map(|k| Norm::new(&mut store, &format!("{prefix}.norm{k}"), d))
                    .collect();
                Ok(Block {
                    kernel,
                    attention,
                    ffn,
                    norms,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let w_pool = store.add("readout.w", glorot_uniform(&mut rng, d, 1));
        let b_pool = store.add("readout.b", Tensor::zeros(1, 1));
        Ok(Self {
            cfg,
            store,
            embedding,
            basis,
            blocks,
            w_pool,
            b_pool,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn basis(&self) -> &RadialBasis {
        &self.basis
    }

    pub fn new_tape(&self) -> Tape {
        Tape::with_precision(self.cfg.precision)
    }

    /// Embedding rows for `z` (`N x d_model`).
    pub fn embed<'t>(&self, bound: &Bound<'t>, z: &[u32]) -> Result<Var<'t>> {
        let idx: Arc<[usize]> = z
            .iter()
            .map(|&z| {
                if z == 0 || z > MAX_ATOMIC_NUMBER {
                    Err(Error::data(format!("unknown atomic number {z}")))
                } else {
                    Ok(z as usize)
                }
            })
            .collect::<Result<_>>()?;
        bound[self.embedding].gather(idx)
    }

    /// One block applied to `x` under the expanded kernel `lambda`.
    pub fn block<'t>(
        &self,
        bound: &Bound<'t>,
        layer: usize,
        x: Var<'t>,
        lambda: Var<'t>,
        trace: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Var<'t>> {
        let b = &self.blocks[layer];
        let eps = self.cfg.layer_norm_eps;
        let att = b.attention.forward(bound, x, lambda, layer, trace)?;
        match self.cfg.block {
            BlockKind::Sequential => {
                let mid = b.norms[0].apply(bound, att.add(x)?, eps)?;
                let ff = b.ffn.forward(bound, mid)?;
                b.norms[1].apply(bound, ff.add(mid)?, eps)
            }
            BlockKind::ParallelMlp => {
                let ff = b.ffn.forward(bound, x)?;
                b.norms[0].apply(bound, att.add(ff)?.add(x)?, eps)
            }
        }
    }

    /// `E = w · Σ_i x_i + b`.
    pub fn readout<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.col_sum()?
            .matmul(bound[self.w_pool])?
            .add(bound[self.b_pool])
    }

    /// Builds the full forward graph for `molecule` at `coords` (`N x 3`).
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        molecule: &Molecule,
        coords: Var<'t>,
        mut trace: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<ForwardPass<'t>> {
        let n = molecule.len();
        if coords.shape() != (n, 3) {
            return Err(Error::Shape {
                op: "forward",
                lhs: coords.shape(),
                rhs: (n, 3),
            });
        }
        let z = molecule.atomic_numbers();
        let pairs = PairIndex::new(n);
        let r = pair_distances(coords, &pairs)?;
        let features = self.basis.expand(r, bound)?;
        let zf: Vec<u32> = pairs.first().iter().map(|&i| z[i]).collect();
        let zs: Vec<u32> = pairs.second().iter().map(|&j| z[j]).collect();
        let mut x = self.embed(bound, z)?;
        for layer in 0..self.blocks.len() {
            let unique = self.blocks[layer].kernel.forward(bound, features, &zf, &zs)?;
            let lambda = pairs.expand(unique)?;
            x = self.block(bound, layer, x, lambda, trace.as_deref_mut())?;
        }
        Ok(ForwardPass {
            energy: self.readout(bound, x)?,
            features: x,
        })
    }

    pub fn energy(&self, molecule: &Molecule) -> Result<f64> {
        let tape = self.new_tape();
        let bound = self.store.bind(&tape)?;
        let coords = tape.constant(molecule.coords_tensor())?;
        Ok(self.forward(&bound, molecule, coords, None)?.energy.item())
    }

    pub fn predict(&self, molecule: &Molecule, sign: ForceSign) -> Result<Prediction> {
        let tape = self.new_tape();
        let bound = self.store.bind(&tape)?;
        let coords = tape.leaf(molecule.coords_tensor())?;
        let energy = self.forward(&bound, molecule, coords, None)?.energy;
        let grad = tape.grad(energy, &[coords])?[0].value();
        let s = sign.factor();
        let forces = (0..molecule.len())
            .map(|i| [s * grad.get(i, 0), s * grad.get(i, 1), s * grad.get(i, 2)])
            .collect();
        Ok(Prediction {
            energy: energy.item(),
            forces,
        })
    }

    /// Final per-atom features.
    pub fn features(&self, molecule: &Molecule) -> Result<Tensor> {
        let tape = self.new_tape();
        let bound = self.store.bind(&tape)?;
        let coords = tape.constant(molecule.coords_tensor())?;
        let pass = self.forward(&bound, molecule, coords, None)?;
        Ok((*pass.features.value()).clone())
    }

    /// Per-layer, per-head attention maps for `molecule`.
    pub fn attention_trace(&self, molecule: &Molecule) -> Result<Vec<AttentionRecord>> {
        let tape = self.new_tape();
        let bound = self.store.bind(&tape)?;
        let coords = tape.constant(molecule.coords_tensor())?;
        let mut records = Vec::new();
        self.forward(&bound, molecule, coords, Some(&mut records))?;
        Ok(records)
    }

    pub fn kernel_tensor(&self, layer: usize, molecule: &Molecule) -> Result<KernelTensor> {
        let block = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Usage(format!("layer {layer} out of range")))?;
        block.kernel.tensor(&self.store, &self.basis, molecule)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            meta: BTreeMap::new(),
            tensors: self
                .store
                .iter()
                .map(|(name, t)| (name.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Rebuilds a model from a checkpoint. Every parameter of the configured
    /// architecture must be present with the right shape; tensors whose names
    /// the architecture does not know are ignored.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = GeoTModel::new(ckpt.config.clone(), 0)?;
        let by_name: BTreeMap<&str, &Tensor> =
            ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::data(format!("checkpoint is missing parameter `{name}`")))?;
            if t.shape() != model.store.get(id).shape() {
                return Err(Error::data(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    model.store.get(id).shape()
                )));
            }
            model.store.set(id, (*t).clone());
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

const CHECKPOINT_MAGIC: &str = "geot-checkpoint 1";

/// Self-describing text container: model configuration, free-form metadata
/// and named tensors printed with 17 significant digits.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        out.push_str("[config]\n");
        for (k, v) in self.config.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out.push_str("[meta]\n");
        for (k, v) in &self.meta {
            let _ = writeln!(out, "{k} = {v}");
        }
        for (name, t) in &self.tensors {
            let _ = writeln!(out, "[tensor {name} {} {}]", t.rows(), t.cols());
            let line: Vec<String> = t.data().iter().map(|&v| fmt_f64(v)).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, l)) if l == CHECKPOINT_MAGIC => {}
            _ => return Err(Error::parse(1, format!("expected `{CHECKPOINT_MAGIC}`"))),
        }
        enum Section {
            None,
            Config,
            Meta,
        }
        let mut section = Section::None;
        let mut config = ModelConfig::default();
        let mut meta = BTreeMap::new();
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        while let Some((lineno, line)) = lines.next() {
            if line.is_empty() {
                continue;
            }
            if line == "[config]" {
                section = Section::Config;
            } else if line == "[meta]" {
                section = Section::Meta;
            } else if let Some(header) = line.strip_prefix("[tensor ").and_then(|l| l.strip_suffix(']')) {
                section = Section::None;
                let parts: Vec<&str> = header.split_whitespace().collect();
                let [name, rows, cols] = parts[..] else {
                    return Err(Error::parse(lineno, "expected `[tensor name rows cols]`"));
                };
                let dim = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| Error::parse(lineno, format!("bad dimension `{s}`")))
                };
                let (rows, cols) = (dim(rows)?, dim(cols)?);
                let (data_line, data) = lines
                    .next()
                    .ok_or_else(|| Error::parse(lineno + 1, "missing tensor values"))?;
                let values = data
                    .split_whitespace()
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|_| Error::parse(data_line, format!("bad number `{s}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if values.len() != rows * cols {
                    return Err(Error::parse(
                        data_line,
                        format!("expected {} values, found {}", rows * cols, values.len()),
                    ));
                }
                if tensors.iter().any(|(n, _)| n == name) {
                    return Err(Error::parse(lineno, format!("duplicate tensor `{name}`")));
                }
                tensors.push((name.to_string(), Tensor::new(rows, cols, values)?));
            } else {
                let (key, value) = line
                    .split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| Error::parse(lineno, "expected `key = value`"))?;
                match section {
                    Section::Config => {
                        if !config.set(key, value)? {
                            return Err(Error::parse(lineno, format!("unknown config key `{key}`")));
                        }
                    }
                    Section::Meta => {
                        meta.insert(key.to_string(), value.to_string());
                    }
                    Section::None => return Err(Error::parse(lineno, "entry outside of a section")),
                }
            }
        }
        config.validate()?;
        Ok(Self {
            config,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
