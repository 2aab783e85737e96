use geot::autodiff::{Precision, Tensor};
use geot::data_io::{generate_synthetic, RunConfig, SyntheticSpec};
use geot::geometry::{BasisKind, KernelMode, Molecule};
use geot::model::{BlockKind, ForceSign, GeoTModel, ModelConfig};
use geot::Result;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::GradcheckArgs;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// Denominator floor so vanishing forces do not turn round-off into a
/// failure.
const FORCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckTrial {
    pub n_atoms: usize,
    pub config: ModelConfig,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub trials: Vec<GradcheckTrial>,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let mut cfg = ModelConfig {
        n_layers: rng.random_range(1..=4),
        d_model: heads * rng.random_range(1..=64 / heads),
        heads,
        d_ff: rng.random_range(4..=64),
        d_rbf: rng.random_range(4..=32),
        d_code: rng.random_range(4..=32),
        block: if rng.random_bool(0.5) { BlockKind::ParallelMlp } else { BlockKind::Sequential },
        kernel: if rng.random_bool(0.7) { KernelMode::AtomAware } else { KernelMode::Plain },
        use_attn_scale: rng.random_bool(0.8),
        use_softmax_baseline: rng.random_bool(0.2),
        scale_per_head: rng.random_bool(0.5),
        ..ModelConfig::default()
    };
    cfg.basis.kind = BasisKind::ALL[rng.random_range(0..3)];
    cfg.basis.n_basis = rng.random_range(8..=64);
    cfg
}

/// Gives every all-zero parameter (biases, AttnScale weights, norm offsets)
/// small random values so their gradient paths are exercised too.
fn perturb_zero_params(model: &mut GeoTModel, rng: &mut ChaCha8Rng) {
    let store = model.params_mut();
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get(id);
        if t.data().iter().all(|&v| v == 0.0) {
            let (r, c) = t.shape();
            let data = (0..r * c).map(|_| rng.random_range(-0.3..0.3)).collect();
            store.set(id, Tensor::new(r, c, data).expect("shape matches"));
        }
    }
}

fn random_molecule(rng: &mut ChaCha8Rng) -> Result<Molecule> {
    let n = rng.random_range(2..=12);
    let spec = SyntheticSpec {
        n_molecules: 1,
        min_atoms: n,
        max_atoms: n,
        elements: vec![1, 6, 7, 8, 9, 16],
        seed: rng.random(),
        ..SyntheticSpec::default()
    };
    let mol = generate_synthetic(&spec)?.remove(0);
    Ok(mol.without_labels())
}

/// `max |analytic - fd| / max(max |fd|, floor)` over all force components.
fn check(model: &GeoTModel, mol: &Molecule, fault: f64) -> Result<f64> {
    let analytic = model.predict(mol, ForceSign::Paper)?.forces;
    let z = mol.atomic_numbers().to_vec();
    let mut worst = 0.0f64;
    let mut scale = FORCE_FLOOR;
    for i in 0..mol.len() {
        for k in 0..3 {
            let shifted = |delta: f64| -> Result<f64> {
                let mut coords = mol.coords().to_vec();
                coords[i][k] += delta;
                model.energy(&Molecule::new(z.clone(), coords)?)
            };
            let fd = (shifted(STEP)? - shifted(-STEP)?) / (2.0 * STEP);
            worst = worst.max((analytic[i][k] * fault - fd).abs());
            scale = scale.max(fd.abs());
        }
    }
    Ok(worst / scale)
}

/// Central finite-difference check of the force path on random molecules
/// and, unless `--config` pins one, random architectures.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<GradcheckReport> {
    let pinned = args.config.as_deref().map(RunConfig::load).transpose()?;
    if args.trials == 0 {
        eprintln!("warning: 0 trials requested; nothing was checked");
    }
    let fault = if args.inject_fault { 1.0 + 1e-3 } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut trials = Vec::with_capacity(args.trials);
    for t in 0..args.trials {
        let mut config = match &pinned {
            Some(run) => run.model.clone(),
            None => random_config(&mut rng),
        };
        config.precision = Precision::F64;
        let mut model = GeoTModel::new(config.clone(), rng.random())?;
        perturb_zero_params(&mut model, &mut rng);
        let mol = random_molecule(&mut rng)?;
        let rel_error = check(&model, &mol, fault)?;
        println!(
            "trial {t:>3}  atoms {:>2}  layers {}  d_model {:>2}  heads {}  basis {:<8}  rel err {rel_error:.3e}",
            mol.len(),
            config.n_layers,
            config.d_model,
            config.heads,
            config.basis.kind.name()
        );
        trials.push(GradcheckTrial {
            n_atoms: mol.len(),
            config,
            rel_error,
        });
    }
    let max_rel_error = trials.iter().map(|t| t.rel_error).fold(0.0, f64::max);
    let passed = max_rel_error < GRADCHECK_TOLERANCE;
    println!(
        "max relative error {max_rel_error:.3e} (tolerance {GRADCHECK_TOLERANCE:e}): {}",
        if passed { "PASS" } else { "FAIL" }
    );
    Ok(GradcheckReport {
        trials,
        max_rel_error,
        passed,
    })
}
