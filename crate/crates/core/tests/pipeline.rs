use geot::data_io::{generate_synthetic, parse_xyz, read_xyz, write_xyz, SyntheticSpec};
use geot::geometry::Molecule;
use geot::model::{ForceSign, GeoTModel, ModelConfig};
use geot::training::{evaluate, TrainConfig, Trainer};
use proptest::prelude::*;

fn small_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        d_rbf: 16,
        d_code: 8,
        ..ModelConfig::default()
    }
}

fn synthetic(n: usize, seed: u64) -> Vec<Molecule> {
    generate_synthetic(&SyntheticSpec {
        n_molecules: n,
        min_atoms: 3,
        max_atoms: 6,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

#[test]
fn saved_model_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = GeoTModel::new(small_config(), 9).unwrap();
    model.save(&path).unwrap();
    let back = GeoTModel::load(&path).unwrap();
    for mol in synthetic(5, 1) {
        let a = model.predict(&mol, ForceSign::Physical).unwrap();
        let b = back.predict(&mol, ForceSign::Physical).unwrap();
        assert_eq!(a.energy.to_bits(), b.energy.to_bits());
        assert_eq!(a.forces, b.forces);
    }
}

#[test]
fn xyz_file_round_trip_keeps_labels() {
    let mols = synthetic(8, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.xyz");
    std::fs::write(&path, write_xyz(&mols)).unwrap();
    assert_eq!(read_xyz(&path).unwrap(), mols);
}

#[test]
fn short_training_lowers_training_loss() {
    let train = synthetic(16, 3);
    let cfg = TrainConfig {
        lr: 1e-3,
        warmup_steps: 1,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let sign = cfg.force_sign;
    let mut trainer = Trainer::new(GeoTModel::new(small_config(), 4).unwrap(), cfg).unwrap();
    let before = evaluate(trainer.model(), &train, sign).unwrap();
    for _ in 0..60 {
        trainer.train_step(&train).unwrap();
    }
    let after = evaluate(trainer.model(), &train, sign).unwrap();
    assert!(
        after.energy_mae < before.energy_mae,
        "{} -> {}",
        before.energy_mae,
        after.energy_mae
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn energy_ignores_translation_and_order(seed in 0u64..1000, shift in prop::array::uniform3(-10.0f64..10.0)) {
        let model = GeoTModel::new(small_config(), seed).unwrap();
        let mol = synthetic(1, seed).remove(0);
        let identity = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let perm: Vec<usize> = (0..mol.len()).rev().collect();
        let moved = mol.transformed(&identity, shift).unwrap().permuted(&perm).unwrap();
        let e0 = model.energy(&mol).unwrap();
        let e1 = model.energy(&moved).unwrap();
        prop_assert!((e0 - e1).abs() <= 1e-9 * (1.0 + e0.abs()));
    }

    #[test]
    fn paper_and_physical_forces_are_negatives(seed in 0u64..1000) {
        let model = GeoTModel::new(small_config(), seed).unwrap();
        let mol = synthetic(1, seed + 7).remove(0);
        let p = model.predict(&mol, ForceSign::Paper).unwrap();
        let q = model.predict(&mol, ForceSign::Physical).unwrap();
        for (a, b) in p.forces.iter().zip(&q.forces) {
            for k in 0..3 {
                prop_assert_eq!(a[k], -b[k]);
            }
        }
    }

    #[test]
    fn written_predictions_parse_back(seed in 0u64..1000) {
        let model = GeoTModel::new(small_config(), seed).unwrap();
        let mol = synthetic(1, seed).remove(0);
        let p = model.predict(&mol, ForceSign::Paper).unwrap();
        let labelled = mol.without_labels().with_energy(p.energy).with_forces(p.forces.clone()).unwrap();
        let back = parse_xyz(&write_xyz(std::slice::from_ref(&labelled))).unwrap();
        prop_assert_eq!(back, vec![labelled]);
    }
}
