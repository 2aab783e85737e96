use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geot::autodiff::Tensor;
use geot::data_io::{generate_synthetic, parse_xyz, write_xyz, SyntheticSpec};
use geot::model::{ForceSign, GeoTModel, ModelConfig};

const TINY: &str = "--n-layers 2 --d-model 16 --heads 2 --d-ff 32 --d-rbf 16 --d-code 16 --n-basis 32";

fn geot(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_geot"));
    cmd.args(args).env_remove("GEOT_OUTPUT_DIR");
    if let Some(dir) = env_out {
        cmd.env("GEOT_OUTPUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

fn split(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_model(seed: u64) -> GeoTModel {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        d_rbf: 16,
        d_code: 16,
        ..ModelConfig::default()
    };
    GeoTModel::new(cfg, seed).unwrap()
}

fn write_molecules(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let mols = generate_synthetic(&SyntheticSpec {
        n_molecules: n,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let path = dir.join(format!("mols{seed}.xyz"));
    std::fs::write(&path, write_xyz(&mols)).unwrap();
    path
}

fn metric(csv: &str, split: &str, name: &str) -> Vec<f64> {
    csv.lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f.len() == 4 && f[1] == split && f[2] == name).then(|| f[3].parse().unwrap())
        })
        .collect()
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let out = geot(&["train", "--config", "/nonexistent/run.cfg"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/nonexistent/run.cfg"), "{}", stderr(&out));
}

#[test]
fn bad_overrides_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    for args in [
        vec!["train", "--output-dir", d, "--learning-rate", "1"],
        vec!["train", "--output-dir", d, "--heads", "many"],
        vec!["train", "--output-dir", d, "--d-model", "10", "--heads", "4"],
        vec!["eval", "--checkpoint", "x"],
    ] {
        assert_eq!(geot(&args, None).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn synthetic_training_improves_and_repeats_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let args = format!(
        "train {TINY} --synthetic-molecules 120 --batch-size 8 --max-steps 300 --warmup-steps 50 \
         --lr 2e-3 --eval-every 100 --seed 5"
    );
    let runs: Vec<PathBuf> = ["a", "b"]
        .iter()
        .map(|name| {
            let out_dir = dir.path().join(name);
            let mut a = split(&args);
            a.extend(["--output-dir", out_dir.to_str().unwrap()]);
            let out = geot(&a, None);
            assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
            out_dir
        })
        .collect();
    let csv = std::fs::read_to_string(runs[0].join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,split,metric,value\n"));
    let val = metric(&csv, "val", "energy_mae");
    assert_eq!(val.len(), 4);
    assert!(val[3] < val[0], "{val:?}");
    assert_eq!(csv, std::fs::read_to_string(runs[1].join("metrics.csv")).unwrap());
    for f in ["best.ckpt", "last.ckpt"] {
        assert_eq!(std::fs::read(runs[0].join(f)).unwrap(), std::fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
    let best = GeoTModel::load(&runs[0].join("best.ckpt")).unwrap();
    assert_eq!(best.config().d_model, 16);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = format!("train {TINY} --synthetic-molecules 50 --batch-size 8 --warmup-steps 5 --eval-every 5 --seed 2");
    let run = |name: &str, extra: &[&str]| {
        let out_dir = dir.path().join(name);
        let mut a = split(&base);
        a.extend(["--output-dir", out_dir.to_str().unwrap()]);
        a.extend(extra);
        let out = geot(&a, None);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        out_dir
    };
    let straight = run("straight", &["--max-steps", "20"]);
    let first = run("first", &["--max-steps", "10"]);
    let resume_from = first.join("last.ckpt");
    let second = run("second", &["--max-steps", "20", "--resume", resume_from.to_str().unwrap()]);
    assert_eq!(
        std::fs::read(straight.join("last.ckpt")).unwrap(),
        std::fs::read(second.join("last.ckpt")).unwrap()
    );
}

#[test]
fn output_dir_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let from_file = dir.path().join("file");
    let from_env = dir.path().join("env");
    let from_flag = dir.path().join("flag");
    std::fs::write(
        &cfg,
        format!("output_dir = {}\nsynthetic_molecules = 20\nmax_steps = 1\n", from_file.display()),
    )
    .unwrap();
    let args = split(&format!("train --config {} {TINY}", cfg.display()))
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    let run = |extra: &[&str], env: Option<&Path>| {
        let mut a: Vec<&str> = args.iter().map(String::as_str).collect();
        a.extend(extra);
        assert_eq!(geot(&a, env).status.code(), Some(0));
    };
    run(&[], None);
    assert!(from_file.join("metrics.csv").exists());
    run(&[], Some(&from_env));
    assert!(from_env.join("metrics.csv").exists());
    run(&["--output-dir", from_flag.to_str().unwrap()], Some(&from_env));
    assert!(from_flag.join("metrics.csv").exists());
}

#[test]
fn eval_of_constant_model_is_label_spread_around_bias() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = tiny_model(0);
    let store = model.params_mut();
    for id in store.ids().collect::<Vec<_>>() {
        let (r, c) = store.get(id).shape();
        store.set(id, Tensor::zeros(r, c));
    }
    let b = 0.75;
    let id = store.find("readout.b").unwrap();
    store.set(id, Tensor::scalar(b));
    let ckpt = dir.path().join("zero.ckpt");
    model.save(&ckpt).unwrap();

    let energies = [2.0, -1.0, 0.75, 3.5];
    let mols: Vec<_> = energies
        .iter()
        .enumerate()
        .map(|(k, &e)| {
            geot::geometry::Molecule::new(vec![1, 8], vec![[0.0; 3], [1.0 + k as f64 * 0.1, 0.0, 0.0]])
                .unwrap()
                .with_energy(e)
        })
        .collect();
    let data = dir.path().join("const.xyz");
    std::fs::write(&data, write_xyz(&mols)).unwrap();
    let expected = energies.iter().map(|e| (e - b).abs()).sum::<f64>() / energies.len() as f64;

    let mut reports = Vec::new();
    for name in ["one", "two"] {
        let out_dir = dir.path().join(name);
        let out = geot(
            &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", data.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()],
            None,
        );
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        reports.push(std::fs::read_to_string(out_dir.join("eval.csv")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let mae: f64 = reports[0]
        .lines()
        .find_map(|l| l.strip_prefix("energy_mae,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((mae - expected).abs() < 1e-15, "{mae} vs {expected}");

    let empty = dir.path().join("empty.xyz");
    std::fs::write(&empty, "").unwrap();
    let out = geot(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", empty.to_str().unwrap()], Some(dir.path()));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_rejects_mismatched_config() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    tiny_model(1).save(&ckpt).unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "n_layers = 3\nd_model = 16\nheads = 2\n").unwrap();
    let data = write_molecules(dir.path(), 3, 1);
    let out = geot(
        &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", data.to_str().unwrap(), "--config", cfg.to_str().unwrap()],
        Some(dir.path()),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("n_layers"), "{}", stderr(&out));
}

#[test]
fn forces_output_round_trips_and_sign_flag_negates() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(3);
    let ckpt = dir.path().join("m.ckpt");
    model.save(&ckpt).unwrap();
    let input = write_molecules(dir.path(), 4, 2);
    let frames = parse_xyz(&std::fs::read_to_string(&input).unwrap()).unwrap();
    let mut outputs = Vec::new();
    for sign in ["paper", "physical"] {
        let path = dir.path().join(format!("{sign}.xyz"));
        let out = geot(
            &["forces", "--checkpoint", ckpt.to_str().unwrap(), "--xyz", input.to_str().unwrap(), "--sign", sign, "--output", path.to_str().unwrap()],
            None,
        );
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        outputs.push(parse_xyz(&std::fs::read_to_string(&path).unwrap()).unwrap());
    }
    for ((paper, physical), original) in outputs[0].iter().zip(&outputs[1]).zip(&frames) {
        assert_eq!(paper.coords(), original.coords());
        assert_eq!(paper.atomic_numbers(), original.atomic_numbers());
        let expect = model.predict(original, ForceSign::Paper).unwrap();
        assert_eq!(paper.energy(), Some(expect.energy));
        assert_eq!(paper.forces().unwrap(), &expect.forces[..]);
        for (a, b) in paper.forces().unwrap().iter().zip(physical.forces().unwrap()) {
            assert_eq!(*a, b.map(|v| -v));
        }
        for k in 0..3 {
            assert!(paper.forces().unwrap().iter().map(|f| f[k]).sum::<f64>().abs() < 1e-10);
        }
    }
    let stdout = geot(&["forces", "--checkpoint", ckpt.to_str().unwrap(), "--xyz", input.to_str().unwrap()], None);
    let printed = parse_xyz(&String::from_utf8(stdout.stdout).unwrap()).unwrap();
    assert_eq!(printed, outputs[0]);

    let bad = dir.path().join("bad.xyz");
    std::fs::write(&bad, "2\n\nH 0 0 0\nH 0 0\n").unwrap();
    let out = geot(&["forces", "--checkpoint", ckpt.to_str().unwrap(), "--xyz", bad.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 4"), "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_fails_on_fault_and_warns_on_zero_trials() {
    let ok = geot(&["gradcheck", "--trials", "5", "--seed", "1"], None);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = geot(&["gradcheck", "--trials", "3", "--inject-fault"], None);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
    let none = geot(&["gradcheck", "--trials", "0"], None);
    assert_eq!(none.status.code(), Some(0));
    assert!(stderr(&none).contains("warning"));
}

#[test]
fn gradcheck_with_pinned_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "n_layers = 1\nd_model = 8\nheads = 2\nbasis = bessel\nsoftmax_baseline = true\n").unwrap();
    let out = geot(&["gradcheck", "--trials", "3", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn ablation_table_has_three_rows_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let mut tables = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let args = format!("ablate-basis {TINY} --synthetic-molecules 40 --batch-size 8 --max-steps 10 --eval-every 5");
        let mut a = split(&args);
        a.extend(["--output-dir", out_dir.to_str().unwrap()]);
        let out = geot(&a, None);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        tables.push(std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
    let lines: Vec<&str> = tables[0].lines().collect();
    assert_eq!(lines[0], "basis,val_energy_mae");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["gaussian", "linear", "bessel"]);
}

#[test]
fn attn_dump_files() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    tiny_model(4).save(&ckpt).unwrap();
    let input = write_molecules(dir.path(), 2, 3);
    let frames = parse_xyz(&std::fs::read_to_string(&input).unwrap()).unwrap();
    let out_dir = dir.path().join("dump");
    let out = geot(
        &["attn-dump", "--checkpoint", ckpt.to_str().unwrap(), "--xyz", input.to_str().unwrap(), "--frame", "1"],
        Some(&out_dir),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let n = frames[1].len();
    let maps = std::fs::read_to_string(out_dir.join("attention.csv")).unwrap();
    assert_eq!(maps.lines().count(), 1 + 2 * n * n);
    let atoms = std::fs::read_to_string(out_dir.join("attention_atoms.csv")).unwrap();
    assert_eq!(atoms.lines().count(), 1 + 2 * n);
    let out = geot(
        &["attn-dump", "--checkpoint", ckpt.to_str().unwrap(), "--xyz", input.to_str().unwrap(), "--frame", "5"],
        Some(&out_dir),
    );
    assert_eq!(out.status.code(), Some(2));
}
