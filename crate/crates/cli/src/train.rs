use std::fmt::Write as _;
use std::path::PathBuf;

use geot::data_io::{read_xyz, split_dataset, RunConfig};
use geot::geometry::{BasisKind, Molecule};
use geot::model::{Checkpoint, ForceSign, GeoTModel};
use geot::training::{evaluate, EvalMetrics, MetricRow, StopReason, TrainReport, Trainer, METRICS_CSV_HEADER};
use geot::{fmt_f64, Error, Result};

use crate::{output_dir, resolve_run, write_file, EvalArgs, ResolvedRun, RunArgs};

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub output_dir: PathBuf,
    /// Validation energy MAE of the untrained model.
    pub initial_val_energy_mae: Option<f64>,
    /// Metrics of the retained (best) model on the test split.
    pub test: Option<EvalMetrics>,
}

struct Splits {
    train: Vec<Molecule>,
    val: Vec<Molecule>,
    test: Vec<Molecule>,
}

fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let data = cfg.data.load()?;
    if data.is_empty() {
        return Err(Error::Usage("dataset has no molecules".into()));
    }
    let split = split_dataset(data.len(), cfg.data.split, cfg.data.split_seed)?;
    Ok(Splits {
        train: data.subset(&split.train),
        val: data.subset(&split.val),
        test: data.subset(&split.test),
    })
}

fn progress(row: &MetricRow) {
    if row.split == "val" {
        println!("step {:>7}  val {:<10} {:.6e}", row.step, row.metric, row.value);
    }
}

fn best_checkpoint(trainer: &Trainer, report: &TrainReport) -> Checkpoint {
    let mut ckpt = trainer.best_model().to_checkpoint();
    for (k, v) in trainer.config().entries() {
        ckpt.meta.insert(format!("train.{k}"), v);
    }
    ckpt.meta.insert("step".into(), report.best_step.to_string());
    if let Some(b) = report.best_val_energy_mae {
        ckpt.meta.insert("val_energy_mae".into(), fmt_f64(b));
    }
    ckpt
}

/// Trains per the resolved configuration and writes `config.txt`,
/// `metrics.csv`, `best.ckpt` and `last.ckpt` to the output directory.
/// A diverged run still writes its files; the caller decides the exit code
/// from `report.stop`.
pub fn cmd_train(args: &RunArgs) -> Result<TrainOutcome> {
    let ResolvedRun {
        config: cfg,
        output_dir: dir,
        resume,
    } = resolve_run(args)?;
    let data = load_splits(&cfg)?;
    let mut trainer = match &resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config != cfg.model {
                return Err(Error::Config(format!(
                    "{} was trained with a different architecture than the configuration",
                    path.display()
                )));
            }
            Trainer::resume(&ckpt, cfg.train.clone())?
        }
        None => Trainer::new(GeoTModel::new(cfg.model.clone(), cfg.train.seed)?, cfg.train.clone())?,
    };
    write_file(&dir.join("config.txt"), &cfg.to_text())?;

    let mut report = trainer.run(&data.train, &data.val, progress)?;
    let test = if data.test.is_empty() {
        None
    } else {
        let m = evaluate(trainer.best_model(), &data.test, cfg.train.force_sign)?;
        let step = report.best_step;
        report.metrics.push(MetricRow { step, split: "test", metric: "energy_mae", value: m.energy_mae });
        if let Some(f) = m.force_mae {
            report.metrics.push(MetricRow { step, split: "test", metric: "force_mae", value: f });
        }
        Some(m)
    };

    let mut csv = format!("{METRICS_CSV_HEADER}\n");
    for row in &report.metrics {
        let _ = writeln!(csv, "{row}");
    }
    write_file(&dir.join("metrics.csv"), &csv)?;
    best_checkpoint(&trainer, &report).save(&dir.join("best.ckpt"))?;
    trainer.checkpoint().save(&dir.join("last.ckpt"))?;

    let initial_val_energy_mae = report
        .metrics
        .iter()
        .find(|r| r.split == "val" && r.metric == "energy_mae")
        .map(|r| r.value);
    match &report.stop {
        StopReason::Completed => println!("completed {} steps ({} epochs)", report.steps, report.epochs),
        StopReason::EarlyStopped => println!("early stop after {} steps", report.steps),
        StopReason::Diverged { step, detail } => {
            eprintln!("error: training diverged at step {step}: {detail}; kept parameters from step {}", report.best_step)
        }
    }
    if let Some(b) = report.best_val_energy_mae {
        println!("best val energy MAE {b:.6e} at step {}", report.best_step);
    }
    if let Some(t) = &test {
        println!("test energy MAE {:.6e}", t.energy_mae);
    }
    println!("wrote {}", dir.display());
    Ok(TrainOutcome {
        report,
        output_dir: dir,
        initial_val_energy_mae,
        test,
    })
}

/// Evaluates a checkpoint and writes `eval.csv`.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalMetrics> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    if let Some(path) = &args.config {
        let cfg = RunConfig::load(path)?;
        let mismatched: Vec<&str> = cfg
            .model
            .entries()
            .into_iter()
            .zip(ckpt.config.entries())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0)
            .collect();
        if !mismatched.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint does not match {}: {}",
                path.display(),
                mismatched.join(", ")
            )));
        }
    }
    let model = GeoTModel::from_checkpoint(&ckpt)?;
    let molecules = read_xyz(&args.dataset)?;
    if molecules.is_empty() {
        return Err(Error::Usage(format!("{} contains no molecules", args.dataset.display())));
    }
    let sign = match (&args.sign, ckpt.meta.get("train.force_sign")) {
        (Some(s), _) => ForceSign::parse(s)?,
        (None, Some(s)) => ForceSign::parse(s)?,
        (None, None) => ForceSign::Paper,
    };
    let m = evaluate(&model, &molecules, sign)?;
    let mut csv = String::from("metric,value\n");
    let _ = writeln!(csv, "n,{}", m.n);
    let _ = writeln!(csv, "energy_mae,{}", fmt_f64(m.energy_mae));
    println!("molecules   {}", m.n);
    println!("energy MAE  {:.6e}", m.energy_mae);
    if let Some(f) = m.force_mae {
        let _ = writeln!(csv, "force_mae,{}", fmt_f64(f));
        println!("force MAE   {f:.6e}");
    }
    let path = output_dir(args.output_dir.as_deref(), &RunConfig::default().output_dir).join("eval.csv");
    write_file(&path, &csv)?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub basis: BasisKind,
    pub val_energy_mae: f64,
}

/// Trains one model per basis family with the same data, seed and budget,
/// and writes `ablation.csv`.
pub fn cmd_ablate_basis(args: &RunArgs) -> Result<Vec<AblationRow>> {
    let ResolvedRun {
        config: cfg,
        output_dir: dir,
        resume,
    } = resolve_run(args)?;
    if resume.is_some() {
        return Err(Error::Usage("ablate-basis does not support --resume".into()));
    }
    let data = load_splits(&cfg)?;
    if data.val.is_empty() {
        return Err(Error::Usage("basis ablation needs a non-empty validation split".into()));
    }
    let mut rows = Vec::new();
    for kind in BasisKind::ALL {
        let mut model_cfg = cfg.model.clone();
        model_cfg.basis.kind = kind;
        let mut trainer = Trainer::new(GeoTModel::new(model_cfg, cfg.train.seed)?, cfg.train.clone())?;
        let report = trainer.run(&data.train, &data.val, |_| {})?;
        if let StopReason::Diverged { step, detail } = &report.stop {
            eprintln!("warning: {} run diverged at step {step}: {detail}", kind.name());
        }
        let mae = report
            .best_val_energy_mae
            .ok_or_else(|| Error::Usage("no validation result was produced".into()))?;
        println!("{:<9} val energy MAE {mae:.6e}", kind.name());
        rows.push(AblationRow {
            basis: kind,
            val_energy_mae: mae,
        });
    }
    let mut csv = String::from("basis,val_energy_mae\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{}", r.basis.name(), fmt_f64(r.val_energy_mae));
    }
    write_file(&dir.join("ablation.csv"), &csv)?;
    Ok(rows)
}
