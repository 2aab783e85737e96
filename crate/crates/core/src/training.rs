//! Losses, the Adam optimizer, the learning-rate schedule and the training
//! loop with validation-based early stopping.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::data_io::config::parse_value;
use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::geometry::Molecule;
use crate::model::{Checkpoint, ForceSign, GeoTModel};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: u64,
    pub eval_every: u64,
    /// Evaluations without improvement before stopping; 0 disables.
    pub patience: usize,
    /// Weight `c` of the force term; 0 trains on energies only.
    pub force_weight: f64,
    /// Sign linking `dE/dr` to the force labels.
    pub force_sign: ForceSign,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            warmup_steps: 3000,
            decay_factor: 0.95,
            decay_every: 200_000,
            batch_size: 32,
            max_epochs: 300,
            max_steps: 0,
            eval_every: 10_000,
            patience: 10,
            force_weight: 1000.0,
            force_sign: ForceSign::Physical,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lr",
        "warmup_steps",
        "decay_factor",
        "decay_every",
        "batch_size",
        "max_epochs",
        "max_steps",
        "eval_every",
        "patience",
        "force_weight",
        "force_sign",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("decay_factor must lie in (0, 1]"));
        }
        if self.decay_every == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("decay_every, batch_size and eval_every must be positive"));
        }
        if !(self.force_weight >= 0.0 && self.force_weight.is_finite()) {
            return Err(Error::config("force_weight must be non-negative"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse_value(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_value(key, value)?,
            "decay_factor" => self.decay_factor = parse_value(key, value)?,
            "decay_every" => self.decay_every = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "max_steps" => self.max_steps = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "force_weight" => self.force_weight = parse_value(key, value)?,
            "force_sign" => self.force_sign = ForceSign::parse(value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("decay_factor", self.decay_factor.to_string()),
            ("decay_every", self.decay_every.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("patience", self.patience.to_string()),
            ("force_weight", self.force_weight.to_string()),
            ("force_sign", self.force_sign.name().to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// Learning rate for 1-based optimizer step `step`: linear warmup, then
/// stepwise exponential decay.
pub fn learning_rate(cfg: &TrainConfig, step: u64) -> f64 {
    let warm = if cfg.warmup_steps == 0 {
        1.0
    } else {
        (step as f64 / cfg.warmup_steps as f64).min(1.0)
    };
    let decays = (step / cfg.decay_every) as i32;
    cfg.lr * warm * cfg.decay_factor.powi(decays)
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::data(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(Error::Usage("mean absolute error of an empty set".into()));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// `|E_pred - E| + c * Σ_atoms Σ_xyz |F_pred - F|` for one molecule.
pub fn composite_loss(
    e_pred: f64,
    e_true: f64,
    f_pred: &[[f64; 3]],
    f_true: &[[f64; 3]],
    c: f64,
) -> Result<f64> {
    if f_pred.len() != f_true.len() {
        return Err(Error::data("force arrays differ in length"));
    }
    let force: f64 = f_pred
        .iter()
        .zip(f_true)
        .flat_map(|(p, t)| (0..3).map(move |k| (p[k] - t[k]).abs()))
        .sum();
    Ok((e_pred - e_true).abs() + c * force)
}

/// Builds the per-molecule loss on `tape`. With a positive force weight the
/// predicted forces are themselves tape values, so the loss gradient runs
/// through the force computation.
pub fn molecule_loss<'t>(
    model: &GeoTModel,
    tape: &'t Tape,
    bound: &Bound<'t>,
    molecule: &Molecule,
    force_weight: f64,
    sign: ForceSign,
) -> Result<Var<'t>> {
    let target = molecule
        .energy()
        .ok_or_else(|| Error::data("molecule has no energy label"))?;
    let coords = if force_weight > 0.0 {
        tape.leaf(molecule.coords_tensor())?
    } else {
        tape.constant(molecule.coords_tensor())?
    };
    let energy = model.forward(bound, molecule, coords, None)?.energy;
    let mut loss = energy.add_scalar(-target)?.abs()?;
    if force_weight > 0.0 {
        let labels = molecule
            .forces()
            .ok_or_else(|| Error::config("force_weight > 0 but a molecule has no force labels"))?;
        let labels = Tensor::from_fn(molecule.len(), 3, |i, k| labels[i][k]);
        let grad = tape.grad(energy, &[coords])?[0];
        let term = grad
            .scale(sign.factor())?
            .sub(tape.constant(labels)?)?
            .abs()?
            .sum_all()?
            .scale(force_weight)?;
        loss = loss.add(term)?;
    }
    Ok(loss)
}

/// Mean loss over `batch` and its gradient for every parameter.
pub fn batch_loss_and_grads(
    model: &GeoTModel,
    batch: &[&Molecule],
    force_weight: f64,
    sign: ForceSign,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let store = model.params();
    let mut grads: Vec<Tensor> = store
        .iter()
        .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
        .collect();
    let mut total = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for mol in batch {
        let tape = model.new_tape();
        let bound = store.bind(&tape)?;
        let loss = molecule_loss(model, &tape, &bound, mol, force_weight, sign)?;
        total += loss.item();
        for (acc, g) in grads.iter_mut().zip(tape.grad(loss, bound.vars())?) {
            for (a, v) in acc.data_mut().iter_mut().zip(g.value().data()) {
                *a += inv * v;
            }
        }
    }
    Ok((total * inv, grads))
}

/// Mean loss over `batch` without gradients.
pub fn batch_loss(model: &GeoTModel, batch: &[&Molecule], force_weight: f64, sign: ForceSign) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let mut total = 0.0;
    for mol in batch {
        let tape = model.new_tape();
        let bound = model.params().bind(&tape)?;
        total += molecule_loss(model, &tape, &bound, mol, force_weight, sign)?.item();
    }
    Ok(total / batch.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr`. Nothing is modified if the
    /// gradients or the updated parameters would be non-finite.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::data(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (id, g) in store.ids().zip(grads) {
            if !g.is_finite() {
                return Err(Error::Diverged {
                    step: self.t + 1,
                    detail: format!("non-finite gradient for `{}`", store.name(id)),
                });
            }
        }
        let t = self.t + 1;
        let c1 = 1.0 - self.beta1.powi(t as i32);
        let c2 = 1.0 - self.beta2.powi(t as i32);
        let mut m_new = Vec::with_capacity(grads.len());
        let mut v_new = Vec::with_capacity(grads.len());
        let mut p_new = Vec::with_capacity(grads.len());
        for (k, id) in store.ids().enumerate() {
            let g = grads[k].data();
            let m: Vec<f64> = self.m[k]
                .data()
                .iter()
                .zip(g)
                .map(|(m, g)| self.beta1 * m + (1.0 - self.beta1) * g)
                .collect();
            let v: Vec<f64> = self.v[k]
                .data()
                .iter()
                .zip(g)
                .map(|(v, g)| self.beta2 * v + (1.0 - self.beta2) * g * g)
                .collect();
            let p = store.get(id);
            let updated: Vec<f64> = p
                .data()
                .iter()
                .zip(m.iter().zip(&v))
                .map(|(p, (m, v))| p - lr * (m / c1) / ((v / c2).sqrt() + self.eps))
                .collect();
            if updated.iter().any(|x| !x.is_finite()) {
                return Err(Error::Diverged {
                    step: t,
                    detail: format!("update made `{}` non-finite", store.name(id)),
                });
            }
            let shape = p.shape();
            m_new.push(Tensor::new(shape.0, shape.1, m)?);
            v_new.push(Tensor::new(shape.0, shape.1, v)?);
            p_new.push(Tensor::new(shape.0, shape.1, updated)?);
        }
        for (id, p) in store.ids().collect::<Vec<_>>().into_iter().zip(p_new) {
            store.set(id, p);
        }
        self.m = m_new;
        self.v = v_new;
        self.t = t;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub n: usize,
    pub energy_mae: f64,
    /// Per-component force MAE, when every molecule has force labels.
    pub force_mae: Option<f64>,
}

pub fn evaluate(model: &GeoTModel, molecules: &[Molecule], sign: ForceSign) -> Result<EvalMetrics> {
    if molecules.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let with_forces = molecules.iter().all(|m| m.forces().is_some());
    let mut e_pred = Vec::with_capacity(molecules.len());
    let mut e_true = Vec::with_capacity(molecules.len());
    let mut f_err = 0.0;
    let mut f_count = 0usize;
    for mol in molecules {
        e_true.push(
            mol.energy()
                .ok_or_else(|| Error::data("molecule has no energy label"))?,
        );
        if with_forces {
            let p = model.predict(mol, sign)?;
            e_pred.push(p.energy);
            for (a, b) in p.forces.iter().zip(mol.forces().unwrap_or_default()) {
                for k in 0..3 {
                    f_err += (a[k] - b[k]).abs();
                }
            }
            f_count += 3 * mol.len();
        } else {
            e_pred.push(model.energy(mol)?);
        }
    }
    Ok(EvalMetrics {
        n: molecules.len(),
        energy_mae: mae(&e_pred, &e_true)?,
        force_mae: with_forces.then(|| f_err / f_count as f64),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

pub const METRICS_CSV_HEADER: &str = "step,split,metric,value";

impl fmt::Display for MetricRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.step, self.split, self.metric, fmt_f64(self.value))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    Completed,
    EarlyStopped,
    /// A non-finite loss or update; parameters were rolled back to the best
    /// validated state.
    Diverged { step: u64, detail: String },
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: u64,
    pub epochs: usize,
    pub best_step: u64,
    pub best_val_energy_mae: Option<f64>,
    pub stop: StopReason,
    pub metrics: Vec<MetricRow>,
}

fn as_divergence(e: Error, step: u64) -> Result<StopReason> {
    match e {
        Error::Diverged { step, detail } => Ok(StopReason::Diverged { step, detail }),
        Error::NonFinite { op } => Ok(StopReason::Diverged {
            step,
            detail: format!("non-finite value in `{op}`"),
        }),
        other => Err(other),
    }
}

/// Optimizer state plus the position in the data stream; everything needed
/// to continue a run exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    model: GeoTModel,
    best: GeoTModel,
    adam: Adam,
    epoch: usize,
    cursor: usize,
    best_val: Option<f64>,
    best_step: u64,
    bad_evals: usize,
}

impl Trainer {
    pub fn new(model: GeoTModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            adam: Adam::new(model.params()),
            best: model.clone(),
            model,
            cfg,
            epoch: 0,
            cursor: 0,
            best_val: None,
            best_step: 0,
            bad_evals: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &GeoTModel {
        &self.model
    }

    pub fn best_model(&self) -> &GeoTModel {
        &self.best
    }

    pub fn step(&self) -> u64 {
        self.adam.t
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    fn next_batch<'a>(&self, train: &'a [Molecule]) -> Vec<&'a Molecule> {
        let order = self.epoch_order(train.len());
        let end = (self.cursor + self.cfg.batch_size).min(train.len());
        order[self.cursor..end].iter().map(|&i| &train[i]).collect()
    }

    /// Loss of the batch the next [`Trainer::train_step`] would use.
    pub fn next_batch_loss(&self, train: &[Molecule]) -> Result<f64> {
        batch_loss(&self.model, &self.next_batch(train), self.cfg.force_weight, self.cfg.force_sign)
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn train_step(&mut self, train: &[Molecule]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        let batch = self.next_batch(train);
        let (loss, grads) =
            batch_loss_and_grads(&self.model, &batch, self.cfg.force_weight, self.cfg.force_sign)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: self.adam.t + 1,
                detail: format!("loss is {loss}"),
            });
        }
        let lr = learning_rate(&self.cfg, self.adam.t + 1);
        self.adam.update(self.model.params_mut(), &grads, lr)?;
        self.cursor += batch.len();
        if self.cursor >= train.len() {
            self.cursor = 0;
            self.epoch += 1;
        }
        Ok(loss)
    }

    fn check_labels(&self, molecules: &[Molecule], what: &str) -> Result<()> {
        if molecules.iter().any(|m| m.energy().is_none()) {
            return Err(Error::config(format!("{what} set has molecules without energy labels")));
        }
        if self.cfg.force_weight > 0.0 && molecules.iter().any(|m| m.forces().is_none()) {
            return Err(Error::config(format!(
                "force_weight > 0 but the {what} set lacks force labels"
            )));
        }
        Ok(())
    }

    fn validate_now(&mut self, val: &[Molecule], log: &mut impl FnMut(&MetricRow)) -> Result<bool> {
        let step = self.adam.t;
        let m = evaluate(&self.model, val, self.cfg.force_sign)?;
        let mut emit = |metric, value| {
            let row = MetricRow {
                step,
                split: "val",
                metric,
                value,
            };
            log(&row);
            row
        };
        let _ = emit("energy_mae", m.energy_mae);
        if let Some(f) = m.force_mae {
            let _ = emit("force_mae", f);
        }
        let improved = self.best_val.is_none_or(|b| m.energy_mae < b);
        if improved {
            self.best_val = Some(m.energy_mae);
            self.best_step = step;
            self.best = self.model.clone();
            self.bad_evals = 0;
        } else {
            self.bad_evals += 1;
        }
        Ok(improved)
    }

    /// Trains until the epoch or step budget is spent, validation stops
    /// improving for `patience` evaluations, or the run diverges. Every
    /// metric row is passed to `log` as it is produced.
    pub fn run(
        &mut self,
        train: &[Molecule],
        val: &[Molecule],
        mut log: impl FnMut(&MetricRow),
    ) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        self.check_labels(train, "training")?;
        self.check_labels(val, "validation")?;
        let mut metrics = Vec::new();
        let mut record = |row: &MetricRow, metrics: &mut Vec<MetricRow>| {
            log(row);
            metrics.push(row.clone());
        };
        if !val.is_empty() && self.best_val.is_none() {
            self.validate_now(val, &mut |r| record(r, &mut metrics))?;
        }
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        let mut last_eval = self.adam.t;
        let mut stop = loop {
            if self.epoch >= self.cfg.max_epochs
                || (self.cfg.max_steps > 0 && self.adam.t >= self.cfg.max_steps)
            {
                break StopReason::Completed;
            }
            match self.train_step(train) {
                Ok(loss) => {
                    loss_sum += loss;
                    loss_n += 1;
                }
                Err(e) => {
                    self.model = self.best.clone();
                    break as_divergence(e, self.adam.t + 1)?;
                }
            }
            if self.adam.t % self.cfg.eval_every == 0 {
                let step = self.adam.t;
                record(
                    &MetricRow { step, split: "train", metric: "loss", value: loss_sum / loss_n as f64 },
                    &mut metrics,
                );
                record(
                    &MetricRow { step, split: "train", metric: "lr", value: learning_rate(&self.cfg, step) },
                    &mut metrics,
                );
                loss_sum = 0.0;
                loss_n = 0;
                last_eval = step;
                if !val.is_empty() {
                    if let Err(e) = self.validate_now(val, &mut |r| record(r, &mut metrics)) {
                        self.model = self.best.clone();
                        break as_divergence(e, step)?;
                    }
                    if self.cfg.patience > 0 && self.bad_evals >= self.cfg.patience {
                        break StopReason::EarlyStopped;
                    }
                }
            }
        };
        if stop == StopReason::Completed && self.adam.t != last_eval {
            let step = self.adam.t;
            if loss_n > 0 {
                record(
                    &MetricRow { step, split: "train", metric: "loss", value: loss_sum / loss_n as f64 },
                    &mut metrics,
                );
            }
            if !val.is_empty() {
                if let Err(e) = self.validate_now(val, &mut |r| record(r, &mut metrics)) {
                    self.model = self.best.clone();
                    stop = as_divergence(e, step)?;
                }
            }
        }
        if val.is_empty() && !matches!(stop, StopReason::Diverged { .. }) {
            self.best = self.model.clone();
            self.best_step = self.adam.t;
        }
        Ok(TrainReport {
            steps: self.adam.t,
            epochs: self.epoch,
            best_step: self.best_step,
            best_val_energy_mae: self.best_val,
            stop,
            metrics,
        })
    }

    /// Current parameters, optimizer moments, best parameters and stream
    /// position.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        let store = self.model.params();
        for (k, (name, _)) in store.iter().enumerate() {
            ckpt.tensors.push((format!("adam.m.{name}"), self.adam.m[k].clone()));
            ckpt.tensors.push((format!("adam.v.{name}"), self.adam.v[k].clone()));
        }
        for (name, t) in self.best.params().iter() {
            ckpt.tensors.push((format!("best.{name}"), t.clone()));
        }
        let mut meta = BTreeMap::new();
        meta.insert("step".into(), self.adam.t.to_string());
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("cursor".into(), self.cursor.to_string());
        meta.insert("best_step".into(), self.best_step.to_string());
        meta.insert("bad_evals".into(), self.bad_evals.to_string());
        if let Some(b) = self.best_val {
            meta.insert("best_val".into(), fmt_f64(b));
        }
        for (k, v) in self.cfg.entries() {
            meta.insert(format!("train.{k}"), v);
        }
        ckpt.meta = meta;
        ckpt
    }

    /// Restores a run saved by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let model = GeoTModel::from_checkpoint(ckpt)?;
        let mut trainer = Trainer::new(model, cfg)?;
        let meta = |key: &str| -> Result<&str> {
            ckpt.meta
                .get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::data(format!("checkpoint has no training state (`{key}` missing)")))
        };
        trainer.adam.t = parse_value("step", meta("step")?)?;
        trainer.epoch = parse_value("epoch", meta("epoch")?)?;
        trainer.cursor = parse_value("cursor", meta("cursor")?)?;
        trainer.best_step = parse_value("best_step", meta("best_step")?)?;
        trainer.bad_evals = parse_value("bad_evals", meta("bad_evals")?)?;
        trainer.best_val = ckpt
            .meta
            .get("best_val")
            .map(|v| parse_value("best_val", v))
            .transpose()?;
        let mut best = trainer.model.clone();
        let names: Vec<String> = trainer.model.params().iter().map(|(n, _)| n.to_string()).collect();
        for (k, name) in names.iter().enumerate() {
            let get = |prefix: &str| {
                ckpt.tensor(&format!("{prefix}{name}"))
                    .cloned()
                    .ok_or_else(|| Error::data(format!("checkpoint is missing `{prefix}{name}`")))
            };
            trainer.adam.m[k] = get("adam.m.")?;
            trainer.adam.v[k] = get("adam.v.")?;
            let id = best.params().ids().nth(k).expect("same layout");
            best.params_mut().set(id, get("best.")?);
        }
        trainer.best = best;
        Ok(trainer)
    }
}
