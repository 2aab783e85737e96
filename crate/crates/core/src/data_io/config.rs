//! Flat `key = value` run configuration. `#` starts a comment; unknown keys
//! are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::dataset::Dataset;
use super::elements::{atomic_number, symbol};
use super::synthetic::{generate_synthetic, SyntheticSpec};
use super::xyz::read_xyz;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("`{key}` expects a boolean, got `{value}`"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Xyz(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SyntheticSpec,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
    pub target: String,
    pub units: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            synthetic: SyntheticSpec::default(),
            split: [0.8, 0.1, 0.1],
            split_seed: 0,
            target: "energy".into(),
            units: "eV".into(),
        }
    }
}

impl DataConfig {
    pub const KEYS: &'static [&'static str] = &[
        "dataset",
        "synthetic_molecules",
        "synthetic_min_atoms",
        "synthetic_max_atoms",
        "synthetic_elements",
        "synthetic_seed",
        "split_train",
        "split_val",
        "split_test",
        "split_seed",
        "target",
        "units",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "dataset" => {
                self.source = if value == "synthetic" {
                    DataSource::Synthetic
                } else {
                    DataSource::Xyz(PathBuf::from(value))
                }
            }
            "synthetic_molecules" => self.synthetic.n_molecules = parse_value(key, value)?,
            "synthetic_min_atoms" => self.synthetic.min_atoms = parse_value(key, value)?,
            "synthetic_max_atoms" => self.synthetic.max_atoms = parse_value(key, value)?,
            "synthetic_elements" => {
                self.synthetic.elements = value
                    .split(',')
                    .map(|s| atomic_number(s.trim()).map_err(|e| Error::config(e.to_string())))
                    .collect::<Result<_>>()?
            }
            "synthetic_seed" => self.synthetic.seed = parse_value(key, value)?,
            "split_train" => self.split[0] = parse_value(key, value)?,
            "split_val" => self.split[1] = parse_value(key, value)?,
            "split_test" => self.split[2] = parse_value(key, value)?,
            "split_seed" => self.split_seed = parse_value(key, value)?,
            "target" => self.target = value.to_string(),
            "units" => self.units = value.to_string(),
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let source = match &self.source {
            DataSource::Synthetic => "synthetic".to_string(),
            DataSource::Xyz(p) => p.display().to_string(),
        };
        let elements: Vec<&str> = self
            .synthetic
            .elements
            .iter()
            .map(|&z| symbol(z).unwrap_or("?"))
            .collect();
        vec![
            ("dataset", source),
            ("synthetic_molecules", self.synthetic.n_molecules.to_string()),
            ("synthetic_min_atoms", self.synthetic.min_atoms.to_string()),
            ("synthetic_max_atoms", self.synthetic.max_atoms.to_string()),
            ("synthetic_elements", elements.join(",")),
            ("synthetic_seed", self.synthetic.seed.to_string()),
            ("split_train", self.split[0].to_string()),
            ("split_val", self.split[1].to_string()),
            ("split_test", self.split[2].to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("target", self.target.clone()),
            ("units", self.units.clone()),
        ]
    }

    pub fn load(&self) -> Result<Dataset> {
        let molecules = match &self.source {
            DataSource::Synthetic => generate_synthetic(&self.synthetic)?,
            DataSource::Xyz(path) => read_xyz(path)?,
        };
        Ok(Dataset {
            molecules,
            target: self.target.clone(),
            units: self.units.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn is_key(key: &str) -> bool {
        key == "output_dir"
            || ModelConfig::KEYS.contains(&key)
            || TrainConfig::KEYS.contains(&key)
            || DataConfig::KEYS.contains(&key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if key == "output_dir" {
            self.output_dir = PathBuf::from(value);
            return Ok(());
        }
        if self.model.set(key, value)? || self.train.set(key, value)? || self.data.set(key, value)? {
            Ok(())
        } else {
            Err(Error::config(format!("unknown configuration key `{key}`")))
        }
    }

    /// Applies `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(idx + 1, "expected `key = value`"))?;
            self.set(key.trim(), value).map_err(|e| match e {
                Error::Config(msg) => Error::parse(idx + 1, msg),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.synthetic.validate()?;
        let total: f64 = self.data.split.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions sum to {total}, expected 1")));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let all = self
            .model
            .entries()
            .into_iter()
            .chain(self.train.entries())
            .chain(self.data.entries())
            .chain([("output_dir", self.output_dir.display().to_string())]);
        for (k, v) in all {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
