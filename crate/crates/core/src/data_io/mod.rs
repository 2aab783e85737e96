//! Reading and writing molecules, dataset splits, run configuration and the
//! synthetic Morse benchmark.

pub mod config;
mod dataset;
mod elements;
pub mod synthetic;
mod xyz;

pub use config::{DataConfig, DataSource, RunConfig};
pub use dataset::{split_dataset, Dataset, Split};
pub use elements::{atomic_number, symbol};
pub use synthetic::{generate_synthetic, morse_energy_forces, Morse, SyntheticSpec};
pub use xyz::{parse_xyz, read_xyz, write_xyz};
