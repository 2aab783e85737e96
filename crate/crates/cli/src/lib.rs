//! Command implementations behind the `geot` binary.
//!
//! Every command takes its parsed arguments and returns a value describing
//! what it wrote, so the same code paths are exercised by the binary and by
//! the integration tests.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use geot::data_io::RunConfig;
use geot::{Error, Result};

mod gradcheck;
mod inspect;
mod train;

pub use gradcheck::{cmd_gradcheck, GradcheckReport, GradcheckTrial, GRADCHECK_TOLERANCE};
pub use inspect::{cmd_attn_dump, cmd_forces, AttnDump};
pub use train::{cmd_ablate_basis, cmd_eval, cmd_train, AblationRow, TrainOutcome};

/// Overrides the output directory of every command that writes files.
pub const OUTPUT_DIR_ENV: &str = "GEOT_OUTPUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "geot", version, about = "Geometry-aware Transformer for molecular energies and forces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoints plus a metrics CSV.
    Train(RunArgs),
    /// Report energy and force MAE of a checkpoint on a labelled XYZ file.
    Eval(EvalArgs),
    /// Predict energies and forces for every frame of an XYZ file.
    Forces(ForcesArgs),
    /// Compare analytic forces with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train one model per radial basis family and tabulate validation MAE.
    AblateBasis(RunArgs),
    /// Export head-averaged attention magnitudes for one molecule.
    AttnDump(AttnDumpArgs),
}

/// Arguments shared by the commands that train.
#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Continue from a `last.ckpt` of an earlier run (train only).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Any configuration key as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labelled XYZ file.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Sign convention of the stored forces; defaults to the one the
    /// checkpoint was trained with.
    #[arg(long)]
    pub sign: Option<String>,
    /// Configuration the checkpoint must match.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ForcesArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub xyz: PathBuf,
    /// `paper` reports +dE/dr, `physical` reports -dE/dr.
    #[arg(long, default_value = "paper")]
    pub sign: String,
    /// Destination file; standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Check this architecture on every trial instead of a random one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Perturb the analytic forces; used to confirm the check can fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Args, Debug, Clone)]
pub struct AttnDumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub xyz: PathBuf,
    /// Zero-based frame of a multi-frame file.
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

/// Runs one parsed command. `Ok(false)` means the command ran but its check
/// failed (gradcheck).
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => {
            let out = cmd_train(&args)?;
            Ok(!matches!(out.report.stop, geot::training::StopReason::Diverged { .. }))
        }
        Command::Eval(args) => cmd_eval(&args).map(|_| true),
        Command::Forces(args) => cmd_forces(&args).map(|_| true),
        Command::Gradcheck(args) => cmd_gradcheck(&args).map(|r| r.passed),
        Command::AblateBasis(args) => cmd_ablate_basis(&args).map(|_| true),
        Command::AttnDump(args) => cmd_attn_dump(&args).map(|_| true),
    }
}

/// Exit code contract: 0 success, 1 runtime failure, 2 usage or
/// configuration error.
pub fn exit_code(result: &Result<bool>) -> i32 {
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) if e.is_usage() => 2,
        Err(_) => 1,
    }
}

/// Splits `--key value` / `--key=value` words into pairs. Hyphens in keys
/// become underscores.
pub fn parse_overrides(words: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = words.iter();
    while let Some(word) = it.next() {
        let Some(flag) = word.strip_prefix("--") else {
            return Err(Error::Usage(format!("unexpected argument `{word}`; overrides look like `--key value`")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Usage(format!("`--{flag}` needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        if key.is_empty() {
            return Err(Error::Usage(format!("malformed override `{word}`")));
        }
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ResolvedRun {
    pub config: RunConfig,
    pub output_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

/// Configuration for a training command: defaults, then the config file,
/// then command-line overrides. The output directory comes from
/// `--output-dir`, else the environment variable, else the file.
pub fn resolve_run(args: &RunArgs) -> Result<ResolvedRun> {
    let overrides = parse_overrides(&args.overrides)?;
    let mut config_path = args.config.clone();
    let mut out_flag = args.output_dir.clone();
    let mut resume = args.resume.clone();
    let mut rest = Vec::new();
    // clap stops matching named flags once the first override is seen
    for (k, v) in overrides {
        match k.as_str() {
            "config" => config_path = Some(PathBuf::from(v)),
            "output_dir" => out_flag = Some(PathBuf::from(v)),
            "resume" => resume = Some(PathBuf::from(v)),
            _ => rest.push((k, v)),
        }
    }
    let mut cfg = match &config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in &rest {
        cfg.set(k, v).map_err(|e| match e {
            Error::Config(msg) => Error::Usage(format!("--{}: {msg}", k.replace('_', "-"))),
            other => other,
        })?;
    }
    let dir = output_dir(out_flag.as_deref(), &cfg.output_dir);
    cfg.output_dir = dir.clone();
    cfg.validate()?;
    Ok(ResolvedRun {
        config: cfg,
        output_dir: dir,
        resume,
    })
}

pub fn output_dir(flag: Option<&Path>, fallback: &Path) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => fallback.to_path_buf(),
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_error(path, e))
}

pub(crate) fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
