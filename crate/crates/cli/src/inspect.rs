use std::fmt::Write as _;
use std::path::PathBuf;

use geot::attention::{dump_attention_norms, write_attention_csv};
use geot::autodiff::Tensor;
use geot::data_io::{read_xyz, write_xyz, RunConfig};
use geot::geometry::{pairwise_distances, Molecule};
use geot::model::{ForceSign, GeoTModel};
use geot::{fmt_f64, Error, Result};

use crate::{output_dir, write_file, AttnDumpArgs, ForcesArgs};

/// Predicts every frame of the input file and returns the extended XYZ text
/// (energy in the comment line, forces after the coordinates).
pub fn cmd_forces(args: &ForcesArgs) -> Result<String> {
    let sign = ForceSign::parse(&args.sign)?;
    let model = GeoTModel::load(&args.checkpoint)?;
    let frames = read_xyz(&args.xyz)?;
    if frames.is_empty() {
        return Err(Error::Usage(format!("{} contains no molecules", args.xyz.display())));
    }
    let predicted = frames
        .iter()
        .map(|mol| {
            let p = model.predict(mol, sign)?;
            mol.without_labels().with_energy(p.energy).with_forces(p.forces)
        })
        .collect::<Result<Vec<Molecule>>>()?;
    let text = write_xyz(&predicted);
    match &args.output {
        Some(path) => write_file(path, &text)?,
        None => print!("{text}"),
    }
    Ok(text)
}

#[derive(Clone, Debug)]
pub struct AttnDump {
    /// Head-averaged `|A'|` per layer.
    pub maps: Vec<(usize, Tensor)>,
    pub distances: Tensor,
    pub output_dir: PathBuf,
}

/// Writes `attention.csv` (one row per layer and atom pair),
/// `attention_pairs.csv` (`layer,i,j,distance,norm`) and
/// `attention_atoms.csv` (row mean of each map).
pub fn cmd_attn_dump(args: &AttnDumpArgs) -> Result<AttnDump> {
    let model = GeoTModel::load(&args.checkpoint)?;
    let frames = read_xyz(&args.xyz)?;
    let mol = frames.get(args.frame).ok_or_else(|| {
        Error::Usage(format!(
            "{} has {} frame(s); frame {} requested",
            args.xyz.display(),
            frames.len(),
            args.frame
        ))
    })?;
    let maps = dump_attention_norms(&model.attention_trace(mol)?)?;
    let distances = pairwise_distances(mol.coords());
    let n = mol.len();

    let mut pairs = String::from("layer,i,j,distance,norm\n");
    let mut atoms = String::from("layer,i,mean_norm\n");
    for (layer, map) in &maps {
        for i in 0..n {
            for j in 0..n {
                let _ = writeln!(
                    pairs,
                    "{layer},{i},{j},{},{}",
                    fmt_f64(distances.get(i, j)),
                    fmt_f64(map.get(i, j))
                );
            }
            let mean = map.row(i).iter().sum::<f64>() / n as f64;
            let _ = writeln!(atoms, "{layer},{i},{}", fmt_f64(mean));
        }
    }
    let dir = output_dir(args.output_dir.as_deref(), &RunConfig::default().output_dir);
    write_file(&dir.join("attention.csv"), &write_attention_csv(&maps, model.config().heads))?;
    write_file(&dir.join("attention_pairs.csv"), &pairs)?;
    write_file(&dir.join("attention_atoms.csv"), &atoms)?;
    println!("{} layers x {n}x{n} maps written to {}", maps.len(), dir.display());
    Ok(AttnDump {
        maps,
        distances,
        output_dir: dir,
    })
}
