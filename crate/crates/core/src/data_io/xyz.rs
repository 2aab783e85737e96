//! Multi-frame XYZ files. Atom lines carry a symbol and coordinates,
//! optionally followed by three force components. The comment line may hold
//! `energy=<value>` (or just a number) as the energy label.

use std::fmt::Write as _;
use std::path::Path;

use super::elements::{atomic_number, symbol};
use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::geometry::Molecule;

fn parse_energy(comment: &str, line: usize) -> Result<Option<f64>> {
    let comment = comment.trim();
    if comment.is_empty() {
        return Ok(None);
    }
    if let Ok(v) = comment.parse::<f64>() {
        return Ok(Some(v));
    }
    for token in comment.split_whitespace() {
        if let Some((key, value)) = token.split_once('=') {
            if key.eq_ignore_ascii_case("energy") {
                return value
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| Error::parse(line, format!("bad energy `{value}`")));
            }
        }
    }
    Ok(None)
}

pub fn parse_xyz(text: &str) -> Result<Vec<Molecule>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut frames = Vec::new();
    let mut pos = 0;
    while pos < lines.len() {
        if lines[pos].trim().is_empty() {
            pos += 1;
            continue;
        }
        let header = pos + 1;
        let n: usize = lines[pos]
            .trim()
            .parse()
            .map_err(|_| Error::parse(header, format!("expected atom count, found `{}`", lines[pos].trim())))?;
        if n == 0 {
            return Err(Error::parse(header, "frame has zero atoms"));
        }
        let comment = lines
            .get(pos + 1)
            .ok_or_else(|| Error::parse(header + 1, "missing comment line"))?;
        let energy = parse_energy(comment, header + 1)?;
        let mut z = Vec::with_capacity(n);
        let mut coords = Vec::with_capacity(n);
        let mut forces = Vec::with_capacity(n);
        let mut columns = None;
        for k in 0..n {
            let lineno = pos + 3 + k;
            let line = lines
                .get(lineno - 1)
                .ok_or_else(|| Error::parse(lineno, format!("frame declares {n} atoms but the file ends")))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 && fields.len() != 7 {
                return Err(Error::parse(
                    lineno,
                    format!("expected 4 or 7 columns, found {}", fields.len()),
                ));
            }
            if *columns.get_or_insert(fields.len()) != fields.len() {
                return Err(Error::parse(lineno, "column count differs within frame"));
            }
            z.push(atomic_number(fields[0]).map_err(|e| Error::parse(lineno, e.to_string()))?);
            let mut nums = [0.0; 6];
            for (slot, f) in nums.iter_mut().zip(&fields[1..]) {
                *slot = f
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(lineno, format!("bad number `{f}`")))?;
            }
            coords.push([nums[0], nums[1], nums[2]]);
            if fields.len() == 7 {
                forces.push([nums[3], nums[4], nums[5]]);
            }
        }
        let mut mol = Molecule::new(z, coords).map_err(|e| Error::parse(header, e.to_string()))?;
        if let Some(e) = energy {
            mol = mol.with_energy(e);
        }
        if !forces.is_empty() {
            mol = mol.with_forces(forces)?;
        }
        frames.push(mol);
        pos += 2 + n;
    }
    Ok(frames)
}

pub fn write_xyz(molecules: &[Molecule]) -> String {
    let mut out = String::new();
    for mol in molecules {
        let _ = writeln!(out, "{}", mol.len());
        if let Some(e) = mol.energy() {
            let _ = write!(out, "energy={}", fmt_f64(e));
        }
        out.push('\n');
        for (k, (&z, c)) in mol.atomic_numbers().iter().zip(mol.coords()).enumerate() {
            let _ = write!(
                out,
                "{} {} {} {}",
                symbol(z).unwrap_or("X"),
                fmt_f64(c[0]),
                fmt_f64(c[1]),
                fmt_f64(c[2])
            );
            if let Some(f) = mol.forces() {
                let _ = write!(out, " {} {} {}", fmt_f64(f[k][0]), fmt_f64(f[k][1]), fmt_f64(f[k][2]));
            }
            out.push('\n');
        }
    }
    out
}

pub fn read_xyz(path: &Path) -> Result<Vec<Molecule>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const WATER: &str = "3\nenergy=-1.5\nO 0.0 0.0 0.0 0.1 0.2 0.3\nH 0.96 0.0 0.0 -0.1 0 0\nH -0.24 0.93 0.0 0 -0.2 -0.3\n";

    #[test]
    fn parses_labels_and_forces() {
        let mols = parse_xyz(WATER).unwrap();
        assert_eq!(mols.len(), 1);
        let m = &mols[0];
        assert_eq!(m.atomic_numbers(), &[8, 1, 1]);
        assert_eq!(m.energy(), Some(-1.5));
        assert_eq!(m.forces().unwrap()[0], [0.1, 0.2, 0.3]);
        assert_eq!(m.coords()[1], [0.96, 0.0, 0.0]);
    }

    #[test]
    fn multi_frame_and_plain_comment() {
        let text = format!("{WATER}2\n-3.25\nC 0 0 0\nO 1.2 0 0\n\n1\n\nH 0 0 0\n");
        let mols = parse_xyz(&text).unwrap();
        assert_eq!(mols.len(), 3);
        assert_eq!(mols[1].energy(), Some(-3.25));
        assert!(mols[1].forces().is_none());
        assert_eq!(mols[2].energy(), None);
    }

    #[test]
    fn write_then_parse_is_bit_exact() {
        let mols = parse_xyz(WATER).unwrap();
        let coords: Vec<[f64; 3]> = vec![[0.1 + 0.2, 1.0 / 3.0, -1e-300], [2.0, 0.0, 1e10]];
        let odd = Molecule::new(vec![6, 17], coords).unwrap().with_energy(std::f64::consts::PI);
        let all = vec![mols[0].clone(), odd];
        let again = parse_xyz(&write_xyz(&all)).unwrap();
        assert_eq!(again, all);
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            ("x\n\nH 0 0 0\n", 1),
            ("2\n\nH 0 0 0\n", 4),
            ("1\n\nH 0 0\n", 3),
            ("1\n\nQq 0 0 0\n", 3),
            ("1\n\nH 0 nan 0\n", 3),
            ("2\n\nH 0 0 0\nH 0 0 0 1 1 1\n", 4),
            ("1\nenergy=abc\nH 0 0 0\n", 2),
        ];
        for (text, line) in cases {
            match parse_xyz(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }
}
