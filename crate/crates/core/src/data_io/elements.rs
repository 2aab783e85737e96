use crate::error::{Error, Result};

const SYMBOLS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

pub fn symbol(z: u32) -> Option<&'static str> {
    SYMBOLS.get((z as usize).checked_sub(1)?).copied()
}

/// Atomic number for an element symbol (case-insensitive) or a bare number.
pub fn atomic_number(token: &str) -> Result<u32> {
    if let Ok(z) = token.parse::<u32>() {
        return if symbol(z).is_some() {
            Ok(z)
        } else {
            Err(Error::data(format!("atomic number {z} out of range")))
        };
    }
    SYMBOLS
        .iter()
        .position(|s| s.eq_ignore_ascii_case(token))
        .map(|i| i as u32 + 1)
        .ok_or_else(|| Error::data(format!("unknown element `{token}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookups() {
        assert_eq!(atomic_number("H").unwrap(), 1);
        assert_eq!(atomic_number("cl").unwrap(), 17);
        assert_eq!(atomic_number("8").unwrap(), 8);
        assert_eq!(symbol(118), Some("Og"));
        assert_eq!(symbol(0), None);
        assert!(atomic_number("Xx").is_err());
        assert!(atomic_number("119").is_err());
        for z in 1..=118 {
            assert_eq!(atomic_number(symbol(z).unwrap()).unwrap(), z);
        }
    }
}
