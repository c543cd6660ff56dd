//! SMILES subset reader.
//!
//! Supported: organic-subset atoms (`B C N O P S F Cl Br I`), aromatic
//! lowercase atoms (`b c n o p s`), bracket atoms with element, hydrogen
//! count and charge (`[nH]`, `[NH4+]`, `[O-]`, `[Fe+2]`), bond symbols
//! `- = # :`, branches, ring closures (`1`..`9`, `%nn`) and `.` fragment
//! separators. Stereochemistry (`@ / \`), isotopes and atom classes are
//! rejected with the byte offset of the offending token.

use std::collections::HashMap;

use super::{valence_hydrogens, Atom, Bond, BondOrder, ChemError, Element, Molecule};

struct RingOpen {
    atom: usize,
    bond: Option<BondOrder>,
    offset: usize,
}

struct Builder {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    /// Atoms written without brackets get valence-rule hydrogens.
    organic: Vec<bool>,
}

impl Builder {
    fn bond(&mut self, a: usize, b: usize, explicit: Option<BondOrder>, offset: usize) -> Result<(), ChemError> {
        if a == b || self.bonds.iter().any(|x| (x.a == a && x.b == b) || (x.a == b && x.b == a)) {
            return Err(err(offset, "duplicate or self bond"));
        }
        let order = explicit.unwrap_or(if self.atoms[a].is_aromatic && self.atoms[b].is_aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        });
        self.bonds.push(Bond::new(a, b, order));
        Ok(())
    }
}

fn err(offset: usize, message: impl Into<String>) -> ChemError {
    ChemError::Smiles {
        offset,
        message: message.into(),
    }
}

/// Parses one SMILES string of the supported subset.
pub fn parse_smiles(text: &str) -> Result<Molecule, ChemError> {
    let bytes = text.trim_end().as_bytes();
    let mut b = Builder {
        atoms: Vec::new(),
        bonds: Vec::new(),
        organic: Vec::new(),
    };
    let mut prev: Option<usize> = None;
    let mut pending: Option<(BondOrder, usize)> = None;
    let mut branches: Vec<(usize, usize)> = Vec::new();
    let mut rings: HashMap<u32, RingOpen> = HashMap::new();
    let mut i = 0;

    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b'(' => {
                let p = prev.ok_or_else(|| err(i, "branch without a preceding atom"))?;
                if pending.is_some() {
                    return Err(err(i, "bond symbol before '('"));
                }
                branches.push((p, i));
                i += 1;
            }
            b')' => {
                let (p, _) = branches.pop().ok_or_else(|| err(i, "unmatched ')'"))?;
                if pending.is_some() {
                    return Err(err(i, "dangling bond symbol before ')'"));
                }
                prev = Some(p);
                i += 1;
            }
            b'-' | b'=' | b'#' | b':' => {
                if pending.is_some() {
                    return Err(err(i, "two consecutive bond symbols"));
                }
                if prev.is_none() {
                    return Err(err(i, "bond symbol without a preceding atom"));
                }
                let order = match c {
                    b'-' => BondOrder::Single,
                    b'=' => BondOrder::Double,
                    b'#' => BondOrder::Triple,
                    _ => BondOrder::Aromatic,
                };
                pending = Some((order, i));
                i += 1;
            }
            b'.' => {
                if pending.is_some() {
                    return Err(err(i, "bond symbol before '.'"));
                }
                prev = None;
                i += 1;
            }
            b'0'..=b'9' | b'%' => {
                let label = if c == b'%' {
                    let digits = bytes.get(i + 1..i + 3).ok_or_else(|| err(i, "'%' needs two digits"))?;
                    if !digits.iter().all(u8::is_ascii_digit) {
                        return Err(err(i, "'%' needs two digits"));
                    }
                    i += 3;
                    ((digits[0] - b'0') * 10 + (digits[1] - b'0')) as u32
                } else {
                    i += 1;
                    (c - b'0') as u32
                };
                let atom = prev.ok_or_else(|| err(start, "ring closure without a preceding atom"))?;
                let bond = pending.take().map(|(o, _)| o);
                match rings.remove(&label) {
                    Some(open) => {
                        let order = match (open.bond, bond) {
                            (Some(x), Some(y)) if x != y => {
                                return Err(err(start, format!("conflicting bond symbols on ring closure {label}")))
                            }
                            (x, y) => x.or(y),
                        };
                        b.bond(open.atom, atom, order, start)?;
                    }
                    None => {
                        rings.insert(label, RingOpen { atom, bond, offset: start });
                    }
                }
            }
            b'[' => {
                let (atom, next) = parse_bracket(bytes, i)?;
                i = next;
                add_atom(&mut b, atom, false, &mut prev, &mut pending, start)?;
            }
            b'@' | b'/' | b'\\' => {
                return Err(err(i, format!("unsupported token '{}' (stereochemistry)", c as char)));
            }
            _ => {
                let (element, aromatic, len) = organic_atom(bytes, i)?;
                i += len;
                let mut atom = Atom::new(element);
                atom.is_aromatic = aromatic;
                add_atom(&mut b, atom, true, &mut prev, &mut pending, start)?;
            }
        }
    }

    if let Some((_, offset)) = pending {
        return Err(err(offset, "dangling bond symbol at end of input"));
    }
    if let Some(&(_, offset)) = branches.last() {
        return Err(err(offset, "unmatched '('"));
    }
    if let Some(open) = rings.values().min_by_key(|r| r.offset) {
        return Err(err(open.offset, "unclosed ring bond"));
    }
    if b.atoms.is_empty() {
        return Err(err(0, "no atoms"));
    }

    let Builder { mut atoms, bonds, organic } = b;
    let mut order_sum = vec![0.0; atoms.len()];
    for bond in &bonds {
        order_sum[bond.a] += bond.order.value();
        order_sum[bond.b] += bond.order.value();
    }
    for (k, atom) in atoms.iter_mut().enumerate() {
        if organic[k] {
            atom.implicit_h_count = valence_hydrogens(&atom.element, order_sum[k], 0, atom.formal_charge);
        }
    }
    Molecule::new(atoms, bonds, text.trim())
}

fn add_atom(
    b: &mut Builder,
    atom: Atom,
    organic: bool,
    prev: &mut Option<usize>,
    pending: &mut Option<(BondOrder, usize)>,
    offset: usize,
) -> Result<(), ChemError> {
    let idx = b.atoms.len();
    b.atoms.push(atom);
    b.organic.push(organic);
    if let Some(p) = *prev {
        let order = pending.take().map(|(o, _)| o);
        b.bond(p, idx, order, offset)?;
    }
    *prev = Some(idx);
    Ok(())
}

fn organic_atom(bytes: &[u8], i: usize) -> Result<(Element, bool, usize), ChemError> {
    let next = bytes.get(i + 1).copied();
    Ok(match bytes[i] {
        b'C' if next == Some(b'l') => (Element::Cl, false, 2),
        b'B' if next == Some(b'r') => (Element::Br, false, 2),
        b'B' => (Element::B, false, 1),
        b'C' => (Element::C, false, 1),
        b'N' => (Element::N, false, 1),
        b'O' => (Element::O, false, 1),
        b'P' => (Element::P, false, 1),
        b'S' => (Element::S, false, 1),
        b'F' => (Element::F, false, 1),
        b'I' => (Element::I, false, 1),
        b'b' => (Element::B, true, 1),
        b'c' => (Element::C, true, 1),
        b'n' => (Element::N, true, 1),
        b'o' => (Element::O, true, 1),
        b'p' => (Element::P, true, 1),
        b's' => (Element::S, true, 1),
        b'*' => return Err(err(i, "unsupported token '*' (wildcard atom)")),
        other => return Err(err(i, format!("unexpected character '{}'", other as char))),
    })
}

/// Parses `[...]` starting at `open`; returns the atom and the index after `]`.
fn parse_bracket(bytes: &[u8], open: usize) -> Result<(Atom, usize), ChemError> {
    let mut i = open + 1;
    let at = |i: usize| bytes.get(i).copied();
    if at(i).is_some_and(|c| c.is_ascii_digit()) {
        return Err(err(i, "isotopes are not supported"));
    }
    let (element, aromatic) = match at(i) {
        Some(b's') if at(i + 1) == Some(b'e') => {
            i += 2;
            (Element::Other("Se".into()), true)
        }
        Some(b'a') if at(i + 1) == Some(b's') => {
            i += 2;
            (Element::Other("As".into()), true)
        }
        Some(c @ (b'b' | b'c' | b'n' | b'o' | b'p' | b's')) => {
            i += 1;
            let upper = (c as char).to_ascii_uppercase().to_string();
            (Element::from_symbol(&upper), true)
        }
        Some(c) if c.is_ascii_uppercase() => {
            let mut sym = String::from(c as char);
            i += 1;
            if let Some(l) = at(i).filter(u8::is_ascii_lowercase) {
                sym.push(l as char);
                i += 1;
            }
            (Element::from_symbol(&sym), false)
        }
        Some(b'*') => return Err(err(i, "unsupported token '*' (wildcard atom)")),
        _ => return Err(err(i, "expected an element symbol in bracket atom")),
    };
    if at(i) == Some(b'@') {
        return Err(err(i, "unsupported token '@' (stereochemistry)"));
    }
    let mut h = 0u32;
    if at(i) == Some(b'H') {
        i += 1;
        h = 1;
        if let Some(d) = at(i).filter(u8::is_ascii_digit) {
            h = (d - b'0') as u32;
            i += 1;
        }
    }
    let mut charge = 0i32;
    if let Some(sign @ (b'+' | b'-')) = at(i) {
        let s = if sign == b'+' { 1 } else { -1 };
        i += 1;
        if let Some(d) = at(i).filter(u8::is_ascii_digit) {
            charge = s * (d - b'0') as i32;
            i += 1;
        } else {
            charge = s;
            while at(i) == Some(sign) {
                charge += s;
                i += 1;
            }
        }
    }
    match at(i) {
        Some(b']') => {}
        Some(b':') => return Err(err(i, "atom classes are not supported")),
        Some(b'@') => return Err(err(i, "unsupported token '@' (stereochemistry)")),
        _ => return Err(err(open, "unterminated bracket atom")),
    }
    let mut atom = Atom::new(element);
    atom.is_aromatic = aromatic;
    atom.formal_charge = charge;
    atom.explicit_h_count = Some(h);
    Ok((atom, i + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offset_of(e: ChemError) -> usize {
        match e {
            ChemError::Smiles { offset, .. } => offset,
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn methane() {
        let m = parse_smiles("C").unwrap();
        assert_eq!(m.atoms.len(), 1);
        assert_eq!(m.atoms[0].hydrogen_count(), 4);
        assert!(!m.atoms[0].is_aromatic);
        assert!(!m.has_coordinates());
    }

    #[test]
    fn benzene() {
        let m = parse_smiles("c1ccccc1").unwrap();
        assert_eq!(m.atoms.len(), 6);
        assert_eq!(m.bonds.len(), 6);
        for a in &m.atoms {
            assert!(a.is_aromatic && a.in_ring);
            assert_eq!(a.hydrogen_count(), 1);
        }
        for b in &m.bonds {
            assert_eq!(b.order, BondOrder::Aromatic);
            assert!(b.is_aromatic && b.in_ring && b.is_conjugated);
        }
    }

    #[test]
    fn formic_acid_hydrogens() {
        let m = parse_smiles("C(=O)O").unwrap();
        assert_eq!(m.atoms.len(), 3);
        assert_eq!(m.bond_between(0, 1).unwrap().order, BondOrder::Double);
        assert_eq!(m.bond_between(0, 2).unwrap().order, BondOrder::Single);
        let h: Vec<u32> = m.atoms.iter().map(Atom::hydrogen_count).collect();
        assert_eq!(h, vec![1, 0, 1]);
    }

    #[test]
    fn bracket_atoms() {
        let m = parse_smiles("c1cc[nH]c1").unwrap();
        assert_eq!(m.atoms[3].element, Element::N);
        assert_eq!(m.atoms[3].hydrogen_count(), 1);
        assert!(m.atoms[3].is_aromatic);

        let m = parse_smiles("[NH4+]").unwrap();
        assert_eq!(m.atoms[0].formal_charge, 1);
        assert_eq!(m.atoms[0].hydrogen_count(), 4);

        let m = parse_smiles("CC(=O)[O-]").unwrap();
        assert_eq!(m.atoms[3].formal_charge, -1);
        assert_eq!(m.atoms[3].hydrogen_count(), 0);

        let m = parse_smiles("[Fe+2]").unwrap();
        assert_eq!(m.atoms[0].element, Element::Other("Fe".into()));
        assert_eq!(m.atoms[0].formal_charge, 2);
        let m = parse_smiles("[O--]").unwrap();
        assert_eq!(m.atoms[0].formal_charge, -2);
    }

    #[test]
    fn two_letter_halogens_and_percent_rings() {
        let m = parse_smiles("ClCBr").unwrap();
        assert_eq!(m.atoms[0].element, Element::Cl);
        assert_eq!(m.atoms[2].element, Element::Br);
        assert_eq!(m.atoms[1].hydrogen_count(), 2);

        let m = parse_smiles("C%12CCC%12").unwrap();
        assert_eq!(m.bonds.len(), 4);
        assert!(m.bonds.iter().all(|b| b.in_ring));
    }

    #[test]
    fn ring_closure_bond_symbols() {
        let m = parse_smiles("C=1CCCCC1").unwrap();
        assert_eq!(m.bond_between(0, 5).unwrap().order, BondOrder::Double);
        assert_eq!(m.atoms[0].hydrogen_count(), 1);
        assert!(parse_smiles("C=1CCCCC#1").is_err());
    }

    #[test]
    fn explicit_single_between_aromatic_atoms() {
        let m = parse_smiles("c1ccccc1-c1ccccc1").unwrap();
        let link = m.bond_between(5, 6).unwrap();
        assert_eq!(link.order, BondOrder::Single);
        assert!(!link.in_ring);
        assert_eq!(m.atoms[5].hydrogen_count(), 0);
    }

    #[test]
    fn fragments() {
        let m = parse_smiles("[Na+].[Cl-]").unwrap();
        assert_eq!(m.atoms.len(), 2);
        assert!(m.bonds.is_empty());
    }

    #[test]
    fn errors_carry_byte_offsets() {
        assert_eq!(offset_of(parse_smiles("C[C@H](N)O").unwrap_err()), 3);
        assert_eq!(offset_of(parse_smiles("F/C=C/F").unwrap_err()), 1);
        assert_eq!(offset_of(parse_smiles("CC)C").unwrap_err()), 2);
        assert_eq!(offset_of(parse_smiles("CC(C").unwrap_err()), 2);
        assert_eq!(offset_of(parse_smiles("C1CC").unwrap_err()), 1);
        assert_eq!(offset_of(parse_smiles("[13CH4]").unwrap_err()), 1);
        assert_eq!(offset_of(parse_smiles("CX").unwrap_err()), 1);
        assert_eq!(offset_of(parse_smiles("[CH3:1]C").unwrap_err()), 4);
        assert!(parse_smiles("").is_err());
        assert!(parse_smiles("C=").is_err());
    }
}
