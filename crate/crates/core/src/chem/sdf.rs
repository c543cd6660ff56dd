//! V2000 molfile / SD file reading and writing.
//!
//! Atom and bond blocks are read by fixed columns. `M  CHG` lines override
//! atom-block charges, `M  END` closes the connection table, and data items
//! after it are skipped unless their tag matches [`SdfOptions::label_tag`].
//! Explicit hydrogen atoms are folded into the hydrogen count of their heavy
//! neighbor.

use std::fmt::Write as _;

use super::{valence_hydrogens, Atom, Bond, BondOrder, ChemError, Element, Molecule};

#[derive(Debug, Clone, Default)]
pub struct SdfOptions {
    /// Data item (`> <tag>`) whose first line is read as the record label.
    pub label_tag: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SdfRecord {
    pub molecule: Molecule,
    pub label: Option<String>,
}

/// Parses every record of an SD stream.
pub fn parse_sdf(text: &str) -> Result<Vec<Molecule>, ChemError> {
    Ok(parse_sdf_with(text, &SdfOptions::default())?
        .into_iter()
        .map(|r| r.molecule)
        .collect())
}

pub fn parse_sdf_with(text: &str, options: &SdfOptions) -> Result<Vec<SdfRecord>, ChemError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::new();
    let mut start = 0;
    while start < lines.len() {
        let end = lines[start..]
            .iter()
            .position(|l| l.trim_end() == "$$$$")
            .map(|p| start + p)
            .unwrap_or(lines.len());
        let block = &lines[start..end];
        if block.iter().any(|l| !l.trim().is_empty()) {
            let record = RecordParser {
                lines: block,
                first_line: start + 1,
                index: records.len(),
            }
            .parse(options)?;
            records.push(record);
        }
        start = end + 1;
    }
    Ok(records)
}

struct RecordParser<'a> {
    lines: &'a [&'a str],
    /// 1-based line number of `lines[0]` in the whole stream.
    first_line: usize,
    index: usize,
}

impl RecordParser<'_> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> ChemError {
        ChemError::Sdf {
            record: self.index,
            line: self.first_line + offset,
            message: message.into(),
        }
    }

    fn line(&self, offset: usize, what: &str) -> Result<&str, ChemError> {
        self.lines
            .get(offset)
            .copied()
            .ok_or_else(|| self.fail(offset.min(self.lines.len()), format!("unexpected end of record, expected {what}")))
    }

    fn int_field(&self, offset: usize, line: &str, cols: std::ops::Range<usize>, what: &str) -> Result<i64, ChemError> {
        let field = line.get(cols.clone()).unwrap_or_else(|| line.get(cols.start..).unwrap_or(""));
        let field = field.trim();
        if field.is_empty() {
            return Err(self.fail(offset, format!("missing {what}")));
        }
        field
            .parse()
            .map_err(|_| self.fail(offset, format!("bad {what} '{field}'")))
    }

    fn parse(&self, options: &SdfOptions) -> Result<SdfRecord, ChemError> {
        let name = self.line(0, "header")?.trim().to_string();
        let counts = self.line(3, "counts line")?;
        if counts.contains("V3000") {
            return Err(self.fail(3, "V3000 connection tables are not supported"));
        }
        if counts.trim_end().len() < 6 {
            return Err(self.fail(3, "malformed counts line"));
        }
        let n_atoms = self.int_field(3, counts, 0..3, "atom count")?;
        let n_bonds = self.int_field(3, counts, 3..6, "bond count")?;
        if n_atoms < 0 || n_bonds < 0 {
            return Err(self.fail(3, "malformed counts line"));
        }
        let (n_atoms, n_bonds) = (n_atoms as usize, n_bonds as usize);

        let mut atoms = Vec::with_capacity(n_atoms);
        let mut valences = Vec::with_capacity(n_atoms);
        for k in 0..n_atoms {
            let offset = 4 + k;
            let line = self.line(offset, "atom line")?;
            if line.starts_with("M  ") || line.trim_end().len() < 32 {
                return Err(self.fail(offset, format!("atom block ended early: counts line declares {n_atoms} atoms")));
            }
            let (atom, valence) = self.atom_line(offset, line)?;
            atoms.push(atom);
            valences.push(valence);
        }

        let mut bonds = Vec::with_capacity(n_bonds);
        for k in 0..n_bonds {
            let offset = 4 + n_atoms + k;
            let line = self.line(offset, "bond line")?;
            if line.starts_with("M  ") {
                return Err(self.fail(offset, format!("bond block ended early: counts line declares {n_bonds} bonds")));
            }
            let a = self.int_field(offset, line, 0..3, "first bond atom")?;
            let b = self.int_field(offset, line, 3..6, "second bond atom")?;
            let kind = self.int_field(offset, line, 6..9, "bond type")?;
            for idx in [a, b] {
                if idx < 1 || idx as usize > n_atoms {
                    return Err(self.fail(offset, format!("bond atom index {idx} out of range 1..={n_atoms}")));
                }
            }
            let order = match kind {
                1 => BondOrder::Single,
                2 => BondOrder::Double,
                3 => BondOrder::Triple,
                4 => BondOrder::Aromatic,
                other => return Err(self.fail(offset, format!("unknown bond type {other}"))),
            };
            let (a, b) = (a as usize - 1, b as usize - 1);
            if a == b {
                return Err(self.fail(offset, "bond joins an atom to itself"));
            }
            if bonds.iter().any(|x: &Bond| (x.a.min(x.b), x.a.max(x.b)) == (a.min(b), a.max(b))) {
                return Err(self.fail(offset, format!("duplicate bond {}-{}", a + 1, b + 1)));
            }
            if order == BondOrder::Aromatic {
                atoms[a].is_aromatic = true;
                atoms[b].is_aromatic = true;
            }
            bonds.push(Bond::new(a, b, order));
        }

        // Properties block up to M  END.
        let mut offset = 4 + n_atoms + n_bonds;
        let mut charges: Option<Vec<i32>> = None;
        loop {
            let Some(line) = self.lines.get(offset) else { break };
            if line.starts_with("M  END") {
                offset += 1;
                break;
            }
            if line.starts_with("M  CHG") {
                let chg = charges.get_or_insert_with(|| vec![0; n_atoms]);
                let fields: Vec<&str> = line[6..].split_whitespace().collect();
                let count: usize = fields
                    .first()
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| self.fail(offset, "malformed M  CHG line"))?;
                if fields.len() < 1 + 2 * count {
                    return Err(self.fail(offset, "malformed M  CHG line"));
                }
                for pair in fields[1..1 + 2 * count].chunks(2) {
                    let idx: usize = pair[0].parse().map_err(|_| self.fail(offset, "malformed M  CHG line"))?;
                    let value: i32 = pair[1].parse().map_err(|_| self.fail(offset, "malformed M  CHG line"))?;
                    if idx < 1 || idx > n_atoms {
                        return Err(self.fail(offset, format!("M  CHG atom index {idx} out of range")));
                    }
                    chg[idx - 1] = value;
                }
            }
            offset += 1;
        }
        if let Some(chg) = charges {
            for (atom, c) in atoms.iter_mut().zip(chg) {
                atom.formal_charge = c;
            }
        }

        let label = options.label_tag.as_deref().and_then(|tag| self.data_item(offset, tag));
        let molecule = fold_hydrogens(atoms, &valences, bonds, &name).map_err(|e| self.fail(0, e.to_string()))?;
        Ok(SdfRecord { molecule, label })
    }

    /// Parses one atom line; the second value is the stated total valence
    /// (column `vvv`, where 15 means zero), if any.
    fn atom_line(&self, offset: usize, line: &str) -> Result<(Atom, Option<u32>), ChemError> {
        let coord = |cols: std::ops::Range<usize>, axis: &str| -> Result<f64, ChemError> {
            let field = line.get(cols).map(str::trim).unwrap_or("");
            field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| self.fail(offset, format!("bad {axis} coordinate '{field}'")))
        };
        let x = coord(0..10, "x")?;
        let y = coord(10..20, "y")?;
        let z = coord(20..30, "z")?;
        let symbol = line.get(31..34.min(line.len())).unwrap_or("").trim();
        if symbol.is_empty() {
            return Err(self.fail(offset, "missing atom symbol"));
        }
        let mut atom = Atom::new(Element::from_symbol(symbol));
        atom.position = Some([x, y, z]);
        if let Some(field) = line.get(36..39) {
            let code: i32 = field.trim().parse().unwrap_or(0);
            atom.formal_charge = match code {
                1 => 3,
                2 => 2,
                3 => 1,
                5 => -1,
                6 => -2,
                7 => -3,
                _ => 0,
            };
        }
        let valence = match line.get(48..51).and_then(|f| f.trim().parse::<u32>().ok()) {
            Some(15) => Some(0),
            Some(v @ 1..=14) => Some(v),
            _ => None,
        };
        Ok((atom, valence))
    }

    fn data_item(&self, from: usize, tag: &str) -> Option<String> {
        let wanted = format!("<{tag}>");
        let mut k = from;
        while k < self.lines.len() {
            let line = self.lines[k];
            if line.starts_with('>') && line.contains(&wanted) {
                return self
                    .lines
                    .get(k + 1)
                    .map(|v| v.trim().to_string())
                    .filter(|v| !v.is_empty());
            }
            k += 1;
        }
        None
    }
}

/// Removes hydrogen atoms bonded to exactly one heavy atom, crediting them
/// to that atom, then applies the valence rule to every remaining atom. A
/// stated total valence takes precedence over the element default.
fn fold_hydrogens(mut atoms: Vec<Atom>, valences: &[Option<u32>], bonds: Vec<Bond>, name: &str) -> Result<Molecule, ChemError> {
    let n = atoms.len();
    let mut degree = vec![0usize; n];
    for b in &bonds {
        degree[b.a] += 1;
        degree[b.b] += 1;
    }
    let foldable: Vec<bool> = (0..n)
        .map(|i| {
            atoms[i].element.is_hydrogen()
                && degree[i] == 1
                && bonds
                    .iter()
                    .any(|b| (b.a == i || b.b == i) && !atoms[b.other(i)].element.is_hydrogen() && b.order == BondOrder::Single)
        })
        .collect();
    let mut folded = vec![0u32; n];
    for b in &bonds {
        if foldable[b.a] {
            folded[b.b] += 1;
        } else if foldable[b.b] {
            folded[b.a] += 1;
        }
    }
    let mut remap = vec![usize::MAX; n];
    let mut kept = Vec::new();
    for i in 0..n {
        if !foldable[i] {
            remap[i] = kept.len();
            kept.push(i);
        }
    }
    let new_bonds: Vec<Bond> = bonds
        .into_iter()
        .filter(|b| !foldable[b.a] && !foldable[b.b])
        .map(|mut b| {
            b.a = remap[b.a];
            b.b = remap[b.b];
            b
        })
        .collect();
    let mut order_sum = vec![0.0; kept.len()];
    for b in &new_bonds {
        order_sum[b.a] += b.order.value();
        order_sum[b.b] += b.order.value();
    }
    let new_atoms: Vec<Atom> = kept
        .iter()
        .enumerate()
        .map(|(new, &old)| {
            let mut atom = std::mem::replace(&mut atoms[old], Atom::new(Element::C));
            let stated = folded[old];
            if stated > 0 {
                atom.explicit_h_count = Some(stated);
            }
            atom.implicit_h_count = match valences[old] {
                Some(v) => (v as f64 - order_sum[new] - stated as f64).max(0.0).floor() as u32,
                None => valence_hydrogens(&atom.element, order_sum[new], stated, atom.formal_charge),
            };
            atom
        })
        .collect();
    Molecule::new(new_atoms, new_bonds, name)
}

fn charge_code(charge: i32) -> u8 {
    match charge {
        3 => 1,
        2 => 2,
        1 => 3,
        -1 => 5,
        -2 => 6,
        -3 => 7,
        _ => 0,
    }
}

/// Writes molecules with coordinates as a V2000 SD stream. Molecules without
/// coordinates are written at the origin. Hydrogens stay implicit.
pub fn write_sdf(records: &[(&Molecule, Option<(&str, String)>)]) -> String {
    let mut out = String::new();
    for (mol, data) in records {
        let mut order_sum = vec![0.0; mol.atoms.len()];
        for b in &mol.bonds {
            order_sum[b.a] += b.order.value();
            order_sum[b.b] += b.order.value();
        }
        let _ = writeln!(out, "{}", mol.source_id);
        let _ = writeln!(out, "  mat-core");
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>3}{:>3}  0  0  0  0  0  0  0  0999 V2000", mol.atoms.len(), mol.bonds.len());
        for (atom, &sum) in mol.atoms.iter().zip(&order_sum) {
            let [x, y, z] = atom.position.unwrap_or([0.0; 3]);
            // Total valence pins the hydrogen count; rounding up keeps it
            // exact when aromatic bonds give a fractional order sum.
            let valence = match sum.ceil() as u32 + atom.hydrogen_count() {
                0 => 15,
                v @ 1..=14 => v,
                _ => 0,
            };
            let _ = writeln!(
                out,
                "{:>10.4}{:>10.4}{:>10.4} {:<3} 0{:>3}  0  0  0{:>3}  0  0  0  0  0  0",
                x,
                y,
                z,
                atom.element.symbol(),
                charge_code(atom.formal_charge),
                valence
            );
        }
        for bond in &mol.bonds {
            let kind = match bond.order {
                BondOrder::Single => 1,
                BondOrder::Double => 2,
                BondOrder::Triple => 3,
                BondOrder::Aromatic => 4,
            };
            let _ = writeln!(out, "{:>3}{:>3}{:>3}  0", bond.a + 1, bond.b + 1, kind);
        }
        let charged: Vec<(usize, i32)> = mol
            .atoms
            .iter()
            .enumerate()
            .filter(|(_, a)| a.formal_charge != 0)
            .map(|(i, a)| (i + 1, a.formal_charge))
            .collect();
        for chunk in charged.chunks(8) {
            let _ = write!(out, "M  CHG{:>3}", chunk.len());
            for (i, c) in chunk {
                let _ = write!(out, " {:>3} {:>3}", i, c);
            }
            let _ = writeln!(out);
        }
        let _ = writeln!(out, "M  END");
        if let Some((tag, value)) = data {
            let _ = writeln!(out, ">  <{tag}>");
            let _ = writeln!(out, "{value}");
            let _ = writeln!(out);
        }
        let _ = writeln!(out, "$$$$");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const METHANE: &str = "methane
  test

  1  0  0  0  0  0  0  0  0  0999 V2000
    0.0000    0.0000    0.0000 C   0  0  0  0  0  0  0  0  0  0  0  0
M  END
$$$$
";

    const PAIR: &str = "pair
  test

  2  1  0  0  0  0  0  0  0  0999 V2000
    0.0000    0.0000    0.0000 C   0  0  0  0  0  0  0  0  0  0  0  0
    3.0000    4.0000    0.0000 O   0  0  0  0  0  0  0  0  0  0  0  0
  1  2  1  0
M  END
>  <y>
1.25

$$$$
";

    fn line_of(e: ChemError) -> (usize, usize) {
        match e {
            ChemError::Sdf { record, line, .. } => (record, line),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_atom_record() {
        let mols = parse_sdf(METHANE).unwrap();
        assert_eq!(mols.len(), 1);
        assert_eq!(mols[0].atoms.len(), 1);
        assert_eq!(mols[0].atoms[0].position, Some([0.0, 0.0, 0.0]));
        assert_eq!(mols[0].atoms[0].hydrogen_count(), 4);
        assert_eq!(mols[0].source_id, "methane");
    }

    #[test]
    fn two_atoms_and_label() {
        let opts = SdfOptions { label_tag: Some("y".into()) };
        let recs = parse_sdf_with(&format!("{METHANE}{PAIR}"), &opts).unwrap();
        assert_eq!(recs.len(), 2);
        let m = &recs[1].molecule;
        assert_eq!(m.bonds.len(), 1);
        assert_eq!(m.bonds[0].order, BondOrder::Single);
        assert_eq!(m.atoms[1].position, Some([3.0, 4.0, 0.0]));
        assert_eq!(recs[1].label.as_deref(), Some("1.25"));
        assert_eq!(recs[0].label, None);
    }

    #[test]
    fn short_atom_block_is_an_error_for_that_record() {
        let bad = METHANE.replace("  1  0  0  0  0", "  2  0  0  0  0");
        let text = format!("{PAIR}{bad}");
        let (record, line) = line_of(parse_sdf(&text).unwrap_err());
        assert_eq!(record, 1);
        // PAIR spans 12 lines; the missing atom line is line 6 of record 1.
        assert_eq!(line, 12 + 6);
    }

    #[test]
    fn bad_bond_lines() {
        let oob = PAIR.replace("  1  2  1  0", "  1  3  1  0");
        assert_eq!(line_of(parse_sdf(&oob).unwrap_err()), (0, 7));
        let kind = PAIR.replace("  1  2  1  0", "  1  2  8  0");
        assert_eq!(line_of(parse_sdf(&kind).unwrap_err()), (0, 7));
        let counts = PAIR.replace("  2  1  0  0  0  0  0  0  0  0999 V2000", " x");
        assert_eq!(line_of(parse_sdf(&counts).unwrap_err()), (0, 4));
    }

    #[test]
    fn charges_and_explicit_hydrogens() {
        let text = "ammonium
  test

  5  4  0  0  0  0  0  0  0  0999 V2000
    0.0000    0.0000    0.0000 N   0  0  0  0  0  0  0  0  0  0  0  0
    1.0000    0.0000    0.0000 H   0  0  0  0  0  0  0  0  0  0  0  0
   -1.0000    0.0000    0.0000 H   0  0  0  0  0  0  0  0  0  0  0  0
    0.0000    1.0000    0.0000 H   0  0  0  0  0  0  0  0  0  0  0  0
    0.0000   -1.0000    0.0000 H   0  0  0  0  0  0  0  0  0  0  0  0
  1  2  1  0
  1  3  1  0
  1  4  1  0
  1  5  1  0
M  CHG  1   1   1
M  END
$$$$
";
        let m = &parse_sdf(text).unwrap()[0];
        assert_eq!(m.atoms.len(), 1);
        assert_eq!(m.atoms[0].formal_charge, 1);
        assert_eq!(m.atoms[0].hydrogen_count(), 4);
    }

    #[test]
    fn aromatic_bond_type_marks_atoms() {
        let mut text = String::from("benzene\n  test\n\n  6  6  0  0  0  0  0  0  0  0999 V2000\n");
        for k in 0..6 {
            let t = k as f64 * std::f64::consts::PI / 3.0;
            text += &format!("{:>10.4}{:>10.4}{:>10.4} C   0  0  0  0  0  0  0  0  0  0  0  0\n", 1.39 * t.cos(), 1.39 * t.sin(), 0.0);
        }
        for k in 0..6 {
            text += &format!("{:>3}{:>3}  4  0\n", k + 1, (k + 1) % 6 + 1);
        }
        text += "M  END\n$$$$\n";
        let m = &parse_sdf(&text).unwrap()[0];
        assert!(m.atoms.iter().all(|a| a.is_aromatic && a.in_ring && a.hydrogen_count() == 1));
        assert!(m.bonds.iter().all(|b| b.is_aromatic && b.in_ring));
    }

    #[test]
    fn write_then_read() {
        let m = &parse_sdf(PAIR).unwrap()[0];
        let text = write_sdf(&[(m, Some(("y", "2".to_string())))]);
        let recs = parse_sdf_with(&text, &SdfOptions { label_tag: Some("y".into()) }).unwrap();
        assert_eq!(&recs[0].molecule, m);
        assert_eq!(recs[0].label.as_deref(), Some("2"));
    }

    #[test]
    fn stated_valence_fixes_hydrogen_count() {
        let pinned = PAIR.replacen("  0  0  0  0  0  0  0  0  0  0  0  0", "  0  0  0  0  0  2  0  0  0  0  0  0", 1);
        assert_eq!(parse_sdf(&pinned).unwrap()[0].atoms[0].hydrogen_count(), 1);
        let bare = PAIR.replacen("  0  0  0  0  0  0  0  0  0  0  0  0", "  0  0  0  0  0 15  0  0  0  0  0  0", 1);
        assert_eq!(parse_sdf(&bare).unwrap()[0].atoms[0].hydrogen_count(), 0);
    }

    #[test]
    fn hydrogen_counts_survive_a_round_trip() {
        // Bare aromatic carbons with a fractional order sum and a lone
        // carbon with no hydrogens: neither follows the valence rule.
        let mut atoms: Vec<Atom> = (0..3).map(|_| Atom::new(Element::C)).collect();
        atoms[0].is_aromatic = true;
        atoms[1].is_aromatic = true;
        let bonds = vec![Bond::new(0, 1, BondOrder::Aromatic)];
        let m = Molecule::new(atoms, bonds, "odd").unwrap();
        let back = &parse_sdf(&write_sdf(&[(&m, None)])).unwrap()[0];
        let counts = |m: &Molecule| m.atoms.iter().map(Atom::hydrogen_count).collect::<Vec<_>>();
        assert_eq!(counts(back), vec![0, 0, 0]);

        let m = &parse_sdf(PAIR).unwrap()[0];
        let back = &parse_sdf(&write_sdf(&[(m, None)])).unwrap()[0];
        assert_eq!(counts(back), vec![3, 1]);
    }
}
