//! Molecule data model and chemical file readers.
//!
//! Two input paths exist: V2000 SD files, which carry 3D coordinates, and a
//! SMILES subset, which does not. Both produce a [`Molecule`] whose ring and
//! conjugation flags are recomputed from the bond graph rather than trusted
//! from the input.

mod pattern;
mod sdf;
mod smiles;

pub use pattern::{match_pattern, PatternId};
pub use sdf::{parse_sdf, parse_sdf_with, write_sdf, SdfOptions, SdfRecord};
pub use smiles::parse_smiles;

use std::collections::{HashSet, VecDeque};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChemError {
    #[error("SDF record {record}, line {line}: {message}")]
    Sdf {
        record: usize,
        line: usize,
        message: String,
    },
    #[error("SMILES parse error at byte {offset}: {message}")]
    Smiles { offset: usize, message: String },
    #[error("invalid molecule: {0}")]
    Invalid(String),
}

/// Element identity as far as the atom featurization cares.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Element {
    B,
    N,
    C,
    O,
    F,
    P,
    S,
    Cl,
    Br,
    I,
    /// Any other symbol, kept verbatim so files can be written back out.
    Other(String),
}

impl Element {
    pub fn from_symbol(symbol: &str) -> Element {
        match symbol {
            "B" => Element::B,
            "N" => Element::N,
            "C" => Element::C,
            "O" => Element::O,
            "F" => Element::F,
            "P" => Element::P,
            "S" => Element::S,
            "Cl" => Element::Cl,
            "Br" => Element::Br,
            "I" => Element::I,
            other => Element::Other(other.to_string()),
        }
    }

    pub fn symbol(&self) -> &str {
        match self {
            Element::B => "B",
            Element::N => "N",
            Element::C => "C",
            Element::O => "O",
            Element::F => "F",
            Element::P => "P",
            Element::S => "S",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
            Element::Other(s) => s,
        }
    }

    /// Default valence used for implicit hydrogen counting.
    pub fn default_valence(&self) -> Option<u32> {
        match self {
            Element::B => Some(3),
            Element::C => Some(4),
            Element::N => Some(3),
            Element::O => Some(2),
            Element::P => Some(3),
            Element::S => Some(2),
            Element::F | Element::Cl | Element::Br | Element::I => Some(1),
            Element::Other(_) => None,
        }
    }

    pub fn is_hydrogen(&self) -> bool {
        matches!(self, Element::Other(s) if s == "H")
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub element: Element,
    pub formal_charge: i32,
    /// Hydrogens stated by the input (bracket atoms, folded explicit H atoms).
    pub explicit_h_count: Option<u32>,
    /// Hydrogens added by the valence rule.
    pub implicit_h_count: u32,
    pub is_aromatic: bool,
    /// Computed from the bond graph.
    pub in_ring: bool,
    /// Cartesian position in Ångström.
    pub position: Option<[f64; 3]>,
}

impl Atom {
    pub fn new(element: Element) -> Atom {
        Atom {
            element,
            formal_charge: 0,
            explicit_h_count: None,
            implicit_h_count: 0,
            is_aromatic: false,
            in_ring: false,
            position: None,
        }
    }

    pub fn hydrogen_count(&self) -> u32 {
        self.explicit_h_count.unwrap_or(0) + self.implicit_h_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BondOrder {
    Single,
    Aromatic,
    Double,
    Triple,
}

impl BondOrder {
    pub fn value(self) -> f64 {
        match self {
            BondOrder::Single => 1.0,
            BondOrder::Aromatic => 1.5,
            BondOrder::Double => 2.0,
            BondOrder::Triple => 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
    pub is_aromatic: bool,
    pub in_ring: bool,
    pub is_conjugated: bool,
}

impl Bond {
    pub fn new(a: usize, b: usize, order: BondOrder) -> Bond {
        Bond {
            a,
            b,
            order,
            is_aromatic: order == BondOrder::Aromatic,
            in_ring: false,
            is_conjugated: false,
        }
    }

    pub fn other(&self, atom: usize) -> usize {
        if self.a == atom {
            self.b
        } else {
            self.a
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    pub source_id: String,
    /// Bond indices incident to each atom.
    adjacency: Vec<Vec<usize>>,
}

impl Molecule {
    /// Validates the bond list and recomputes ring and conjugation flags.
    pub fn new(
        atoms: Vec<Atom>,
        bonds: Vec<Bond>,
        source_id: impl Into<String>,
    ) -> Result<Molecule, ChemError> {
        let n = atoms.len();
        let mut seen = HashSet::new();
        for bond in &bonds {
            if bond.a >= n || bond.b >= n {
                return Err(ChemError::Invalid(format!(
                    "bond {}-{} references an atom outside 0..{n}",
                    bond.a, bond.b
                )));
            }
            if bond.a == bond.b {
                return Err(ChemError::Invalid(format!("self bond on atom {}", bond.a)));
            }
            if !seen.insert((bond.a.min(bond.b), bond.a.max(bond.b))) {
                return Err(ChemError::Invalid(format!(
                    "duplicate bond {}-{}",
                    bond.a, bond.b
                )));
            }
            if (bond.order == BondOrder::Aromatic) != bond.is_aromatic {
                return Err(ChemError::Invalid(format!(
                    "bond {}-{}: order 1.5 must coincide with the aromatic flag",
                    bond.a, bond.b
                )));
            }
        }
        let with_pos = atoms.iter().filter(|a| a.position.is_some()).count();
        if with_pos != 0 && with_pos != n {
            return Err(ChemError::Invalid(
                "positions must be given for all atoms or none".into(),
            ));
        }

        let mut adjacency = vec![Vec::new(); n];
        for (k, bond) in bonds.iter().enumerate() {
            adjacency[bond.a].push(k);
            adjacency[bond.b].push(k);
        }
        let mut mol = Molecule {
            atoms,
            bonds,
            source_id: source_id.into(),
            adjacency,
        };
        mol.perceive_rings();
        mol.perceive_conjugation();
        Ok(mol)
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn has_coordinates(&self) -> bool {
        !self.atoms.is_empty() && self.atoms.iter().all(|a| a.position.is_some())
    }

    /// Indices of bonds touching `atom`.
    pub fn incident_bonds(&self, atom: usize) -> &[usize] {
        &self.adjacency[atom]
    }

    pub fn neighbors(&self, atom: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[atom]
            .iter()
            .map(move |&k| self.bonds[k].other(atom))
    }

    /// Number of bonded neighbors that are not hydrogen.
    pub fn heavy_degree(&self, atom: usize) -> usize {
        self.neighbors(atom)
            .filter(|&j| !self.atoms[j].element.is_hydrogen())
            .count()
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<&Bond> {
        self.adjacency[a]
            .iter()
            .map(|&k| &self.bonds[k])
            .find(|bond| bond.other(a) == b)
    }

    pub fn bond_order_sum(&self, atom: usize) -> f64 {
        self.adjacency[atom]
            .iter()
            .map(|&k| self.bonds[k].order.value())
            .sum()
    }

    /// Graph hop counts from `source`; `None` for unreachable atoms.
    pub fn hop_distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.atoms.len()];
        let mut queue = VecDeque::new();
        dist[source] = Some(0);
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for v in self.neighbors(u) {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Returns the molecule with atoms reordered so that new atom `i` is old
    /// atom `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Molecule, ChemError> {
        let n = self.atoms.len();
        if order.len() != n {
            return Err(ChemError::Invalid("permutation length mismatch".into()));
        }
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in order.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(ChemError::Invalid("not a permutation".into()));
            }
            inverse[old] = new;
        }
        let atoms = order.iter().map(|&old| self.atoms[old].clone()).collect();
        let bonds = self
            .bonds
            .iter()
            .map(|b| {
                let mut nb = b.clone();
                nb.a = inverse[b.a];
                nb.b = inverse[b.b];
                nb
            })
            .collect();
        Molecule::new(atoms, bonds, self.source_id.clone())
    }

    /// A bond lies on a cycle iff it is not a bridge.
    fn perceive_rings(&mut self) {
        let bridges = find_bridges(self.atoms.len(), &self.bonds, &self.adjacency);
        for (bond, is_bridge) in self.bonds.iter_mut().zip(&bridges) {
            bond.in_ring = !is_bridge;
        }
        for (i, atom) in self.atoms.iter_mut().enumerate() {
            atom.in_ring = self.adjacency[i].iter().any(|&k| !bridges[k]);
        }
    }

    /// Aromatic bonds are conjugated; a single or double bond is conjugated
    /// when it shares an atom with a double or triple bond.
    fn perceive_conjugation(&mut self) {
        let flags: Vec<bool> = (0..self.bonds.len())
            .map(|k| {
                let bond = &self.bonds[k];
                if bond.is_aromatic {
                    return true;
                }
                if !matches!(bond.order, BondOrder::Single | BondOrder::Double) {
                    return false;
                }
                [bond.a, bond.b].iter().any(|&atom| {
                    self.adjacency[atom].iter().any(|&other| {
                        other != k
                            && matches!(
                                self.bonds[other].order,
                                BondOrder::Double | BondOrder::Triple
                            )
                    })
                })
            })
            .collect();
        for (bond, flag) in self.bonds.iter_mut().zip(flags) {
            bond.is_conjugated = flag;
        }
    }
}

/// Iterative low-link bridge search.
fn find_bridges(n: usize, bonds: &[Bond], adjacency: &[Vec<usize>]) -> Vec<bool> {
    let mut is_bridge = vec![false; bonds.len()];
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut timer = 0;
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        // (vertex, bond used to enter it, next incident bond position)
        let mut stack: Vec<(usize, Option<usize>, usize)> = vec![(root, None, 0)];
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        while let Some(&mut (u, parent_bond, ref mut pos)) = stack.last_mut() {
            if *pos < adjacency[u].len() {
                let k = adjacency[u][*pos];
                *pos += 1;
                if Some(k) == parent_bond {
                    continue;
                }
                let v = bonds[k].other(u);
                if disc[v] == usize::MAX {
                    disc[v] = timer;
                    low[v] = timer;
                    timer += 1;
                    stack.push((v, Some(k), 0));
                } else {
                    low[u] = low[u].min(disc[v]);
                }
            } else {
                stack.pop();
                if let (Some(k), Some(&(p, _, _))) = (parent_bond, stack.last()) {
                    low[p] = low[p].min(low[u]);
                    if low[u] > disc[p] {
                        is_bridge[k] = true;
                    }
                }
            }
        }
    }
    is_bridge
}

/// Valence-rule hydrogens: default valence minus bond orders, stated
/// hydrogens and the magnitude of the charge, floored at zero.
pub(crate) fn valence_hydrogens(element: &Element, bond_order_sum: f64, stated_h: u32, charge: i32) -> u32 {
    match element.default_valence() {
        Some(v) => {
            let free = v as f64 - bond_order_sum - stated_h as f64 - charge.unsigned_abs() as f64;
            if free > 0.0 {
                free.floor() as u32
            } else {
                0
            }
        }
        None => 0,
    }
}
