//! The six fixed atom patterns used by the attention-head analysis.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use super::{BondOrder, Element, Molecule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternId {
    /// `[c;D2]`: aromatic carbon with two heavy neighbors.
    AromaticCarbonD2,
    /// `[S,s]`: any sulfur.
    Sulfur,
    /// `[N;R0]`: nitrogen outside every ring.
    AcyclicNitrogen,
    /// `O=*`: oxygen carrying a double bond.
    CarbonylOxygen,
    /// `[a;D3]`: aromatic atom with three heavy neighbors.
    AromaticD3,
    /// `n`: aromatic nitrogen.
    AromaticNitrogen,
}

impl PatternId {
    pub const ALL: [PatternId; 6] = [
        PatternId::AromaticCarbonD2,
        PatternId::Sulfur,
        PatternId::AcyclicNitrogen,
        PatternId::CarbonylOxygen,
        PatternId::AromaticD3,
        PatternId::AromaticNitrogen,
    ];

    /// Short identifier accepted on the command line.
    pub fn cli_name(self) -> &'static str {
        match self {
            PatternId::AromaticCarbonD2 => "cD2",
            PatternId::Sulfur => "S",
            PatternId::AcyclicNitrogen => "NR0",
            PatternId::CarbonylOxygen => "O=",
            PatternId::AromaticD3 => "aD3",
            PatternId::AromaticNitrogen => "n",
        }
    }

    pub fn smarts(self) -> &'static str {
        match self {
            PatternId::AromaticCarbonD2 => "[c;D2]",
            PatternId::Sulfur => "[S,s]",
            PatternId::AcyclicNitrogen => "[N;R0]",
            PatternId::CarbonylOxygen => "O=*",
            PatternId::AromaticD3 => "[a;D3]",
            PatternId::AromaticNitrogen => "n",
        }
    }

    fn matches(self, mol: &Molecule, i: usize) -> bool {
        let atom = &mol.atoms[i];
        match self {
            PatternId::AromaticCarbonD2 => {
                atom.element == Element::C && atom.is_aromatic && mol.heavy_degree(i) == 2
            }
            PatternId::Sulfur => atom.element == Element::S,
            PatternId::AcyclicNitrogen => atom.element == Element::N && !atom.in_ring,
            PatternId::CarbonylOxygen => {
                atom.element == Element::O
                    && !atom.is_aromatic
                    && mol
                        .incident_bonds(i)
                        .iter()
                        .any(|&k| mol.bonds[k].order == BondOrder::Double)
            }
            PatternId::AromaticD3 => atom.is_aromatic && mol.heavy_degree(i) == 3,
            PatternId::AromaticNitrogen => atom.element == Element::N && atom.is_aromatic,
        }
    }
}

impl fmt::Display for PatternId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for PatternId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PatternId::ALL
            .into_iter()
            .find(|p| p.cli_name() == s || p.smarts() == s)
            .ok_or_else(|| {
                format!("unknown pattern '{s}', expected one of cD2, S, NR0, O=, aD3, n")
            })
    }
}

/// Indices of atoms matching `pattern`.
pub fn match_pattern(mol: &Molecule, pattern: PatternId) -> BTreeSet<usize> {
    (0..mol.atoms.len())
        .filter(|&i| pattern.matches(mol, i))
        .collect()
}
