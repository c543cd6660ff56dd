#![allow(dead_code)]

//! Drug-like molecules assembled from ring and chain templates with
//! substituents, as SMILES. Unlike the toy walk molecules, an atom's
//! neighborhood says a lot about its identity here.

use mat_core::chem::{parse_smiles, Element, Molecule};
use mat_core::tensor::Rng;

const CORES: [&str; 9] = [
    "c1cc{a}ccc1{b}",
    "c1cc{a}ncc1{b}",
    "C1CC{a}CCC1{b}",
    "C1CN{a}CCC1{b}",
    "c1cc{a}sc1{b}",
    "c1cc{a}oc1{b}",
    "CC{a}C{b}",
    "CC{a}(C)C{b}",
    "OCC{a}C{b}",
];

const GROUPS: [&str; 16] = [
    "O", "N", "C", "CC", "C(=O)O", "C(=O)N", "Cl", "F", "Br", "OC", "C#N", "N(C)C", "C(F)(F)F", "S", "C(=O)C", "CO",
];

fn substituent(rng: &mut Rng, depth: usize) -> String {
    if depth < 2 && rng.uniform() < 0.3 {
        core(rng, depth + 1)
    } else {
        rng.choose(&GROUPS).to_string()
    }
}

fn core(rng: &mut Rng, depth: usize) -> String {
    // Nested rings need their own closure digit.
    let t = rng.choose(&CORES).replace('1', &(depth + 1).to_string());
    let a = if rng.uniform() < 0.7 {
        format!("({})", substituent(rng, depth))
    } else {
        String::new()
    };
    let b = if rng.uniform() < 0.7 { substituent(rng, depth) } else { String::new() };
    t.replace("{a}", &a).replace("{b}", &b)
}

pub fn synthetic_smiles(rng: &mut Rng) -> String {
    core(rng, 0)
}

pub fn synthetic_molecule(rng: &mut Rng) -> Molecule {
    parse_smiles(&synthetic_smiles(rng)).expect("template SMILES parse")
}

/// Sum of per-atom contributions from element and aromaticity: a regression
/// target that a model sees only through the atom features.
pub fn additive_target(mol: &Molecule) -> f64 {
    mol.atoms
        .iter()
        .map(|a| {
            let element = match a.element {
                Element::O => 0.5,
                Element::N => 0.8,
                Element::Cl | Element::Br => -0.6,
                Element::F => -0.3,
                _ => 0.0,
            };
            element + if a.is_aromatic { -0.2 } else { 0.1 }
        })
        .sum()
}
