//! Synthetic geometric molecules for the distance-threshold task: does the
//! donor marker sit within a threshold of the probe marker?

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::chem::{write_sdf, Atom, Bond, BondOrder, Element, Molecule};
use crate::tensor::{Rng, Stream};

pub const DONOR: Element = Element::B;
pub const PROBE: Element = Element::I;
const REGULAR: [Element; 8] = [
    Element::C,
    Element::N,
    Element::O,
    Element::F,
    Element::P,
    Element::S,
    Element::Cl,
    Element::Br,
];
pub const STEP: f64 = 1.5;
pub const MIN_SEPARATION: f64 = 1.0;
const BALANCE: (f64, f64) = (0.45, 0.55);

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("need at least 10 molecules, got {0}")]
    TooFew(usize),
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("could not balance classes within 45-55% after {0} attempts")]
    Unbalanced(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub n: usize,
    /// Requested threshold in Å; replaced by the median marker distance
    /// when it leaves the classes unbalanced.
    pub threshold: f64,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Probability that the walk restarts from a random earlier node
    /// instead of the last one. 0 is a plain chain walk.
    pub branching: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n: 2000,
            threshold: 20.0,
            min_nodes: 10,
            max_nodes: 40,
            branching: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToySample {
    pub molecule: Molecule,
    pub donor: usize,
    pub probe: usize,
    pub distance: f64,
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct ToySet {
    pub samples: Vec<ToySample>,
    pub threshold: f64,
    /// True when the requested threshold was replaced.
    pub threshold_tuned: bool,
    pub positive_fraction: f64,
}

pub fn toy_label(distance: f64, threshold: f64) -> u8 {
    u8::from(distance < threshold)
}

fn dist(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

fn unit_vector(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Self-avoiding walk with fixed step length, occasionally branching from
/// an earlier node. Every pair ends up at least 1 Å apart.
fn walk(rng: &mut Rng, n: usize, branching: f64) -> Vec<[f64; 3]> {
    let mut pts: Vec<[f64; 3]> = vec![[0.0; 3]];
    let mut stuck = false;
    while pts.len() < n {
        let mut from = pts.len() - 1;
        if pts.len() > 1 && (stuck || rng.uniform() < branching) {
            from = rng.below(pts.len());
        }
        let mut placed = false;
        for _ in 0..50 {
            let u = unit_vector(rng);
            let base = pts[from];
            let cand = [base[0] + STEP * u[0], base[1] + STEP * u[1], base[2] + STEP * u[2]];
            if pts.iter().all(|p| dist(p, &cand) >= MIN_SEPARATION) {
                pts.push(cand);
                placed = true;
                break;
            }
        }
        // After a dead end the next attempt starts from a random node.
        stuck = !placed;
    }
    pts
}

/// Random tree over the nodes plus a few extra edges. The topology ignores
/// the geometry on purpose.
fn random_bonds(rng: &mut Rng, n: usize) -> Vec<Bond> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut seen = std::collections::HashSet::new();
    let mut bonds = Vec::new();
    for k in 1..n {
        let (a, b) = (order[k], order[rng.below(k)]);
        seen.insert((a.min(b), a.max(b)));
        bonds.push(Bond::new(a, b, BondOrder::Single));
    }
    for _ in 0..n / 5 {
        let (a, b) = (rng.below(n), rng.below(n));
        if a != b && seen.insert((a.min(b), a.max(b))) {
            bonds.push(Bond::new(a, b, BondOrder::Single));
        }
    }
    bonds
}

/// A random molecule with coordinates and regular elements only.
pub fn random_molecule(rng: &mut Rng, min_nodes: usize, max_nodes: usize) -> Molecule {
    let n = min_nodes + rng.below(max_nodes - min_nodes + 1);
    build(rng, n, 0.5, None).0
}

fn build(rng: &mut Rng, n: usize, branching: f64, markers: Option<(usize, usize)>) -> (Molecule, Vec<[f64; 3]>) {
    let pts = walk(rng, n, branching);
    let atoms: Vec<Atom> = pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let element = match markers {
                Some((d, _)) if d == i => DONOR,
                Some((_, q)) if q == i => PROBE,
                _ => rng.choose(&REGULAR).clone(),
            };
            let mut atom = Atom::new(element);
            atom.position = Some(*p);
            atom
        })
        .collect();
    let bonds = random_bonds(rng, n);
    let mol = Molecule::new(atoms, bonds, format!("toy-{n}")).expect("generated bonds are valid");
    (mol, pts)
}

fn sample(rng: &mut Rng, cfg: &ToyConfig, index: usize) -> ToySample {
    let n = cfg.min_nodes + rng.below(cfg.max_nodes - cfg.min_nodes + 1);
    let donor = rng.below(n);
    let probe = (donor + 1 + rng.below(n - 1)) % n;
    let (mut molecule, pts) = build(rng, n, cfg.branching, Some((donor, probe)));
    molecule.source_id = format!("toy-{index}");
    ToySample {
        molecule,
        donor,
        probe,
        distance: dist(&pts[donor], &pts[probe]),
        label: 0,
    }
}

fn positive_fraction(samples: &[ToySample]) -> f64 {
    samples.iter().filter(|s| s.label == 1).count() as f64 / samples.len() as f64
}

pub fn generate(cfg: &ToyConfig) -> Result<ToySet, ToyError> {
    if cfg.n < 10 {
        return Err(ToyError::TooFew(cfg.n));
    }
    if !(cfg.threshold > 0.0) {
        return Err(ToyError::BadThreshold(cfg.threshold));
    }
    const ATTEMPTS: usize = 5;
    let root = Rng::new(cfg.seed, Stream::Toy);
    for attempt in 0..ATTEMPTS {
        let mut rng = root.fork(attempt as u64);
        let mut samples: Vec<ToySample> = (0..cfg.n).map(|i| sample(&mut rng, cfg, i)).collect();
        let mut threshold = cfg.threshold;
        let label_all = |samples: &mut [ToySample], t: f64| {
            for s in samples.iter_mut() {
                s.label = toy_label(s.distance, t);
            }
        };
        label_all(&mut samples, threshold);
        let mut frac = positive_fraction(&samples);
        let mut tuned = false;
        if !(BALANCE.0..=BALANCE.1).contains(&frac) {
            let mut d: Vec<f64> = samples.iter().map(|s| s.distance).collect();
            d.sort_by(f64::total_cmp);
            let m = d.len() / 2;
            // Midpoint between the two middle order statistics splits evenly.
            threshold = if d.len() % 2 == 0 { 0.5 * (d[m - 1] + d[m]) } else { 0.5 * (d[m] + d[m + 1]) };
            label_all(&mut samples, threshold);
            frac = positive_fraction(&samples);
            tuned = true;
        }
        if (BALANCE.0..=BALANCE.1).contains(&frac) {
            return Ok(ToySet {
                samples,
                threshold,
                threshold_tuned: tuned,
                positive_fraction: frac,
            });
        }
    }
    Err(ToyError::Unbalanced(ATTEMPTS))
}

/// Writes `toy.sdf` and `toy.csv` (columns `input,label`, inputs of the
/// form `toy.sdf#k`). Returns the CSV path.
pub fn write_dataset(set: &ToySet, dir: &Path) -> Result<PathBuf, ToyError> {
    fs::create_dir_all(dir)?;
    let records: Vec<(&Molecule, Option<(&str, String)>)> = set
        .samples
        .iter()
        .map(|s| (&s.molecule, Some(("label", s.label.to_string()))))
        .collect();
    fs::write(dir.join("toy.sdf"), write_sdf(&records))?;
    let mut csv = String::from("input,label\n");
    for (k, s) in set.samples.iter().enumerate() {
        csv.push_str(&format!("toy.sdf#{k},{}\n", s.label));
    }
    let path = dir.join("toy.csv");
    fs::write(&path, csv)?;
    fs::write(
        dir.join("toy_info.txt"),
        format!(
            "threshold\t{}\nthreshold_tuned\t{}\npositive_fraction\t{}\nn\t{}\n",
            set.threshold,
            set.threshold_tuned,
            set.positive_fraction,
            set.samples.len()
        ),
    )?;
    Ok(path)
}
