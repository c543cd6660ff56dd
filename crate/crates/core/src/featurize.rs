//! Molecule → model tensors: atom feature rows, adjacency, distances, the
//! dummy node and padded batches.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chem::{Element, Molecule};
use crate::tensor::{masked_softmax_rows, Tensor};

/// Width of one atom feature row.
pub const ATOM_FEATURES: usize = 26;
/// Atom features plus the "is masked" channel used in pretraining.
pub const INPUT_DIM: usize = ATOM_FEATURES + 1;
/// Distance assigned to the dummy node and to padding.
pub const FAR_DISTANCE: f64 = 1e6;
/// Bond spacing assumed by [`DistanceFallback::TopoApprox`].
pub const TOPO_BOND_LENGTH: f64 = 1.5;

pub const IDENTITY: std::ops::Range<usize> = 0..12;
pub const HEAVY_NEIGHBORS: std::ops::Range<usize> = 12..18;
pub const HYDROGENS: std::ops::Range<usize> = 18..23;
pub const CHARGE: usize = 23;
pub const IN_RING: usize = 24;
pub const AROMATIC: usize = 25;
const DUMMY_SLOT: usize = 10;
const OTHER_SLOT: usize = 11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeaturizeError {
    #[error("molecule '{0}' has no atoms")]
    Empty(String),
    #[error("molecule '{0}' has no coordinates; pick a distance fallback")]
    NoCoordinates(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("cannot pad a {have}-node molecule to {pad_to}")]
    PadTooSmall { have: usize, pad_to: usize },
}

/// What to do when a molecule carries no 3D coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceFallback {
    #[default]
    Error,
    /// Zero distances, flagged as placeholders; only valid with λ_d = 0.
    ZeroLambdaOnly,
    /// Hop count × 1.5 Å along the bond graph.
    TopoApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// Row softmax over −D.
    #[default]
    #[serde(alias = "softmax")]
    SoftmaxRows,
    /// Elementwise exp(−d).
    Exp,
}

/// Bond descriptor used by the edge-feature variant: order, aromatic,
/// conjugated, in ring.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFeature {
    pub a: usize,
    pub b: usize,
    pub values: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MolTensors {
    /// `[n × 26]` atom feature rows.
    pub features: Tensor,
    /// `[n × n]`, entries in {0, 1}.
    pub adjacency: Tensor,
    /// `[n × n]` in Ångström.
    pub distance: Tensor,
    /// False on padding.
    pub mask: Vec<bool>,
    /// Nodes that are not padding, dummy included.
    pub n_real: usize,
    pub has_dummy: bool,
    /// Set when `distance` is a zero placeholder rather than geometry.
    pub distance_placeholder: bool,
    /// Rows replaced by the mask token during pretraining.
    pub masked: Vec<bool>,
    pub edges: Vec<EdgeFeature>,
}

impl MolTensors {
    pub fn n_nodes(&self) -> usize {
        self.mask.len()
    }

    /// Real atoms, excluding the dummy node and padding.
    pub fn n_atoms(&self) -> usize {
        self.n_real - usize::from(self.has_dummy)
    }

    pub fn dummy_index(&self) -> Option<usize> {
        self.has_dummy.then(|| self.n_real - 1)
    }

    /// Rows of the model input: features followed by the mask channel.
    pub fn input(&self) -> Tensor {
        let n = self.n_nodes();
        let mut data = Vec::with_capacity(n * INPUT_DIM);
        for i in 0..n {
            data.extend_from_slice(self.features.row(i));
            data.push(if self.masked[i] { 1.0 } else { 0.0 });
        }
        Tensor::matrix(n, INPUT_DIM, data).expect("input shape")
    }
}

fn atom_row(mol: &Molecule, i: usize) -> [f64; ATOM_FEATURES] {
    let atom = &mol.atoms[i];
    let mut row = [0.0; ATOM_FEATURES];
    let slot = match &atom.element {
        Element::B => 0,
        Element::N => 1,
        Element::C => 2,
        Element::O => 3,
        Element::F => 4,
        Element::P => 5,
        Element::S => 6,
        Element::Cl => 7,
        Element::Br => 8,
        Element::I => 9,
        Element::Other(_) => OTHER_SLOT,
    };
    row[slot] = 1.0;
    row[HEAVY_NEIGHBORS.start + mol.heavy_degree(i).min(5)] = 1.0;
    let h_atoms = mol.neighbors(i).filter(|&j| mol.atoms[j].element.is_hydrogen()).count() as u32;
    let h = (atom.hydrogen_count() + h_atoms).min(4) as usize;
    row[HYDROGENS.start + h] = 1.0;
    row[CHARGE] = atom.formal_charge as f64;
    row[IN_RING] = if atom.in_ring { 1.0 } else { 0.0 };
    row[AROMATIC] = if atom.is_aromatic { 1.0 } else { 0.0 };
    row
}

/// The feature row of the dummy node.
pub fn dummy_row() -> [f64; ATOM_FEATURES] {
    let mut row = [0.0; ATOM_FEATURES];
    row[DUMMY_SLOT] = 1.0;
    row[HEAVY_NEIGHBORS.start] = 1.0;
    row[HYDROGENS.start] = 1.0;
    row
}

pub fn featurize_molecule(
    mol: &Molecule,
    add_dummy: bool,
    fallback: DistanceFallback,
) -> Result<MolTensors, FeaturizeError> {
    let n_atoms = mol.atom_count();
    if n_atoms == 0 {
        return Err(FeaturizeError::Empty(mol.source_id.clone()));
    }
    let n = n_atoms + usize::from(add_dummy);

    let mut features = Vec::with_capacity(n * ATOM_FEATURES);
    for i in 0..n_atoms {
        features.extend_from_slice(&atom_row(mol, i));
    }
    if add_dummy {
        features.extend_from_slice(&dummy_row());
    }

    let mut adjacency = vec![0.0; n * n];
    for bond in &mol.bonds {
        adjacency[bond.a * n + bond.b] = 1.0;
        adjacency[bond.b * n + bond.a] = 1.0;
    }

    let mut distance = vec![FAR_DISTANCE; n * n];
    let mut placeholder = false;
    if mol.has_coordinates() {
        for i in 0..n_atoms {
            let p = mol.atoms[i].position.unwrap_or_default();
            for j in 0..n_atoms {
                let q = mol.atoms[j].position.unwrap_or_default();
                let d2: f64 = (0..3).map(|k| (p[k] - q[k]) * (p[k] - q[k])).sum();
                distance[i * n + j] = d2.sqrt();
            }
        }
    } else {
        match fallback {
            DistanceFallback::Error => return Err(FeaturizeError::NoCoordinates(mol.source_id.clone())),
            DistanceFallback::ZeroLambdaOnly => {
                placeholder = true;
                for i in 0..n_atoms {
                    for j in 0..n_atoms {
                        distance[i * n + j] = 0.0;
                    }
                }
            }
            DistanceFallback::TopoApprox => {
                for i in 0..n_atoms {
                    for (j, hops) in mol.hop_distances(i).into_iter().enumerate() {
                        distance[i * n + j] = hops.map_or(FAR_DISTANCE, |h| TOPO_BOND_LENGTH * h as f64);
                    }
                }
            }
        }
    }

    let edges = mol
        .bonds
        .iter()
        .map(|b| EdgeFeature {
            a: b.a,
            b: b.b,
            values: [
                b.order.value(),
                f64::from(u8::from(b.is_aromatic)),
                f64::from(u8::from(b.is_conjugated)),
                f64::from(u8::from(b.in_ring)),
            ],
        })
        .collect();

    Ok(MolTensors {
        features: Tensor::matrix(n, ATOM_FEATURES, features).expect("feature shape"),
        adjacency: Tensor::matrix(n, n, adjacency).expect("adjacency shape"),
        distance: Tensor::matrix(n, n, distance).expect("distance shape"),
        mask: vec![true; n],
        n_real: n,
        has_dummy: add_dummy,
        distance_placeholder: placeholder,
        masked: vec![false; n],
        edges,
    })
}

/// g(D). Masked rows and columns come back as zeros.
pub fn distance_kernel(d: &Tensor, kind: Kernel, mask: &[bool]) -> Tensor {
    let n = d.rows();
    let mut out = match kind {
        Kernel::SoftmaxRows => {
            let neg = Tensor::matrix(n, d.cols(), d.data().iter().map(|v| -v).collect()).expect("shape");
            masked_softmax_rows(&neg, mask).expect("mask length")
        }
        Kernel::Exp => {
            let data = d
                .data()
                .iter()
                .enumerate()
                .map(|(k, v)| if mask[k % n] { (-v).exp() } else { 0.0 })
                .collect();
            Tensor::matrix(n, d.cols(), data).expect("shape")
        }
    };
    zero_masked_rows(&mut out, mask);
    out
}

/// Divides each row by its sum; all-zero rows stay zero.
pub fn row_normalize(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    let c = a.cols();
    for row in out.data_mut().chunks_mut(c) {
        let s: f64 = row.iter().sum();
        if s != 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    out
}

fn zero_masked_rows(t: &mut Tensor, mask: &[bool]) {
    let c = t.cols();
    for (row, &m) in t.data_mut().chunks_mut(c).zip(mask) {
        if !m {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// `ReLU(w·f_ij + b)` for every pair, with `f_ij = 0` for non-bonded pairs.
/// Padding rows and columns are zero.
pub fn edge_feature_matrix(t: &MolTensors, w: &[f64; 4], b: f64) -> Tensor {
    let n = t.n_nodes();
    let mut pair = vec![[0.0; 4]; n * n];
    for e in &t.edges {
        pair[e.a * n + e.b] = e.values;
        pair[e.b * n + e.a] = e.values;
    }
    let data = pair
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let (i, j) = (k / n, k % n);
            if !t.mask[i] || !t.mask[j] {
                return 0.0;
            }
            let z: f64 = f.iter().zip(w).map(|(x, y)| x * y).sum::<f64>() + b;
            z.max(0.0)
        })
        .collect();
    Tensor::matrix(n, n, data).expect("shape")
}

/// `[n² × 4]` bond descriptors, one row per (i, j) pair in row-major order.
pub fn pair_features(t: &MolTensors) -> Tensor {
    let n = t.n_nodes();
    let mut data = vec![0.0; n * n * 4];
    for e in &t.edges {
        data[(e.a * n + e.b) * 4..(e.a * n + e.b + 1) * 4].copy_from_slice(&e.values);
        data[(e.b * n + e.a) * 4..(e.b * n + e.a + 1) * 4].copy_from_slice(&e.values);
    }
    Tensor::matrix(n * n, 4, data).expect("shape")
}

/// Molecules padded to a common node count.
#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: Vec<MolTensors>,
    pub n_nodes: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Pads `t` with `extra` trailing nodes.
pub fn pad(t: &MolTensors, size: usize) -> Result<MolTensors, FeaturizeError> {
    let n = t.n_nodes();
    if size < n {
        return Err(FeaturizeError::PadTooSmall { have: n, pad_to: size });
    }
    let grow = |m: &Tensor, fill: f64| {
        let mut data = vec![fill; size * size];
        for i in 0..n {
            data[i * size..i * size + n].copy_from_slice(m.row(i));
        }
        Tensor::matrix(size, size, data).expect("shape")
    };
    let mut features = t.features.data().to_vec();
    features.resize(size * ATOM_FEATURES, 0.0);
    let mut mask = t.mask.clone();
    mask.resize(size, false);
    let mut masked = t.masked.clone();
    masked.resize(size, false);
    Ok(MolTensors {
        features: Tensor::matrix(size, ATOM_FEATURES, features).expect("shape"),
        adjacency: grow(&t.adjacency, 0.0),
        distance: grow(&t.distance, FAR_DISTANCE),
        mask,
        n_real: t.n_real,
        has_dummy: t.has_dummy,
        distance_placeholder: t.distance_placeholder,
        masked,
        edges: t.edges.clone(),
    })
}

pub fn make_batch(mols: &[MolTensors], pad_to: Option<usize>) -> Result<Batch, FeaturizeError> {
    let largest = mols.iter().map(MolTensors::n_nodes).max().ok_or(FeaturizeError::EmptyBatch)?;
    let size = pad_to.unwrap_or(largest);
    let samples = mols.iter().map(|m| pad(m, size)).collect::<Result<Vec<_>, _>>()?;
    Ok(Batch { samples, n_nodes: size })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{parse_smiles, Atom, Bond, BondOrder};
    use proptest::prelude::*;

    fn two_atoms() -> Molecule {
        let mut a = Atom::new(Element::C);
        a.position = Some([0.0, 0.0, 0.0]);
        let mut b = Atom::new(Element::O);
        b.position = Some([3.0, 4.0, 0.0]);
        Molecule::new(vec![a, b], vec![Bond::new(0, 1, BondOrder::Single)], "co").unwrap()
    }

    fn block_sums(row: &[f64]) -> [f64; 3] {
        [
            row[IDENTITY].iter().sum(),
            row[HEAVY_NEIGHBORS].iter().sum(),
            row[HYDROGENS].iter().sum(),
        ]
    }

    #[test]
    fn pythagorean_distance() {
        let t = featurize_molecule(&two_atoms(), false, DistanceFallback::Error).unwrap();
        assert_eq!(t.distance.data(), &[0.0, 5.0, 5.0, 0.0]);
        assert_eq!(t.adjacency.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn benzene_carbon_row() {
        let t = featurize_molecule(&parse_smiles("c1ccccc1").unwrap(), false, DistanceFallback::ZeroLambdaOnly).unwrap();
        let row = t.features.row(0);
        let mut expected = [0.0; ATOM_FEATURES];
        expected[2] = 1.0;
        expected[HEAVY_NEIGHBORS.start + 2] = 1.0;
        expected[HYDROGENS.start + 1] = 1.0;
        expected[IN_RING] = 1.0;
        expected[AROMATIC] = 1.0;
        assert_eq!(row, &expected);
        assert!(t.distance_placeholder);
    }

    #[test]
    fn dummy_node() {
        let t = featurize_molecule(&two_atoms(), true, DistanceFallback::Error).unwrap();
        assert_eq!(t.n_nodes(), 3);
        assert_eq!(t.dummy_index(), Some(2));
        assert_eq!(t.features.row(2), &dummy_row());
        for k in 0..3 {
            assert_eq!(t.distance.at(2, k), FAR_DISTANCE);
            assert_eq!(t.distance.at(k, 2), FAR_DISTANCE);
            assert_eq!(t.adjacency.at(2, k), 0.0);
            assert_eq!(t.adjacency.at(k, 2), 0.0);
        }
    }

    #[test]
    fn missing_coordinates() {
        let mol = parse_smiles("CCO").unwrap();
        assert!(matches!(
            featurize_molecule(&mol, true, DistanceFallback::Error),
            Err(FeaturizeError::NoCoordinates(_))
        ));
        let t = featurize_molecule(&mol, false, DistanceFallback::TopoApprox).unwrap();
        assert_eq!(t.distance.row(0), &[0.0, 1.5, 3.0]);
        let t = featurize_molecule(&parse_smiles("C.C").unwrap(), false, DistanceFallback::TopoApprox).unwrap();
        assert_eq!(t.distance.at(0, 1), FAR_DISTANCE);
    }

    #[test]
    fn clamped_buckets_and_charge() {
        // Six heavy neighbors clamp into the top bucket.
        let mol = parse_smiles("[S](F)(F)(F)(F)(F)F").unwrap();
        let t = featurize_molecule(&mol, false, DistanceFallback::ZeroLambdaOnly).unwrap();
        assert_eq!(t.features.at(0, HEAVY_NEIGHBORS.end - 1), 1.0);
        let t = featurize_molecule(&parse_smiles("[NH4+]").unwrap(), false, DistanceFallback::ZeroLambdaOnly).unwrap();
        assert_eq!(t.features.at(0, HYDROGENS.end - 1), 1.0);
        assert_eq!(t.features.at(0, CHARGE), 1.0);
        let t = featurize_molecule(&parse_smiles("[Fe+2]").unwrap(), false, DistanceFallback::ZeroLambdaOnly).unwrap();
        assert_eq!(t.features.at(0, OTHER_SLOT), 1.0);
        assert_eq!(t.features.at(0, CHARGE), 2.0);
    }

    #[test]
    fn kernels() {
        let d = Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let g = distance_kernel(&d, Kernel::SoftmaxRows, &[true, true]);
        assert_eq!(g.data(), &[0.5, 0.5, 0.5, 0.5]);
        let d = Tensor::matrix(2, 2, vec![0.0, FAR_DISTANCE, FAR_DISTANCE, 0.0]).unwrap();
        let g = distance_kernel(&d, Kernel::Exp, &[true, true]);
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 1.0]);
        let g = distance_kernel(&d, Kernel::Exp, &[true, false]);
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dummy_suppression() {
        let mut rng = crate::tensor::Rng::new(5, crate::tensor::Stream::Toy);
        let mol = crate::toy::random_molecule(&mut rng, 10, 20);
        let t = featurize_molecule(&mol, true, DistanceFallback::Error).unwrap();
        let dummy = t.dummy_index().unwrap();
        let g = distance_kernel(&t.distance, Kernel::Exp, &t.mask);
        let s = distance_kernel(&t.distance, Kernel::SoftmaxRows, &t.mask);
        for i in 0..dummy {
            assert!(g.at(i, dummy) < 1e-300);
            assert!(s.at(i, dummy) < 1e-12);
        }
    }

    #[test]
    fn edge_features() {
        let benzene = parse_smiles("c1ccccc1").unwrap();
        let t = featurize_molecule(&benzene, true, DistanceFallback::ZeroLambdaOnly).unwrap();
        let e = edge_feature_matrix(&t, &[0.0, 1.0, 0.0, 0.0], 0.0);
        let ones = e.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 12);
        assert_eq!(e.data().iter().filter(|&&v| v != 0.0).count(), 12);
        for b in &benzene.bonds {
            assert_eq!(e.at(b.a, b.b), 1.0);
        }
        let t = featurize_molecule(&two_atoms(), false, DistanceFallback::Error).unwrap();
        let e = edge_feature_matrix(&t, &[1.0, 0.0, 0.0, 0.0], 0.0);
        assert_eq!(e.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn batch_padding() {
        let a = featurize_molecule(&parse_smiles("CCO").unwrap(), false, DistanceFallback::TopoApprox).unwrap();
        let b = featurize_molecule(&parse_smiles("CCCCO").unwrap(), false, DistanceFallback::TopoApprox).unwrap();
        let batch = make_batch(&[a.clone()], Some(3)).unwrap();
        assert_eq!(batch.samples[0], a);
        let batch = make_batch(&[a, b], None).unwrap();
        assert_eq!(batch.n_nodes, 5);
        assert_eq!(batch.samples[0].mask, vec![true, true, true, false, false]);
        for s in &batch.samples {
            assert_eq!(s.mask.iter().filter(|&&m| m).count(), s.n_real);
            assert_eq!(s.distance.at(0, 4).max(s.distance.at(4, 4)), if s.n_real == 3 { FAR_DISTANCE } else { 4.0 * 1.5 });
        }
        assert!(make_batch(&[], None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn permutation_equivariance(seed in 0u64..500) {
            let mut rng = crate::tensor::Rng::new(seed, crate::tensor::Stream::Shuffle);
            let mol = crate::toy::random_molecule(&mut rng, 6, 14);
            let mut order: Vec<usize> = (0..mol.atom_count()).collect();
            rng.shuffle(&mut order);
            let perm = mol.permuted(&order).unwrap();
            let t = featurize_molecule(&mol, false, DistanceFallback::Error).unwrap();
            let p = featurize_molecule(&perm, false, DistanceFallback::Error).unwrap();
            for (i, &oi) in order.iter().enumerate() {
                prop_assert_eq!(p.features.row(i), t.features.row(oi));
                for (j, &oj) in order.iter().enumerate() {
                    prop_assert_eq!(p.adjacency.at(i, j), t.adjacency.at(oi, oj));
                    prop_assert_eq!(p.distance.at(i, j), t.distance.at(oi, oj));
                }
            }
        }

        #[test]
        fn one_hot_blocks_sum_to_one(seed in 0u64..500, dummy in any::<bool>()) {
            let mut rng = crate::tensor::Rng::new(seed, crate::tensor::Stream::Toy);
            let mol = crate::toy::random_molecule(&mut rng, 2, 20);
            let t = featurize_molecule(&mol, dummy, DistanceFallback::Error).unwrap();
            for i in 0..t.n_nodes() {
                prop_assert_eq!(block_sums(t.features.row(i)), [1.0, 1.0, 1.0]);
            }
        }

        #[test]
        fn kernel_rows(seed in 0u64..500) {
            let mut rng = crate::tensor::Rng::new(seed, crate::tensor::Stream::Toy);
            let mol = crate::toy::random_molecule(&mut rng, 2, 20);
            let t = pad(&featurize_molecule(&mol, true, DistanceFallback::Error).unwrap(), mol.atom_count() + 4).unwrap();
            let s = distance_kernel(&t.distance, Kernel::SoftmaxRows, &t.mask);
            for i in 0..t.n_nodes() {
                let sum: f64 = s.row(i).iter().sum();
                if t.mask[i] {
                    prop_assert!((sum - 1.0).abs() < 1e-6);
                } else {
                    prop_assert_eq!(sum, 0.0);
                }
            }
        }

        #[test]
        fn exp_kernel_decreasing(a in 0.0f64..50.0, b in 0.0f64..50.0) {
            let d = Tensor::matrix(1, 2, vec![a, b]).unwrap();
            let g = distance_kernel(&d, Kernel::Exp, &[true, true]);
            if a < b {
                prop_assert!(g.data()[0] >= g.data()[1]);
            }
        }
    }
}
