use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::TrainError;
use crate::chem::{parse_sdf, parse_smiles, Molecule};
use crate::featurize::{featurize_molecule, MolTensors};
use crate::model::{MatConfig, Standardization, Task};
use crate::tensor::{Rng, Stream};

#[derive(Debug, Clone)]
pub struct Record {
    pub molecule: Molecule,
    pub label: f64,
    /// The `input` cell it came from.
    pub input: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub task: Task,
}

impl Dataset {
    pub fn new(records: Vec<Record>, task: Task) -> Result<Dataset, TrainError> {
        for r in &records {
            if !r.label.is_finite() {
                return Err(TrainError::Data(format!("non-finite label for '{}'", r.input)));
            }
            if task == Task::Binary && r.label != 0.0 && r.label != 1.0 {
                return Err(TrainError::Data(format!("binary label {} for '{}'", r.label, r.input)));
            }
        }
        Ok(Dataset { records, task })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Featurizes every record for `cfg` (dummy node and distance fallback).
    pub fn featurize(&self, cfg: &MatConfig) -> Result<Vec<MolTensors>, TrainError> {
        use rayon::prelude::*;
        self.records
            .par_iter()
            .map(|r| featurize_molecule(&r.molecule, cfg.dummy_node, cfg.distance_fallback).map_err(TrainError::from))
            .collect()
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            task: self.task,
        }
    }
}

pub type SplitFractions = [f64; 3];

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Train-fold label statistics, regression only.
    pub standardization: Option<Standardization>,
}

/// Mean and sample standard deviation (n − 1). A constant or single-label
/// fold gets std 1.
pub fn standardization_of(labels: &[f64]) -> Standardization {
    let n = labels.len() as f64;
    let mean = labels.iter().sum::<f64>() / n.max(1.0);
    let var = if labels.len() > 1 {
        labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    Standardization { mean, std }
}

/// Seeded permutation partition. Fold sizes are `round(f · n)` for train
/// and validation; test takes the rest.
pub fn random_split(ds: &Dataset, fractions: SplitFractions, seed: u64) -> Result<Split, TrainError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(TrainError::Config(format!("split fractions {fractions:?} must sum to 1")));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed, Stream::Split).shuffle(&mut order);
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let sizes = [n_train, n_val, n - n_train - n_val];
    for (k, name) in ["train", "val", "test"].into_iter().enumerate() {
        if fractions[k] > 0.0 && sizes[k] == 0 {
            return Err(TrainError::EmptyFold(name));
        }
    }
    let train = ds.subset(&order[..n_train]);
    let val = ds.subset(&order[n_train..n_train + n_val]);
    let test = ds.subset(&order[n_train + n_val..]);
    let standardization = (ds.task == Task::Regression && !train.is_empty()).then(|| standardization_of(&train.labels()));
    Ok(Split {
        train,
        val,
        test,
        standardization,
    })
}

/// `path#index` or a bare path ending in `.sdf`/`.mol`, otherwise SMILES.
fn sdf_reference(input: &str) -> Option<(&str, usize)> {
    let is_sdf = |p: &str| {
        let p = p.to_ascii_lowercase();
        p.ends_with(".sdf") || p.ends_with(".mol")
    };
    if let Some((path, idx)) = input.rsplit_once('#') {
        if is_sdf(path) {
            if let Ok(i) = idx.parse() {
                return Some((path, i));
            }
        }
    }
    is_sdf(input).then_some((input, 0))
}

/// One row of an input table: the `input` cell, its molecule and the
/// label when the table has one.
#[derive(Debug, Clone)]
pub struct InputRow {
    pub input: String,
    pub molecule: Molecule,
    pub label: Option<f64>,
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> TrainError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(path, source),
        other => TrainError::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Molecules from an SDF file, or rows of a delimited table with an
/// `input` column and an optional `label` column. SDF references inside a
/// table are resolved against the table's directory.
pub fn load_inputs(path: &Path) -> Result<Vec<InputRow>, TrainError> {
    if sdf_reference(&path.to_string_lossy()).is_some() {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mols = parse_sdf(&text).map_err(|e| TrainError::Data(format!("{}: {e}", path.display())))?;
        return Ok(mols
            .into_iter()
            .enumerate()
            .map(|(k, molecule)| InputRow {
                input: format!("{}#{k}", path.display()),
                molecule,
                label: None,
            })
            .collect());
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let data_err = |m: String| TrainError::Data(format!("{}: {m}", path.display()));
    let delimiter = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("tsv")) {
        b'\t'
    } else {
        b','
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let input_col = headers
        .iter()
        .position(|h| h == "input")
        .ok_or_else(|| data_err("missing 'input' column".into()))?;
    let label_col = headers.iter().position(|h| h == "label");

    let mut sdf_cache: HashMap<PathBuf, Vec<Molecule>> = HashMap::new();
    let mut rows = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let input = row.get(input_col).unwrap_or("").to_string();
        let label = match label_col {
            Some(c) => Some(
                row.get(c)
                    .unwrap_or("")
                    .parse::<f64>()
                    .map_err(|_| data_err(format!("row {}: bad label", line + 2)))?,
            ),
            None => None,
        };
        let molecule = match sdf_reference(&input) {
            Some((file, index)) => {
                let full = base.join(file);
                if !sdf_cache.contains_key(&full) {
                    let text = fs::read_to_string(&full).map_err(|e| io_err(&full, e))?;
                    let mols = parse_sdf(&text).map_err(|e| data_err(format!("{}: {e}", full.display())))?;
                    sdf_cache.insert(full.clone(), mols);
                }
                sdf_cache[&full]
                    .get(index)
                    .cloned()
                    .ok_or_else(|| data_err(format!("row {}: no record {index} in {file}", line + 2)))?
            }
            None => parse_smiles(&input).map_err(|e| data_err(format!("row {}: {e}", line + 2)))?,
        };
        rows.push(InputRow { input, molecule, label });
    }
    Ok(rows)
}

/// Reads a delimited file with `input` and `label` columns.
pub fn load_dataset(path: &Path, task: Task) -> Result<Dataset, TrainError> {
    let rows = load_inputs(path)?;
    let mut records = Vec::with_capacity(rows.len());
    for r in rows {
        let label = r
            .label
            .ok_or_else(|| TrainError::Data(format!("{}: missing 'label' column", path.display())))?;
        records.push(Record {
            molecule: r.molecule,
            label,
            input: r.input,
        });
    }
    Dataset::new(records, task)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let records = (0..n)
            .map(|i| Record {
                molecule: parse_smiles("CCO").unwrap(),
                label: i as f64 * 0.7 - 2.0,
                input: format!("m{i}"),
            })
            .collect();
        Dataset::new(records, Task::Regression).unwrap()
    }

    #[test]
    fn all_train() {
        let s = random_split(&toy(10), [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (10, 0, 0));
    }

    #[test]
    fn deterministic_partition() {
        let a = random_split(&toy(50), [0.8, 0.1, 0.1], 9).unwrap();
        let b = random_split(&toy(50), [0.8, 0.1, 0.1], 9).unwrap();
        let ids = |d: &Dataset| d.records.iter().map(|r| r.input.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a.train), ids(&b.train));
        assert_eq!(ids(&a.test), ids(&b.test));
        let c = random_split(&toy(50), [0.8, 0.1, 0.1], 10).unwrap();
        assert_ne!(ids(&a.train), ids(&c.train));
        assert_eq!(a.train.len() + a.val.len() + a.test.len(), 50);
    }

    #[test]
    fn standardized_train_fold() {
        let s = random_split(&toy(37), [0.7, 0.15, 0.15], 1).unwrap();
        let st = s.standardization.unwrap();
        let z: Vec<f64> = s.train.labels().iter().map(|&y| st.apply(y)).collect();
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((sd - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_fractions_and_empty_folds() {
        assert!(random_split(&toy(10), [0.5, 0.2, 0.2], 0).is_err());
        assert!(matches!(random_split(&toy(3), [0.9, 0.05, 0.05], 0), Err(TrainError::EmptyFold(_))));
    }

    #[test]
    fn binary_labels_checked() {
        let r = Record {
            molecule: parse_smiles("C").unwrap(),
            label: 0.5,
            input: "C".into(),
        };
        assert!(Dataset::new(vec![r], Task::Binary).is_err());
    }

    #[test]
    fn sdf_references() {
        assert_eq!(sdf_reference("mols.sdf#4"), Some(("mols.sdf", 4)));
        assert_eq!(sdf_reference("a/b.SDF"), Some(("a/b.SDF", 0)));
        assert_eq!(sdf_reference("C#N"), None);
        assert_eq!(sdf_reference("CC#CC"), None);
    }

    #[test]
    fn loads_smiles_and_sdf_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mol = parse_smiles("CO").unwrap();
        fs::write(dir.path().join("m.sdf"), crate::chem::write_sdf(&[(&mol, None), (&mol, None)])).unwrap();
        fs::write(dir.path().join("d.csv"), "input,label\nC#N,1.5\nm.sdf#1,2\n").unwrap();
        let ds = load_dataset(&dir.path().join("d.csv"), Task::Regression).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.records[0].molecule.atom_count(), 2);
        assert_eq!(ds.records[1].label, 2.0);
        fs::write(dir.path().join("bad.csv"), "smiles,label\nC,1\n").unwrap();
        assert!(load_dataset(&dir.path().join("bad.csv"), Task::Regression).is_err());
        fs::write(dir.path().join("nolabel.csv"), "input\nCCO\n").unwrap();
        assert!(load_dataset(&dir.path().join("nolabel.csv"), Task::Regression).is_err());
        assert_eq!(load_inputs(&dir.path().join("nolabel.csv")).unwrap()[0].label, None);
        assert_eq!(load_inputs(&dir.path().join("m.sdf")).unwrap().len(), 2);
        assert!(matches!(
            load_inputs(&dir.path().join("missing.csv")),
            Err(TrainError::Io { .. })
        ));
    }
}
