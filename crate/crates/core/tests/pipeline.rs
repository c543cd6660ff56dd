//! Files on disk through training, checkpointing and attention analysis.

mod common;

use std::fs;

use common::synth::{additive_target, synthetic_molecule};
use mat_core::analyze::attention_stats;
use mat_core::chem::{parse_sdf, write_sdf, PatternId};
use mat_core::featurize::{featurize_molecule, DistanceFallback};
use mat_core::model::{Checkpoint, MatConfig, Task};
use mat_core::tensor::{Rng, Stream};
use mat_core::toy::{generate, write_dataset, ToyConfig};
use mat_core::train::{evaluate, load_dataset, load_inputs, random_split, train_loop, TrainConfig};

#[test]
fn toy_files_train_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let set = generate(&ToyConfig {
        n: 120,
        seed: 9,
        ..ToyConfig::default()
    })
    .unwrap();
    let csv = write_dataset(&set, dir.path()).unwrap();
    let ds = load_dataset(&csv, Task::Binary).unwrap();
    assert_eq!(ds.len(), 120);
    // Coordinates survive the SDF round trip to the written precision.
    let a = &set.samples[7].molecule;
    let b = &ds.records[7].molecule;
    assert_eq!(a.atom_count(), b.atom_count());
    let (ta, tb) = (
        featurize_molecule(a, true, DistanceFallback::Error).unwrap(),
        featurize_molecule(b, true, DistanceFallback::Error).unwrap(),
    );
    assert_eq!(ta.features, tb.features);
    assert!(ta.distance.max_abs_diff(&tb.distance) < 1e-3);

    let split = random_split(&ds, [0.8, 0.2, 0.0], 1).unwrap();
    let cfg = MatConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        task: Task::Binary,
        ..MatConfig::default()
    };
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let out = train_loop(&split, &cfg, &tc, None).unwrap();
    let path = dir.path().join("m.ckpt");
    out.checkpoint.save(&path).unwrap();
    let model = Checkpoint::load(&path).unwrap().model().unwrap();

    let val = split.val.featurize(&cfg).unwrap();
    let r = evaluate(&model, &val, &split.val.labels(), None).unwrap();
    let recorded = out.checkpoint.meta.val_loss.unwrap();
    assert!((r.loss - recorded).abs() <= 1e-5 * recorded.abs().max(1.0));

    let records: Vec<_> = val.iter().map(|t| model.attention(t).unwrap()).collect();
    let mols: Vec<_> = split.val.records.iter().map(|r| r.molecule.clone()).collect();
    for p in PatternId::ALL {
        let stats = attention_stats(&records, &mols, p).unwrap();
        assert_eq!(stats.len(), 2);
        let atoms: usize = mols.iter().map(|m| m.atom_count()).sum();
        assert!(stats.iter().all(|s| s.n_plus + s.n_minus == atoms));
    }
}

#[test]
fn mixed_smiles_and_sdf_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(3, Stream::Toy);
    let mols: Vec<_> = (0..4).map(|_| synthetic_molecule(&mut rng)).collect();
    let refs: Vec<_> = mols.iter().map(|m| (m, None)).collect();
    fs::write(dir.path().join("lib.sdf"), write_sdf(&refs)).unwrap();
    let back = parse_sdf(&fs::read_to_string(dir.path().join("lib.sdf")).unwrap()).unwrap();
    assert_eq!(back.len(), 4);

    let table = format!(
        "input\tlabel\nlib.sdf#2\t{}\nCCO\t0.25\nc1ccncc1\t-1\n",
        additive_target(&mols[2])
    );
    let path = dir.path().join("mixed.tsv");
    fs::write(&path, table).unwrap();
    let rows = load_inputs(&path).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].molecule.atom_count(), mols[2].atom_count());
    assert_eq!(rows[1].label, Some(0.25));
    assert_eq!(rows[2].molecule.atom_count(), 6);
    let ds = load_dataset(&path, Task::Regression).unwrap();
    let split = random_split(&ds, [1.0, 0.0, 0.0], 0).unwrap();
    let st = split.standardization.unwrap();
    assert!(st.std > 0.0);
}
