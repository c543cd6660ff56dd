use super::*;
use crate::featurize::{featurize_molecule, pad, Kernel};
use crate::tensor::{grad_check, GradCheckConfig};
use crate::toy::random_molecule;
use crate::tensor::Rng;
use proptest::prelude::*;

fn small_config() -> MatConfig {
    MatConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        n_pff: 1,
        ..MatConfig::default()
    }
}

fn tensors(seed: u64, dummy: bool) -> MolTensors {
    let mut rng = Rng::new(seed, Stream::Toy);
    let mol = random_molecule(&mut rng, 5, 12);
    featurize_molecule(&mol, dummy, DistanceFallback::Error).unwrap()
}

fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> Vec<Vec<f64>> {
    (0..r).map(|_| (0..c).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).collect()
}

/// Plain nested-loop multi-head attention with the output projection.
fn vanilla_attention(x: &[Vec<f64>], p: &ParamStore, layer: usize, heads: usize, mask: &[bool]) -> Vec<Vec<f64>> {
    let get = |n: &str| p.by_name(&format!("layers.{layer}.attn.{n}")).unwrap();
    let proj = |w: &Tensor, b: &Tensor, x: &[Vec<f64>]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                (0..w.cols())
                    .map(|j| b.data()[j] + (0..w.rows()).map(|k| row[k] * w.at(k, j)).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let q = proj(get("q.weight"), get("q.bias"), x);
    let k = proj(get("k.weight"), get("k.bias"), x);
    let v = proj(get("v.weight"), get("v.bias"), x);
    let n = x.len();
    let d = q[0].len();
    let dk = d / heads;
    let mut cat = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = (0..n).filter(|&j| mask[j]).map(|j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = (0..n).map(|j| if mask[j] { (logits[j] - m).exp() } else { 0.0 }).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                cat[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    proj(get("o.weight"), get("o.bias"), &cat)
}

#[test]
fn init_is_deterministic_and_bounded() {
    let cfg = small_config();
    let a = init_params(&cfg, &mut Rng::new(3, Stream::Init)).unwrap();
    let b = init_params(&cfg, &mut Rng::new(3, Stream::Init)).unwrap();
    assert_eq!(a, b);
    assert!(a.by_name("layers.0.norm1.gamma").unwrap().data().iter().all(|&v| v == 1.0));
    assert!(a.by_name("layers.1.attn.q.bias").unwrap().data().iter().all(|&v| v == 0.0));

    let big = MatConfig {
        d_model: 1024,
        n_layers: 1,
        n_heads: 16,
        ..MatConfig::default()
    };
    let p = init_params(&big, &mut Rng::new(1, Stream::Init)).unwrap();
    let w = p.by_name("layers.0.attn.q.weight").unwrap();
    let bound = (6.0f64 / 2048.0).sqrt();
    let max = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max <= bound && max > 0.99 * bound);
}

#[test]
fn config_validation() {
    let mut cfg = small_config();
    cfg.n_heads = 3;
    assert!(matches!(cfg.validate(), Err(ModelError::Config(_))));
    let mut cfg = small_config();
    cfg.lambda_d = -0.1;
    assert!(cfg.validate().is_err());
    let mut cfg = small_config();
    cfg.distance_fallback = DistanceFallback::ZeroLambdaOnly;
    assert!(cfg.validate().is_err());
    cfg.lambda_d = 0.0;
    assert!(cfg.validate().is_ok());
}

#[test]
fn placeholder_distances_need_zero_lambda_d() {
    let mol = crate::chem::parse_smiles("CCO").unwrap();
    let t = featurize_molecule(&mol, true, DistanceFallback::ZeroLambdaOnly).unwrap();
    let model = Model::new(small_config(), 0).unwrap();
    assert!(matches!(model.predict(&t), Err(ModelError::Config(_))));
    let mut cfg = small_config();
    cfg.lambda_d = 0.0;
    assert!(Model::new(cfg, 0).unwrap().predict(&t).is_ok());
}

#[test]
fn reduces_to_vanilla_attention() {
    let mut cfg = small_config();
    cfg.lambda_a = 1.0;
    cfg.lambda_d = 0.0;
    cfg.lambda_g = 0.0;
    let model = Model::new(cfg, 11).unwrap();
    let mut rng = Rng::new(12, Stream::GradCheck);
    for trial in 0..20 {
        let n = 2 + trial % 7;
        let x = random_matrix(&mut rng, n, 16);
        let mask: Vec<bool> = (0..n).map(|i| i == 0 || rng.uniform() > 0.2).collect();
        let mut tape = Tape::new(&model.params);
        let xv = tape.constant(Tensor::from_rows(&x).unwrap());
        let out = model.molecule_attention(&mut tape, 1, xv, None, &mask, None).unwrap();
        let expected = vanilla_attention(&x, &model.params, 1, 4, &mask);
        let got = tape.value(out);
        for i in 0..n {
            for j in 0..16 {
                assert!((got.at(i, j) - expected[i][j]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn adjacency_only_picks_the_neighbor() {
    let mut cfg = small_config();
    cfg.lambda_a = 0.0;
    cfg.lambda_d = 0.0;
    cfg.lambda_g = 1.0;
    let model = Model::new(cfg, 5).unwrap();
    let mut rng = Rng::new(6, Stream::GradCheck);
    let x = random_matrix(&mut rng, 2, 16);
    let mut tape = Tape::new(&model.params);
    let xv = tape.constant(Tensor::from_rows(&x).unwrap());
    let a = tape.constant(Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap());
    let out = model.molecule_attention(&mut tape, 0, xv, Some(a), &[true, true], None).unwrap();
    // With 𝒜 = A the concatenated heads are V with its rows swapped.
    let swapped = vec![x[1].clone(), x[0].clone()];
    let p = &model.params;
    let v = crate::tensor::matmul(&Tensor::from_rows(&swapped).unwrap(), false, p.by_name("layers.0.attn.v.weight").unwrap(), false).unwrap();
    let mut tape2 = Tape::new(p);
    let vv = tape2.constant(v);
    let vb = tape2.param(p.id("layers.0.attn.v.bias").unwrap());
    let vv = tape2.add_row(vv, vb).unwrap();
    let wo = tape2.param(p.id("layers.0.attn.o.weight").unwrap());
    let bo = tape2.param(p.id("layers.0.attn.o.bias").unwrap());
    let y = tape2.matmul(vv, wo).unwrap();
    let y = tape2.add_row(y, bo).unwrap();
    assert!(tape.value(out).max_abs_diff(tape2.value(y)) < 1e-12);
}

#[test]
fn zero_layers_is_pooled_embedding() {
    let mut cfg = small_config();
    cfg.n_layers = 0;
    let model = Model::new(cfg, 2).unwrap();
    let t = tensors(4, true);
    let p = &model.params;
    let emb = crate::tensor::matmul(&t.input(), false, p.by_name("embed.weight").unwrap(), false).unwrap();
    let n = t.n_nodes();
    let d = 16;
    let mut pooled = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            pooled[j] += (emb.at(i, j) + p.by_name("embed.bias").unwrap().data()[j]) / n as f64;
        }
    }
    let hw = p.by_name("head.weight").unwrap();
    let expected: f64 = (0..d).map(|j| pooled[j] * hw.data()[j]).sum::<f64>() + p.by_name("head.bias").unwrap().data()[0];
    assert!((model.predict(&t).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn row_stochastic_when_lambdas_sum_to_one() {
    let mut cfg = small_config();
    cfg.kernel = Kernel::SoftmaxRows;
    cfg.lambda_a = 0.2;
    cfg.lambda_d = 0.5;
    cfg.lambda_g = 0.3;
    let model = Model::new(cfg, 9).unwrap();
    for seed in 0..10 {
        let t = pad(&tensors(seed, true), 16).unwrap();
        let rec = model.attention(&t).unwrap();
        for heads in &rec.layers {
            for h in heads {
                for i in 0..t.n_nodes() {
                    let s: f64 = h.composite.row(i).iter().sum();
                    if t.mask[i] && !t.has_dummy || t.mask[i] && Some(i) != t.dummy_index() {
                        assert!((s - 1.0).abs() < 1e-6, "row {i} sums to {s}");
                    }
                }
                for i in 0..t.n_nodes() {
                    for j in 0..t.n_nodes() {
                        if !t.mask[j] {
                            assert_eq!(h.composite.at(i, j), 0.0);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn dummy_reached_only_through_softmax_with_exp_kernel() {
    let mut cfg = small_config();
    cfg.kernel = Kernel::Exp;
    let model = Model::new(cfg.clone(), 10).unwrap();
    let t = tensors(3, true);
    let dummy = t.dummy_index().unwrap();
    let rec = model.attention(&t).unwrap();
    for heads in &rec.layers {
        for h in heads {
            for i in 0..dummy {
                let composite = h.composite.at(i, dummy);
                let from_softmax = cfg.lambda_a * h.softmax.at(i, dummy);
                assert!((composite - from_softmax).abs() < 1e-300);
                assert!(rec.distance_term.at(i, dummy) < 1e-300);
                assert_eq!(rec.adjacency_term.at(i, dummy), 0.0);
            }
        }
    }
}

#[test]
fn pretrained_scale_runs() {
    let cfg = MatConfig {
        d_model: 1024,
        n_layers: 8,
        n_heads: 16,
        n_pff: 1,
        ..MatConfig::default()
    };
    let model = Model::new(cfg, 0).unwrap();
    let mut rng = Rng::new(30, Stream::Toy);
    let mol = random_molecule(&mut rng, 30, 30);
    let t = featurize_molecule(&mol, true, DistanceFallback::Error).unwrap();
    assert!(model.predict(&t).unwrap().is_finite());
}

#[test]
fn dropout_only_in_train_mode() {
    let mut cfg = small_config();
    cfg.dropout = 0.3;
    let model = Model::new(cfg, 1).unwrap();
    let t = tensors(8, true);
    assert_eq!(model.predict(&t).unwrap(), model.predict(&t).unwrap());
    let mut rng = Rng::new(1, Stream::Dropout);
    let mut tape = Tape::new(&model.params);
    let y = model.forward(&mut tape, &t, Some(&mut rng), None).unwrap();
    assert_ne!(tape.value(y).data()[0], model.predict(&t).unwrap());
}

fn full_grad_check(kernel: Kernel, dummy: bool, edges: bool) -> f64 {
    let mut cfg = small_config();
    cfg.kernel = kernel;
    cfg.dummy_node = dummy;
    if edges {
        cfg.adjacency_source = AdjacencySource::EdgeFeatures;
    }
    let mut model = Model::new(cfg, 21).unwrap();
    let t = tensors(22, dummy);
    let shell = model.shell();
    let cfg = GradCheckConfig {
        samples: 120,
        seed: 1,
        ..GradCheckConfig::default()
    };
    let report = grad_check::<ModelError, _>(&mut model.params, &cfg, |tape| {
        let y = shell.forward(tape, &t, None, None)?;
        Ok(tape.squared_error(y, &[0.7], 1.0)?)
    })
    .unwrap();
    report.max_rel_error
}

#[test]
fn full_model_gradients() {
    for kernel in [Kernel::SoftmaxRows, Kernel::Exp] {
        for dummy in [true, false] {
            let err = full_grad_check(kernel, dummy, false);
            assert!(err < 1e-4, "{kernel:?} dummy={dummy}: {err}");
        }
    }
    let err = full_grad_check(Kernel::Exp, true, true);
    assert!(err < 1e-4, "edge features: {err}");
}

#[test]
fn checkpoint_round_trip() {
    let model = Model::new(small_config(), 4).unwrap();
    let ck = Checkpoint::from_model(
        &model,
        Some(Standardization { mean: 1.5, std: 2.0 }),
        CheckpointMeta {
            epoch: Some(3),
            val_metric: Some(0.25),
            ..CheckpointMeta::default()
        },
    );
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"MATW");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.meta, ck.meta);
    assert_eq!(back.standardization, ck.standardization);
    let mut rounded = model.params.clone();
    rounded.round_to_f32();
    assert_eq!(back.params, rounded);
    let t = tensors(1, true);
    let a = model.predict(&t).unwrap();
    let b = back.model().unwrap().predict(&t).unwrap();
    assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(CheckpointError::Truncated(_))
    ));
    let mut v2 = bytes;
    v2[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&v2), Err(CheckpointError::Version(9))));
}

#[test]
fn encoder_transfer_skips_head() {
    let mut pre_cfg = small_config();
    pre_cfg.task = Task::NodePretrain;
    let pre = Model::new(pre_cfg, 1).unwrap();
    let mut down = Model::new(small_config(), 2).unwrap();
    let head_before = down.params.by_name("head.weight").unwrap().clone();
    let copied = down.load_encoder(&pre.params).unwrap();
    assert_eq!(copied, down.params.len() - 2);
    assert_eq!(down.params.by_name("head.weight").unwrap(), &head_before);
    assert_eq!(down.params.by_name("embed.weight"), pre.params.by_name("embed.weight"));

    let mut wide = small_config();
    wide.d_model = 32;
    assert!(Model::new(wide, 0).unwrap().load_encoder(&pre.params).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn permutation_invariant(seed in 0u64..1000, kernel_exp in any::<bool>()) {
        let mut cfg = small_config();
        cfg.kernel = if kernel_exp { Kernel::Exp } else { Kernel::SoftmaxRows };
        let model = Model::new(cfg, seed).unwrap();
        let mut rng = Rng::new(seed, Stream::Toy);
        let mol = random_molecule(&mut rng, 5, 15);
        let mut order: Vec<usize> = (0..mol.atom_count()).collect();
        rng.shuffle(&mut order);
        let a = featurize_molecule(&mol, true, DistanceFallback::Error).unwrap();
        let b = featurize_molecule(&mol.permuted(&order).unwrap(), true, DistanceFallback::Error).unwrap();
        let (pa, pb) = (model.predict(&a).unwrap(), model.predict(&b).unwrap());
        prop_assert!((pa - pb).abs() <= 1e-9, "{} vs {}", pa, pb);
    }

    #[test]
    fn padding_invariant(seed in 0u64..1000, extra in 0usize..9) {
        let model = Model::new(small_config(), seed).unwrap();
        let t = tensors(seed, true);
        let padded = pad(&t, t.n_nodes() + extra).unwrap();
        let (a, b) = (model.predict(&t).unwrap(), model.predict(&padded).unwrap());
        prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
    }
}
