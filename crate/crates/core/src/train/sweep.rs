use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::featurize::Kernel;
use crate::model::MatConfig;
use crate::tensor::Rng;

/// Learning rates tried when fine-tuning a pretrained encoder.
pub const LR_GRID: [f64; 7] = [1e-3, 5e-4, 1e-4, 5e-5, 1e-5, 5e-6, 1e-6];

/// Value grids for random search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpace {
    pub batch_size: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub epochs: Vec<usize>,
    pub d_model: Vec<usize>,
    pub n_layers: Vec<usize>,
    pub n_heads: Vec<usize>,
    pub n_pff: Vec<usize>,
    /// Shared grid for λ_a and λ_d; λ_g takes the remainder to 1.
    pub lambda: Vec<f64>,
    pub kernel: Vec<Kernel>,
    pub dropout: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub warmup_factor: Vec<f64>,
}

impl Default for SweepSpace {
    fn default() -> Self {
        SweepSpace {
            batch_size: vec![8, 16, 32, 64, 128],
            learning_rate: vec![0.01, 0.005, 0.001, 0.0005, 0.0001],
            epochs: vec![30, 100],
            d_model: vec![32, 64, 128, 256, 512, 1024],
            n_layers: vec![1, 2, 4, 6, 8],
            n_heads: vec![1, 2, 4, 8, 16],
            n_pff: vec![1],
            lambda: (0..=10).map(|k| k as f64 / 10.0).collect(),
            kernel: vec![Kernel::SoftmaxRows, Kernel::Exp],
            dropout: vec![0.0, 0.1, 0.2],
            weight_decay: vec![0.0, 1e-5, 1e-4, 1e-3, 1e-2],
            warmup_factor: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }
}

impl SweepSpace {
    /// The full grids with model size and epochs cut down to run on a laptop.
    pub fn desk() -> SweepSpace {
        SweepSpace {
            epochs: vec![30],
            d_model: vec![32, 64, 128],
            n_layers: vec![1, 2, 4],
            ..SweepSpace::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTrial {
    pub index: usize,
    pub model: MatConfig,
    pub train: TrainConfig,
}

/// Draws trial `index`. Task, featurization options and split come from
/// the base configs; λ pairs with λ_a + λ_d > 1 are redrawn.
pub fn sample_trial(space: &SweepSpace, base_model: &MatConfig, base_train: &TrainConfig, rng: &Rng, index: usize) -> SweepTrial {
    let mut r = rng.fork(index as u64);
    let mut model = base_model.clone();
    let mut train = base_train.clone();
    train.batch_size = *r.choose(&space.batch_size);
    train.learning_rate = *r.choose(&space.learning_rate);
    train.epochs = *r.choose(&space.epochs);
    train.weight_decay = *r.choose(&space.weight_decay);
    train.warmup_factor = *r.choose(&space.warmup_factor);
    train.seed = base_train.seed.wrapping_add(index as u64);
    model.d_model = *r.choose(&space.d_model);
    model.n_layers = *r.choose(&space.n_layers);
    let heads: Vec<usize> = space.n_heads.iter().copied().filter(|h| model.d_model % h == 0).collect();
    model.n_heads = if heads.is_empty() { 1 } else { *r.choose(&heads) };
    model.n_pff = *r.choose(&space.n_pff);
    loop {
        let (a, d) = (*r.choose(&space.lambda), *r.choose(&space.lambda));
        if a + d <= 1.0 + 1e-12 {
            model.lambda_a = a;
            model.lambda_d = d;
            model.lambda_g = ((1.0 - a - d) * 1e9).round() / 1e9;
            break;
        }
    }
    model.kernel = *r.choose(&space.kernel);
    model.dropout = *r.choose(&space.dropout);
    SweepTrial { index, model, train }
}

/// One trial per entry of [`LR_GRID`], everything else fixed.
pub fn finetune_trials(base_model: &MatConfig, base_train: &TrainConfig) -> Vec<SweepTrial> {
    LR_GRID
        .iter()
        .enumerate()
        .map(|(index, &lr)| SweepTrial {
            index,
            model: base_model.clone(),
            train: TrainConfig {
                learning_rate: lr,
                ..base_train.clone()
            },
        })
        .collect()
}
