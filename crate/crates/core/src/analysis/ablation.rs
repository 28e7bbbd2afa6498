use serde::{Deserialize, Serialize};

use crate::architecture::{count_params, Model, ModelConfig, VariantMask};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::training::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub params: usize,
    pub top1_mean: f64,
    /// Sample standard deviation over seeds; zero for a single seed.
    pub top1_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
}

/// Mean and sample (`n − 1`) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Final-epoch validation top-1 of one (variant, seed) cell. The seed
/// drives both initialization and the batch shuffle.
pub fn ablation_cell(
    base: &ModelConfig,
    variant: &VariantMask,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let wrap = |source: Error| Error::Variant {
        variant: variant.to_string(),
        seed,
        source: Box::new(source),
    };
    let config = ModelConfig {
        seed,
        ..base.clone().with_mask(variant.clone())
    };
    let model = Model::new(&config).map_err(wrap)?;
    let cfg = TrainConfig {
        seed,
        ..cfg.clone()
    };
    let out = train(model, train_set, val_set, &cfg).map_err(wrap)?;
    Ok(out.metrics.last().map_or(0.0, |r| r.val_top1))
}

/// Trains every variant once per seed and reports exact parameter counts
/// with the mean and spread of final validation top-1. `on_cell` receives
/// each finished cell.
pub fn run_ablation(
    base: &ModelConfig,
    variants: &[VariantMask],
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    seeds: &[u64],
    mut on_cell: impl FnMut(&VariantMask, u64, f64),
) -> Result<AblationResult> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "ablation needs at least one seed".into(),
        ));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let config = base.clone().with_mask(variant.clone());
        let params = count_params(&Model::new(&config)?).total;
        let mut accs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let acc = ablation_cell(base, variant, train_set, val_set, cfg, seed)?;
            on_cell(variant, seed, acc);
            accs.push(acc);
        }
        let (top1_mean, top1_std) = mean_std(&accs);
        rows.push(AblationRow {
            variant: variant.to_string(),
            params,
            top1_mean,
            top1_std,
        });
    }
    Ok(AblationResult { rows })
}
