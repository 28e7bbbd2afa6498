use serde::{Deserialize, Serialize};

use crate::architecture::Model;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean absolute contribution of one projection into a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionStat {
    pub src: usize,
    pub mean_abs: f64,
}

/// Statistics of the sum entering one stage output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    /// Destination level, 1-based over stages.
    pub level: usize,
    /// Mean of `|F|`, the last block's branch plus shortcut before the
    /// stage's final ReLU.
    pub mean_abs_residual: f64,
    /// One entry per enabled projection into this level, in summation order.
    pub projections: Vec<ProjectionStat>,
}

impl LevelStats {
    /// `mean |P_j→ℓ| / mean |F_ℓ|` per projection.
    pub fn ratios(&self) -> Vec<(usize, f64)> {
        self.projections
            .iter()
            .map(|p| (p.src, p.mean_abs / self.mean_abs_residual))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationReport {
    pub levels: Vec<LevelStats>,
    pub images: usize,
}

/// Per-image sums of `|v|`, accumulated in `f64` in memory order.
fn per_image_abs_sums(t: &Tensor, out: &mut Vec<f64>) {
    let n = t.shape()[0];
    let per = t.numel() / n;
    out.extend(
        t.data()
            .chunks_exact(per)
            .map(|img| img.iter().map(|&v| (v as f64).abs()).sum::<f64>()),
    );
}

/// Mean absolute residual and projection activations over `data`, with
/// batch norm in eval mode. Every image contributes a per-image sum and the
/// sums are added in dataset order, so the result does not depend on
/// `batch_size`.
pub fn activation_stats(
    model: &Model,
    data: &Dataset,
    batch_size: usize,
) -> Result<ActivationReport> {
    let input = model.config().input_shape;
    if data.image_shape() != input {
        return Err(Error::shape(
            "activation_stats",
            format!("images {:?}, model expects {input:?}", data.image_shape()),
        ));
    }
    let stages = model.config().stages.len();
    let projections = model.projections().to_vec();
    let mut residual_sums: Vec<Vec<f64>> = vec![Vec::with_capacity(data.len()); stages];
    let mut projection_sums: Vec<Vec<f64>> =
        vec![Vec::with_capacity(data.len()); projections.len()];
    let mut residual_sizes = vec![0usize; stages];
    let mut projection_sizes = vec![0usize; projections.len()];
    for (x, _) in data.batches(batch_size.max(1), None) {
        let trace = model.trace_eval(&x)?;
        let n = x.shape()[0];
        for (i, r) in trace.residuals.iter().enumerate() {
            residual_sizes[i] = r.numel() / n;
            per_image_abs_sums(r, &mut residual_sums[i]);
        }
        for (i, (_, p)) in trace.projections.iter().enumerate() {
            projection_sizes[i] = p.numel() / n;
            per_image_abs_sums(p, &mut projection_sums[i]);
        }
    }
    let images = data.len();
    let mean = |sums: &[f64], size: usize| sums.iter().sum::<f64>() / (images * size) as f64;
    let levels = (0..stages)
        .map(|s| LevelStats {
            level: s + 1,
            mean_abs_residual: mean(&residual_sums[s], residual_sizes[s]),
            projections: projections
                .iter()
                .enumerate()
                .filter(|(_, p)| p.dst == s + 1)
                .map(|(i, p)| ProjectionStat {
                    src: p.src,
                    mean_abs: mean(&projection_sums[i], projection_sizes[i]),
                })
                .collect(),
        })
        .collect();
    Ok(ActivationReport { levels, images })
}
