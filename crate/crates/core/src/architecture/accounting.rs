use indexmap::IndexMap;

use super::config::{enumerate_projections, ModelConfig, VariantMask};
use super::model::{layout, Model};
use crate::error::{Error, Result};

/// Trainable parameter count with a per-parameter breakdown in store order.
/// Batch-norm running statistics are not parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub per_param: Vec<(String, usize)>,
}

impl ParamCount {
    /// Totals per top-level group (`stem`, `stage1`, ..., `proj`, `fc`).
    pub fn per_group(&self) -> IndexMap<String, usize> {
        let mut groups = IndexMap::new();
        for (name, n) in &self.per_param {
            let group = name.split('.').next().unwrap_or(name);
            *groups.entry(group.to_string()).or_insert(0) += n;
        }
        groups
    }
}

pub fn count_params(model: &Model) -> ParamCount {
    let per_param: Vec<_> = model
        .params()
        .iter()
        .map(|(n, t)| (n.clone(), t.numel()))
        .collect();
    ParamCount {
        total: per_param.iter().map(|(_, n)| n).sum(),
        per_param,
    }
}

/// Parameter count of the network `config` describes, without building it.
pub fn count_config_params(config: &ModelConfig) -> Result<usize> {
    let (params, _) = layout(config)?;
    Ok(params
        .values()
        .map(|p| p.shape.iter().product::<usize>())
        .sum())
}

/// Parameters added by the projections of `mask`: `c_src·c_dst + 2·c_dst`
/// per projection.
pub fn projection_param_delta(config: &ModelConfig, mask: &VariantMask) -> Result<usize> {
    Ok(enumerate_projections(config, mask)?
        .iter()
        .map(|s| s.param_count())
        .sum())
}

/// Convolution and linear layers on the main path: the stem, two per
/// basic block and the classifier. Shortcut and projection 1×1
/// convolutions are not counted.
pub fn weighted_layer_count(config: &ModelConfig) -> usize {
    1 + 2 * config.stages.iter().map(|s| s.num_blocks).sum::<usize>() + 1
}

/// Widens the stages along a fixed path until the parameter count reaches
/// `target`, returning the first configuration at or above it.
///
/// The path scales every stage uniformly: as the factor `s` grows from 1,
/// stage `i` gains one increment each time `c_i·s` passes the midpoint to
/// its next width, so wider stages are widened proportionally more often.
/// Simultaneous steps go narrowest stage first. The increment is the
/// cardinality for resnext and 1 otherwise. Because the path does not
/// depend on `target`, a larger target never yields narrower stages.
pub fn adjust_widths(config: &ModelConfig, target: usize) -> Result<ModelConfig> {
    let current = count_config_params(config)?;
    if target < current {
        return Err(Error::InvalidArgument(format!(
            "target {target} is below the current parameter count {current}"
        )));
    }
    let unit = config.groups();
    let base: Vec<usize> = config.stages.iter().map(|s| s.channels).collect();
    let mut steps = vec![0usize; base.len()];
    // Step m of stage i happens at s = (2c + (2m − 1)·unit) / 2c.
    let at = |i: usize, m: usize| (2 * base[i] + (2 * m - 1) * unit, 2 * base[i]);
    let mut adjusted = config.clone();
    let mut count = current;
    while count < target {
        let next = (0..base.len())
            .min_by(|&a, &b| {
                let ((na, da), (nb, db)) = (at(a, steps[a] + 1), at(b, steps[b] + 1));
                (na * db)
                    .cmp(&(nb * da))
                    .then(base[a].cmp(&base[b]))
                    .then(a.cmp(&b))
            })
            .expect("at least one stage");
        steps[next] += 1;
        adjusted.stages[next].channels += unit;
        count = count_config_params(&adjusted)?;
    }
    Ok(adjusted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architecture::Baseline;

    #[test]
    fn depth_is_eighteen() {
        for b in [Baseline::Plain, Baseline::Resnet, Baseline::Resnext] {
            assert_eq!(weighted_layer_count(&ModelConfig::preset(b)), 18);
        }
    }

    #[test]
    fn unchanged_when_target_is_met() {
        let cfg = ModelConfig::preset(Baseline::Plain);
        let n = count_config_params(&cfg).unwrap();
        assert_eq!(adjust_widths(&cfg, n).unwrap(), cfg);
        assert!(adjust_widths(&cfg, n - 1).is_err());
    }

    #[test]
    fn resnext_widens_by_cardinality() {
        let cfg = ModelConfig::preset(Baseline::Resnext);
        let n = count_config_params(&cfg).unwrap();
        let adj = adjust_widths(&cfg, n + 1).unwrap();
        assert!(adj.validate().is_ok());
        assert_eq!(adj.stages[2].channels, 68);
    }
}
