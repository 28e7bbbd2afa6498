use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// No intra-block shortcuts.
    Plain,
    Resnet,
    /// Resnet blocks whose 3×3 convolutions are grouped by the cardinality.
    Resnext,
}

impl Baseline {
    pub fn has_shortcuts(self) -> bool {
        !matches!(self, Baseline::Plain)
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::Plain => "plain",
            Baseline::Resnet => "resnet",
            Baseline::Resnext => "resnext",
        })
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plain" => Ok(Baseline::Plain),
            "resnet" => Ok(Baseline::Resnet),
            "resnext" => Ok(Baseline::Resnext),
            _ => Err(Error::Parse {
                what: "baseline".into(),
                detail: format!("`{s}` is not one of plain, resnet, resnext"),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub num_blocks: usize,
    /// Spatial reduction applied by the first block of the stage.
    #[serde(default = "one")]
    pub downsample: usize,
}

fn one() -> usize {
    1
}

/// Which hierarchical projections `(j, ℓ)` are materialized, with `j` the
/// source level (0 is the stem output) and `ℓ` the destination stage.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum VariantMask {
    None,
    Full,
    In,
    Out,
    /// Projections spanning exactly `k` levels.
    Span(usize),
    Custom(BTreeSet<(usize, usize)>),
}

impl VariantMask {
    /// The masks of the standard ablation, baseline first.
    pub fn ablation_set() -> Vec<VariantMask> {
        vec![
            VariantMask::None,
            VariantMask::Full,
            VariantMask::In,
            VariantMask::Out,
            VariantMask::Span(1),
            VariantMask::Span(2),
            VariantMask::Span(3),
        ]
    }

    /// Selected pairs for a network with `levels` stages, ascending by
    /// destination then source.
    pub fn pairs(&self, levels: usize) -> Result<Vec<(usize, usize)>> {
        let all = (1..=levels).flat_map(|l| (0..l).map(move |j| (j, l)));
        let pairs: Vec<_> = match self {
            VariantMask::None => Vec::new(),
            VariantMask::Full => all.collect(),
            VariantMask::In => all.filter(|&(j, _)| j == 0).collect(),
            VariantMask::Out => all.filter(|&(_, l)| l == levels).collect(),
            VariantMask::Span(k) => all.filter(|&(j, l)| l - j == *k).collect(),
            VariantMask::Custom(set) => {
                if let Some(&(j, l)) = set.iter().find(|&&(j, l)| j >= l || l > levels) {
                    return Err(Error::Config(format!(
                        "projection ({j}, {l}) is invalid for {levels} stages: need 0 <= j < l <= {levels}"
                    )));
                }
                let mut v: Vec<_> = set.iter().copied().collect();
                v.sort_by_key(|&(j, l)| (l, j));
                v
            }
        };
        Ok(pairs)
    }
}

impl fmt::Display for VariantMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariantMask::None => f.write_str("none"),
            VariantMask::Full => f.write_str("full"),
            VariantMask::In => f.write_str("in"),
            VariantMask::Out => f.write_str("out"),
            VariantMask::Span(k) => write!(f, "p{k}"),
            VariantMask::Custom(set) => {
                let parts: Vec<String> = set.iter().map(|(j, l)| format!("{j}-{l}")).collect();
                write!(f, "custom:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for VariantMask {
    type Err = Error;

    /// Accepts `none`, `full`, `in`, `out`, `p<k>` and `custom:j-l,j-l,...`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |detail: String| Error::Parse {
            what: "mask".into(),
            detail,
        };
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "none" => return Ok(VariantMask::None),
            "full" => return Ok(VariantMask::Full),
            "in" => return Ok(VariantMask::In),
            "out" => return Ok(VariantMask::Out),
            _ => {}
        }
        if let Some(k) = lower.strip_prefix('p') {
            return match k.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(VariantMask::Span(k)),
                _ => Err(bad(format!("`{s}`: span must be a positive integer"))),
            };
        }
        if let Some(list) = lower.strip_prefix("custom:") {
            let mut set = BTreeSet::new();
            for item in list.split(',').map(str::trim).filter(|i| !i.is_empty()) {
                let (j, l) = item
                    .split_once('-')
                    .and_then(|(j, l)| Some((j.trim().parse().ok()?, l.trim().parse().ok()?)))
                    .ok_or_else(|| bad(format!("`{item}` is not a `j-l` pair")))?;
                set.insert((j, l));
            }
            return Ok(VariantMask::Custom(set));
        }
        Err(bad(format!(
            "`{s}` is not one of none, full, in, out, p1, p2, p3, custom:j-l,..."
        )))
    }
}

impl Serialize for VariantMask {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            VariantMask::Custom(set) => serializer.collect_seq(set.iter().map(|&(j, l)| [j, l])),
            other => serializer.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for VariantMask {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Name(String),
            Pairs(Vec<[usize; 2]>),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Name(s) => s.parse().map_err(serde::de::Error::custom),
            Repr::Pairs(p) => Ok(VariantMask::Custom(
                p.into_iter().map(|[j, l]| (j, l)).collect(),
            )),
        }
    }
}

/// One hierarchical projection from level `src` to stage `dst`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub src: usize,
    pub dst: usize,
    /// Spatial size at `src` divided by spatial size at `dst`.
    pub pool_factor: usize,
    pub c_src: usize,
    pub c_dst: usize,
}

impl ProjectionSpec {
    /// Name prefix of the projection's parameters.
    pub fn prefix(&self) -> String {
        format!("proj.{}.{}", self.src, self.dst)
    }

    /// 1×1 conv weights plus the batch-norm affine pair.
    pub fn param_count(&self) -> usize {
        self.c_src * self.c_dst + 2 * self.c_dst
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub baseline: Baseline,
    #[serde(default = "one")]
    pub cardinality: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    #[serde(default = "ten")]
    pub num_classes: usize,
    #[serde(default = "no_mask")]
    pub mask: VariantMask,
    #[serde(default = "cifar_shape")]
    pub input_shape: [usize; 3],
    #[serde(default)]
    pub seed: u64,
}

fn ten() -> usize {
    10
}

fn no_mask() -> VariantMask {
    VariantMask::None
}

fn cifar_shape() -> [usize; 3] {
    [3, 32, 32]
}

impl ModelConfig {
    /// The 18-layer default: a 16-channel stem and stages of 16, 32 and 64
    /// channels with 2, 3 and 3 basic blocks, the last two halving the
    /// resolution. Resnext uses cardinality 4.
    pub fn preset(baseline: Baseline) -> Self {
        ModelConfig {
            baseline,
            cardinality: if baseline == Baseline::Resnext { 4 } else { 1 },
            stem_channels: 16,
            stages: vec![
                StageConfig {
                    channels: 16,
                    num_blocks: 2,
                    downsample: 1,
                },
                StageConfig {
                    channels: 32,
                    num_blocks: 3,
                    downsample: 2,
                },
                StageConfig {
                    channels: 64,
                    num_blocks: 3,
                    downsample: 2,
                },
            ],
            num_classes: 10,
            mask: VariantMask::None,
            input_shape: cifar_shape(),
            seed: 0,
        }
    }

    pub fn with_mask(mut self, mask: VariantMask) -> Self {
        self.mask = mask;
        self
    }

    pub fn levels(&self) -> usize {
        self.stages.len()
    }

    /// Channel count of level `l`; level 0 is the stem.
    pub fn channels(&self, level: usize) -> usize {
        if level == 0 {
            self.stem_channels
        } else {
            self.stages[level - 1].channels
        }
    }

    /// Spatial extents `(H, W)` of level `l`.
    pub fn spatial(&self, level: usize) -> (usize, usize) {
        let f: usize = self.stages[..level].iter().map(|s| s.downsample).product();
        (self.input_shape[1] / f, self.input_shape[2] / f)
    }

    /// Groups of the 3×3 block convolutions.
    pub fn groups(&self) -> usize {
        match self.baseline {
            Baseline::Resnext => self.cardinality,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return fail("at least one stage is required".into());
        }
        if self.stem_channels == 0 || self.num_classes == 0 || self.cardinality == 0 {
            return fail("stem_channels, num_classes and cardinality must be positive".into());
        }
        if self.input_shape.contains(&0) {
            return fail(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            ));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.num_blocks == 0 {
                return fail(format!(
                    "stage {} needs positive channels and num_blocks",
                    i + 1
                ));
            }
            if !matches!(s.downsample, 1 | 2) {
                return fail(format!(
                    "stage {} downsample must be 1 or 2, got {}",
                    i + 1,
                    s.downsample
                ));
            }
            if self.baseline == Baseline::Resnext && s.channels % self.cardinality != 0 {
                return fail(format!(
                    "stage {} has {} channels, not divisible by cardinality {}",
                    i + 1,
                    s.channels,
                    self.cardinality
                ));
            }
        }
        let total: usize = self.stages.iter().map(|s| s.downsample).product();
        if !self.input_shape[1].is_multiple_of(total) || !self.input_shape[2].is_multiple_of(total)
        {
            return fail(format!(
                "input {}x{} is not divisible by the total downsampling {total}",
                self.input_shape[1], self.input_shape[2]
            ));
        }
        self.mask.pairs(self.levels())?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Parse {
            what: "model config".into(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("model config serializes to TOML")
    }
}

/// Projections selected by `mask`, each annotated with its pool factor and
/// channel counts.
pub fn enumerate_projections(
    config: &ModelConfig,
    mask: &VariantMask,
) -> Result<Vec<ProjectionSpec>> {
    let pairs = mask.pairs(config.levels())?;
    Ok(pairs
        .into_iter()
        .map(|(src, dst)| ProjectionSpec {
            src,
            dst,
            pool_factor: config.stages[src..dst]
                .iter()
                .map(|s| s.downsample)
                .product(),
            c_src: config.channels(src),
            c_dst: config.channels(dst),
        })
        .collect())
}
